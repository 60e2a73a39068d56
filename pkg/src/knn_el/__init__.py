"""kNN-augmented biomedical entity linking with a hashed n-gram encoder."""
from __future__ import annotations

from .core import Dataset, EntityRecord, Mention, Ontology, ProbabilityDistribution
from .datastore import Datastore, build_datastore, load_datastore, query_knn, save_datastore
from .encoder import FeatureHasherConfig, encode, init_params
from .inference import PROFILES, InferenceConfig, build_entity_cache, link
from .synthetic import SyntheticSpec, generate_synthetic
from .training import TrainConfig, train

__all__ = [
    "Dataset",
    "Datastore",
    "EntityRecord",
    "FeatureHasherConfig",
    "InferenceConfig",
    "Mention",
    "Ontology",
    "PROFILES",
    "ProbabilityDistribution",
    "SyntheticSpec",
    "TrainConfig",
    "build_datastore",
    "build_entity_cache",
    "encode",
    "generate_synthetic",
    "init_params",
    "link",
    "load_datastore",
    "query_knn",
    "save_datastore",
    "train",
]
