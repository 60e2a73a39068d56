"""Command-line entry point: ``knn-el {synth, train, build-datastore, link, eval}``.

Settings resolve in this order, later wins: built-in defaults, the
``--profile`` preset, the JSON ``--config`` file, explicit flags. Relative
paths in a config file are taken relative to that file. Input paths default
to the conventional file names inside ``--out`` so that a run directory
produced by ``synth`` can be fed straight to the next command.

stdout carries data only (JSON lines, one per result). Diagnostics, the
resolved run header and warnings go to stderr. A failure prints one JSON
line ``{"error": <category>, "message": ...}`` on stderr and exits 2 (bad
input), 3 (bad state: corrupt or mismatched files) or 4 (internal).
"""
from __future__ import annotations

import argparse
import fcntl
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Sequence

from .core import Dataset, Mention
from .datastore import Datastore, build_datastore, load_datastore, save_datastore
from .encoder import FROZEN, TRAINABLE, EncoderParams, FeatureHasherConfig, frozen_params, load_frozen_table
from .errors import (
    DataFileError,
    FingerprintMismatchError,
    InvalidInputError,
    InvalidStateError,
    KnnElError,
    UnsupportedModeError,
)
from .experiments import (
    TrainedModel,
    evaluate_prepared,
    grid_csv,
    hyperparameter_sweep,
    low_resource_sweep,
    prepare,
    rows_csv,
    run_ablations,
)
from .inference import PROFILES, InferenceConfig
from .io import (
    atomic_write_text,
    dumps_jsonl,
    load_mentions,
    load_ontology,
    load_params,
    mentions_jsonl,
    ontology_jsonl,
    read_jsonl,
    save_params,
)
from .metrics import long_tail_report
from .synthetic import SyntheticSpec, corpus_summary, generate_synthetic
from .training import TrainConfig, train

log = logging.getLogger("knn_el")

PATH_KEYS = ("ontology", "train", "validation", "test", "datastore", "params", "frozen_embeddings")
DEFAULT_FILES = {
    "ontology": "ontology.jsonl",
    "train": "train.jsonl",
    "validation": "validation.jsonl",
    "test": "test.jsonl",
    "datastore": "datastore.kels",
    "params": "params.kelp",
}

# flag dest -> TrainConfig field
_TRAIN_FLAGS = {
    "tau": "tau",
    "hard_negatives": "hard_negatives_p",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "weight_decay": "weight_decay",
    "patience": "early_stop_patience",
}
# flag dest -> InferenceConfig field
_INFER_FLAGS = {"k": "k", "lam": "lam", "beta1": "beta1", "beta2": "beta2", "aggregation": "aggregation"}
_SYNTH_FLAGS = ("n_entities", "synonyms_per_entity", "noise_rate", "confusable_fraction", "zipf_exponent",
                "n_train", "n_validation", "n_test")


class UsageError(InvalidInputError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # route through the JSON error line
        raise UsageError(message)


@dataclass
class RunConfig:
    command: str
    out: Path
    seed: int = 0
    paths: dict[str, Path] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    encoder_mode: str = TRAINABLE
    hasher: FeatureHasherConfig = field(default_factory=FeatureHasherConfig)
    embed_dim: int = 128
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    profile: str = "synthetic"

    def path(self, key: str, required: bool = True) -> Path | None:
        """Resolve an input path; explicitly given paths must exist, defaults may be absent."""
        explicit = key in self.paths
        p = self.paths.get(key)
        if p is None and key in DEFAULT_FILES:
            p = self.out / DEFAULT_FILES[key]
        if p is not None and p.exists():
            return p
        if required or explicit:
            raise DataFileError(f"missing {key} file: {p if p is not None else '(not given)'}")
        return None

    def header(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "profile": self.profile,
            "encoder": {"mode": self.encoder_mode, "hasher": self.hasher.to_dict(), "embed_dim": self.embed_dim},
            "train": self.train.to_dict(),
            "inference": self.inference.to_dict(),
            "paths": {k: str(v) for k, v in sorted(self.paths.items())},
            "out": str(self.out),
        }


def _apply(obj, updates: dict, what: str):
    names = {f.name for f in fields(obj)}
    unknown = sorted(set(updates) - names)
    if unknown:
        raise DataFileError(f"unknown {what} setting(s): {', '.join(unknown)}")
    return replace(obj, **updates) if updates else obj


def _read_config(path: Path) -> dict:
    if not path.is_file():
        raise DataFileError(f"no such config file: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFileError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise DataFileError(f"{path}: config must be a JSON object")
    return data


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, profile, config file and flags into a :class:`RunConfig`."""
    conf = _read_config(Path(args.config)) if args.config else {}
    base = Path(args.config).parent if args.config else Path.cwd()

    def conf_path(v: str) -> Path:
        p = Path(v)
        return p if p.is_absolute() else base / p

    profile = args.profile or conf.get("profile", "synthetic")
    if profile not in PROFILES:
        raise InvalidInputError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    out = Path(args.out) if args.out else conf_path(conf["out"]) if "out" in conf else Path("knn-el-out")
    seed = args.seed if args.seed is not None else int(conf.get("seed", 0))
    if not 0 <= seed < 2**64:
        raise InvalidInputError("seed must be an unsigned 64-bit integer")

    paths = {k: conf_path(v) for k, v in (conf.get("paths") or {}).items()}
    if set(paths) - set(PATH_KEYS):
        raise DataFileError(f"unknown path key(s): {sorted(set(paths) - set(PATH_KEYS))}")
    for key in PATH_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            paths[key] = Path(v)

    tcfg = _apply(TrainConfig(seed=seed), dict(conf.get("train") or {}), "train")
    tcfg = replace(tcfg, seed=seed, **{f: getattr(args, a) for a, f in _TRAIN_FLAGS.items()
                                        if getattr(args, a, None) is not None})

    inf_conf = dict(conf.get("inference") or {})
    if "lambda" in inf_conf:
        inf_conf["lam"] = inf_conf.pop("lambda")
    icfg = _apply(PROFILES[profile], inf_conf, "inference")
    icfg = replace(icfg, **{f: getattr(args, a) for a, f in _INFER_FLAGS.items() if getattr(args, a, None) is not None})

    enc = dict(conf.get("encoder") or {})
    mode = getattr(args, "encoder", None) or enc.pop("mode", None)
    enc.pop("mode", None)
    if mode is None:
        mode = FROZEN if "frozen_embeddings" in paths else TRAINABLE
    if mode not in (TRAINABLE, FROZEN):
        raise InvalidInputError(f"unknown encoder mode {mode!r}")
    embed_dim = int(getattr(args, "embed_dim", None) or enc.pop("embed_dim", 128))
    enc.pop("embed_dim", None)
    if getattr(args, "feature_dim", None):
        enc["feature_dim"] = args.feature_dim
    if "ngram_sizes" in enc:
        enc["ngram_sizes"] = tuple(enc["ngram_sizes"])
    hasher = _apply(FeatureHasherConfig(), enc, "encoder")

    syn = _apply(SyntheticSpec(), dict(conf.get("synthetic") or {}), "synthetic")
    syn = replace(syn, seed=seed, **{f: getattr(args, f) for f in _SYNTH_FLAGS if getattr(args, f, None) is not None})

    return RunConfig(args.command, out, seed, paths, tcfg, icfg, mode, hasher, embed_dim, syn, profile)


@contextmanager
def output_lock(out: Path) -> Iterator[None]:
    """Advisory exclusive lock on the output directory."""
    out.mkdir(parents=True, exist_ok=True)
    with open(out / ".knn-el.lock", "a") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise InvalidStateError(f"output directory {out} is in use by another knn-el process") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, ensure_ascii=False) + "\n")
    sys.stdout.flush()


def _load_encoder(cfg: RunConfig) -> EncoderParams:
    if cfg.encoder_mode == FROZEN:
        path = cfg.path("frozen_embeddings")
        try:
            return frozen_params(load_frozen_table(path))
        except FileNotFoundError:
            raise DataFileError(f"no such frozen embedding file: {path}") from None
    return load_params(cfg.path("params"))


def _load_store(cfg: RunConfig, params: EncoderParams, force: bool) -> Datastore:
    store = load_datastore(cfg.path("datastore"))
    if store.size and store.dim != params.embed_dim:
        raise FingerprintMismatchError(
            f"datastore dim {store.dim} does not match encoder dim {params.embed_dim}"
        )
    if store.fingerprint != params.fingerprint():
        if not force:
            raise FingerprintMismatchError(
                "datastore was built with different encoder parameters (pass --force to use it anyway)"
            )
        log.warning("datastore fingerprint does not match encoder parameters; continuing because of --force")
    return store


def _announce(cfg: RunConfig) -> None:
    """Write the resolved run header to stderr once inputs have been checked."""
    sys.stderr.write(f"knn-el {cfg.command} " + json.dumps(cfg.header(), sort_keys=True) + "\n")


def _dataset(cfg: RunConfig, need_train: bool = True) -> Dataset:
    train_path = cfg.path("train", required=need_train)
    val_path = cfg.path("validation", required=False)
    test_path = cfg.path("test", required=False)
    onto = load_ontology(cfg.path("ontology"))
    return Dataset(
        onto,
        tuple(load_mentions(train_path, onto)) if train_path else (),
        tuple(load_mentions(val_path, onto)) if val_path else (),
        tuple(load_mentions(test_path, onto)) if test_path else (),
    )


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> None:
    ds = generate_synthetic(cfg.synthetic)
    with output_lock(cfg.out):
        atomic_write_text(cfg.out / DEFAULT_FILES["ontology"], ontology_jsonl(ds.ontology))
        for name, split in (("train", ds.train), ("validation", ds.validation), ("test", ds.test)):
            atomic_write_text(cfg.out / DEFAULT_FILES[name], mentions_jsonl(split))
    _emit(corpus_summary(ds))


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> None:
    if cfg.encoder_mode != TRAINABLE:
        raise UnsupportedModeError("frozen-lookup embeddings are not trainable")
    ds = _dataset(cfg)
    if not ds.train:
        raise DataFileError(f"training file {cfg.path('train')} has no instances")
    _announce(cfg)
    started = time.time()
    params, run_log = train(ds.train, ds.ontology, cfg.train, ds.validation,
                            hasher=cfg.hasher, embed_dim=cfg.embed_dim)
    for w in run_log.warnings:
        log.warning(w)
    record = {
        # paths are left out so that reruns into another directory stay byte-identical
        "config": {k: v for k, v in cfg.header().items() if k not in ("paths", "out")},
        "dhns_enabled": run_log.dhns_enabled,
        "dhns_violations": run_log.dhns_violations,
        "best_epoch": run_log.best_epoch,
        "epochs": run_log.epochs,
        "warnings": run_log.warnings,
    }
    timings = {"started_at": started, "wall_s": time.time() - started, "epochs": run_log.timings}
    with output_lock(cfg.out):
        save_params(params, cfg.out / DEFAULT_FILES["params"])
        atomic_write_text(cfg.out / "train_log.json", json.dumps(record, indent=2) + "\n")
        atomic_write_text(cfg.out / "train_timings.json", json.dumps(timings, indent=2) + "\n")
    _emit({"params": str(cfg.out / DEFAULT_FILES["params"]), "epochs_run": len(run_log.epochs),
           "best_epoch": run_log.best_epoch, "dhns_enabled": run_log.dhns_enabled})


def cmd_build_datastore(cfg: RunConfig, args: argparse.Namespace) -> None:
    params = _load_encoder(cfg)
    onto = load_ontology(cfg.path("ontology"))
    train_set = load_mentions(cfg.path("train"), onto)
    if not train_set:
        log.warning("training file is empty: writing an empty datastore")
    store = build_datastore(train_set, params, onto)
    target = cfg.paths.get("datastore") or cfg.out / DEFAULT_FILES["datastore"]
    with output_lock(target.parent):
        save_datastore(store, target)
    _emit({"datastore": str(target), "M": store.size, "dim": store.dim})


def _link_inputs(args: argparse.Namespace) -> list[str]:
    texts = list(args.mentions or [])
    if args.input:
        if args.input == "-":
            lines = sys.stdin.read().splitlines()
            rows = []
            for i, line in enumerate(lines, 1):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise DataFileError(f"stdin:{i}: invalid JSON ({exc.msg})") from None
        else:
            rows = read_jsonl(args.input)
        for i, row in enumerate(rows):
            if not isinstance(row, dict) or "mention" not in row:
                raise DataFileError(f"input record {i} lacks field 'mention'")
            texts.append(row["mention"])
    if not texts:
        raise UsageError("give mention text(s) or --input")
    return texts


def cmd_link(cfg: RunConfig, args: argparse.Namespace) -> None:
    from .inference import build_entity_cache, link

    params = _load_encoder(cfg)
    onto = load_ontology(cfg.path("ontology"))
    store = None if args.no_datastore else _load_store(cfg, params, args.force)
    cache = build_entity_cache(onto, params)
    for text in _link_inputs(args):
        res = link(Mention(text), store, cache, params, cfg.inference, top_n=args.top_n)
        _emit(res.to_dict())


def _parse_list(raw: str | None, cast) -> list | None:
    if raw is None:
        return None
    try:
        return [cast(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {raw!r}") from None


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> None:
    params = _load_encoder(cfg)
    ds = _dataset(cfg, need_train=args.ablate or args.low_resource)
    if not ds.test:
        raise DataFileError(f"missing or empty test file: {cfg.path('test', required=False)}")
    store = None if args.no_datastore else _load_store(cfg, params, args.force)
    _announce(cfg)
    icfg = cfg.inference
    sweep_k = _parse_list(args.sweep_k, int)
    sweep_lam = _parse_list(args.sweep_lambda, float)
    k_max = max([icfg.k, *(sweep_k or [])])
    prep = prepare(ds.test, ds.ontology, params, store, icfg.beta1, k_max)
    res = evaluate_prepared(prep, icfg, top_n=args.top_n)

    outputs: dict[str, str] = {}
    metrics = {"n": len(ds.test), "acc1": res.acc1, "acc5": res.acc5, "inference": icfg.to_dict(),
               "datastore": store is not None}
    outputs["metrics.json"] = json.dumps(metrics, indent=2) + "\n"
    cases = []
    for rec, lr in zip(res.records, res.results):
        cases.append({"gold": rec.gold, "correct": rec.predictions[0] == rec.gold, **lr.to_dict()})
    outputs["cases.jsonl"] = dumps_jsonl(cases)
    if ds.train:
        buckets = long_tail_report(res.records, ds.train)
        outputs["buckets.csv"] = rows_csv([
            {"bucket": b.label, "entities": len(b.entities), "records": b.count,
             "acc1": "" if b.acc1 is None else b.acc1}
            for b in buckets
        ])
    else:
        log.warning("no training file: skipping the frequency-bucket report")

    if args.ablate or args.low_resource:
        if cfg.encoder_mode != TRAINABLE:
            raise UnsupportedModeError("ablations and low-resource sweeps retrain the encoder")
        if store is None:
            raise UsageError("--ablate and --low-resource need the datastore")
    if args.ablate:
        full = TrainedModel(params, None, store)
        rows = run_ablations(ds, cfg.train, icfg, cfg.hasher, cfg.embed_dim, full=full)
        outputs["ablation.csv"] = rows_csv(rows)
    if sweep_k or sweep_lam:
        grid = hyperparameter_sweep(ds.test, ds.ontology, params, store, sweep_k or [icfg.k],
                                    sweep_lam or [icfg.lam], icfg) if store is not None else None
        if grid is None:
            raise UsageError("sweeps need the datastore")
        outputs["sweep.csv"] = grid_csv(grid)
    if args.low_resource:
        rows = low_resource_sweep(ds, cfg.train, icfg, hasher=cfg.hasher, embed_dim=cfg.embed_dim)
        outputs["low_resource.csv"] = rows_csv(rows)

    with output_lock(cfg.out):
        for name, text in outputs.items():
            atomic_write_text(cfg.out / name, text)
    _emit({"acc1": res.acc1, "acc5": res.acc5, "n": len(ds.test), "files": sorted(outputs)})


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (default: knn-el-out)")
    common.add_argument("--seed", type=int, help="single seed for every random choice")
    common.add_argument("--profile", help=f"inference preset: {', '.join(PROFILES)}")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    data = _Parser(add_help=False)
    for key in PATH_KEYS:
        data.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="PATH")
    data.add_argument("--encoder", choices=[TRAINABLE, FROZEN], help="encoder mode")

    enc = _Parser(add_help=False)
    enc.add_argument("--feature-dim", type=int, help="hashed n-gram buckets")
    enc.add_argument("--embed-dim", type=int, help="embedding width")

    tr = _Parser(add_help=False)
    tr.add_argument("--tau", type=float, help="contrastive temperature")
    tr.add_argument("--hard-negatives", type=int, help="hard negatives per mention (0 disables)")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--learning-rate", type=float)
    tr.add_argument("--weight-decay", type=float)
    tr.add_argument("--patience", type=int, help="early-stopping patience in epochs")

    inf = _Parser(add_help=False)
    inf.add_argument("--k", type=int, help="neighbors retrieved")
    inf.add_argument("--lambda", dest="lam", type=float, help="weight of the kNN distribution")
    inf.add_argument("--beta1", type=float, help="model softmax temperature")
    inf.add_argument("--beta2", type=float, help="kNN softmax temperature")
    inf.add_argument("--aggregation", choices=["max", "sum"])
    inf.add_argument("--top-n", type=int, default=5, help="candidates reported per mention")
    inf.add_argument("--no-datastore", action="store_true", help="link with the encoder only")
    inf.add_argument("--force", action="store_true", help="accept a datastore built by other params")

    parser = _Parser(prog="knn-el", description="kNN-augmented biomedical entity linking")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic benchmark")
    p.add_argument("--n-entities", type=int)
    p.add_argument("--synonyms-per-entity", type=int)
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--confusable-fraction", type=float)
    p.add_argument("--zipf-exponent", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-validation", type=int)
    p.add_argument("--n-test", type=int)

    sub.add_parser("train", parents=[common, data, enc, tr], help="train the n-gram encoder")
    sub.add_parser("build-datastore", parents=[common, data, enc], help="embed training mentions")

    p = sub.add_parser("link", parents=[common, data, enc, inf], help="link mentions, JSON per line")
    p.add_argument("mentions", nargs="*", help="mention texts")
    p.add_argument("--input", help="JSONL file of {\"mention\": ...} records, or - for stdin")

    p = sub.add_parser("eval", parents=[common, data, enc, tr, inf], help="evaluate on the test split")
    p.add_argument("--ablate", action="store_true", help="also run the w/o kNN and w/o DHNS rows")
    p.add_argument("--sweep-k", help="comma-separated k values")
    p.add_argument("--sweep-lambda", help="comma-separated lambda values")
    p.add_argument("--low-resource", action="store_true", help="Acc@1 vs fine-tuning fraction")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "build-datastore": cmd_build_datastore,
    "link": cmd_link,
    "eval": cmd_eval,
}


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    def emit(self, record: logging.LogRecord) -> None:
        self.stream = sys.stderr
        super().emit(record)


def _setup_logging(verbose: bool) -> None:
    if not any(isinstance(h, _StderrHandler) for h in log.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("knn-el: %(levelname)s: %(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.INFO if verbose else logging.WARNING)


def _error_line(category: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args.verbose)
        cfg = resolve(args)
        COMMANDS[args.command](cfg, args)
    except KnnElError as exc:
        _error_line(exc.category, str(exc))
        return exc.exit_code
    except OSError as exc:
        _error_line("io", str(exc))
        return 2
    except Exception as exc:  # pragma: no cover - last-resort guard
        _error_line("internal", f"{type(exc).__name__}: {exc}")
        return 4
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
