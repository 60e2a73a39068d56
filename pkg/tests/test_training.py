import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY_HASHER, unit_rows
from knn_el.core import EntityRecord, Mention, Ontology
from knn_el.encoder import FrozenTable, encode, frozen_params, init_params, normalize_backward
from knn_el.errors import InvalidInputError, UnsupportedModeError
from knn_el.experiments import fit
from knn_el.training import (
    AdamWState,
    EntityIndexSnapshot,
    TrainConfig,
    adamw_step,
    batch_contrastive_loss,
    build_in_batch_negatives,
    contrastive_loss,
    dhns_retrieve,
    rebuild_entity_index,
    train,
)

FAST = TrainConfig(epochs=3, batch_size=32, learning_rate=1e-3, seed=5)


class TestInBatchNegatives:
    def test_singleton(self):
        assert build_in_batch_negatives([Mention("x", "A")], 0) == []

    def test_others(self):
        batch = [Mention("a", "A"), Mention("b", "B"), Mention("c", "C")]
        assert build_in_batch_negatives(batch, 0) == ["B", "C"]

    def test_shared_gold_excluded(self):
        batch = [Mention("a", "A"), Mention("a2", "A"), Mention("b", "B")]
        assert build_in_batch_negatives(batch, 0) == ["B"]

    def test_deduplicated(self):
        batch = [Mention("a", "A"), Mention("b", "B"), Mention("b2", "B")]
        assert build_in_batch_negatives(batch, 0) == ["B"]

    def test_bad_anchor(self):
        with pytest.raises(InvalidInputError):
            build_in_batch_negatives([Mention("a", "A")], 3)


def toy_snapshot():
    angles = np.radians([0.0, 10.0, 20.0, -10.0, 90.0])
    emb = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return EntityIndexSnapshot(("E0", "E1", "E2", "E3", "E4"), emb, 0)


class TestDHNS:
    def test_p_zero(self):
        assert dhns_retrieve(np.array([1.0, 0.0]), toy_snapshot(), "E0", 0) == []

    def test_gold_excluded_next_p(self):
        assert dhns_retrieve(np.array([1.0, 0.0]), toy_snapshot(), "E0", 2) == ["E1", "E3"]

    @pytest.mark.parametrize("gold", ["E0", "E1", "E2", "E3", "E4"])
    @pytest.mark.parametrize("p", [1, 3, 4, 10])
    def test_matches_full_sort(self, gold, p):
        snap = toy_snapshot()
        q = np.array([np.cos(0.05), np.sin(0.05)])
        sims = snap.embeddings @ q
        brute = [snap.ids[i] for i in sorted(range(5), key=lambda i: (-sims[i], i)) if snap.ids[i] != gold][:p]
        got = dhns_retrieve(q, snap, gold, p)
        assert got == brute
        assert len(got) == min(p, 4)

    def test_tie_goes_to_lower_ordinal(self):
        assert dhns_retrieve(np.array([1.0, 0.0]), toy_snapshot(), "E0", 1) == ["E1"]

    def test_rebuild_snapshot(self, tiny_dataset):
        params = init_params(TINY_HASHER, 16, seed=0)
        snap = rebuild_entity_index(tiny_dataset.ontology, params, epoch=2)
        assert snap.embeddings.shape == (len(tiny_dataset.ontology), 16) and snap.built_at_epoch == 2
        rec = tiny_dataset.ontology.entities[7]
        assert np.array_equal(snap.embeddings[7], encode(rec.canonical_name, params))

    def test_snapshot_changes_after_update(self, tiny_dataset):
        start = init_params(TINY_HASHER, 16, seed=0)
        trained, _ = train(tiny_dataset.train[:32], tiny_dataset.ontology, replace(FAST, epochs=1), params=start)
        a = rebuild_entity_index(tiny_dataset.ontology, start)
        b = rebuild_entity_index(tiny_dataset.ontology, trained)
        assert not np.array_equal(a.embeddings, b.embeddings)


def raw_loss(raw, tau):
    u = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return contrastive_loss(u[0], u[1], u[2:], tau).loss


class TestContrastiveLoss:
    def test_no_negatives(self, rng):
        a = unit_rows(rng, 1, 8)[0]
        assert contrastive_loss(a, a, [], 0.01).loss == 0.0

    def test_one_equal_negative(self, rng):
        a, p = unit_rows(rng, 2, 8)
        # reflect p through a so the negative has the same cosine
        n = 2 * (a @ p) * a - p
        res = contrastive_loss(a, p, [n], 1.0)
        assert res.loss == pytest.approx(math.log(2), abs=1e-12)

    def test_bad_tau(self, rng):
        a = unit_rows(rng, 1, 4)[0]
        with pytest.raises(InvalidInputError):
            contrastive_loss(a, a, [], 0.0)

    @pytest.mark.parametrize("tau", [0.01, 0.1, 1.0])
    @pytest.mark.parametrize("seed", range(4))
    def test_gradients_finite_differences(self, tau, seed):
        rng = np.random.default_rng(seed)
        u = unit_rows(rng, 5, 8)
        res = contrastive_loss(u[0], u[1], u[2:], tau)
        analytic = np.vstack([res.grad_anchor, res.grad_positive, res.grad_negatives])
        h = 1e-5
        fd = np.zeros_like(u)
        for i in range(u.shape[0]):
            for j in range(8):
                up, down = u.copy(), u.copy()
                up[i, j] += h
                down[i, j] -= h
                lu = contrastive_loss(up[0], up[1], up[2:], tau).loss
                ld = contrastive_loss(down[0], down[1], down[2:], tau).loss
                fd[i, j] = (lu - ld) / (2 * h)
        rel = np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), np.linalg.norm(analytic))
        assert rel < 1e-5

    def test_saturated_gradient_keeps_positive_term(self):
        a = np.array([1.0, 0.0])
        p = np.array([0.9, np.sqrt(1 - 0.81)])
        n = np.array([-0.3, np.sqrt(1 - 0.09)])
        res = contrastive_loss(a, p, [n], 0.01)
        # p_neg = exp(-120) / (1 + exp(-120)) is far below double epsilon
        p_neg = np.exp((n @ a - p @ a) / 0.01)
        np.testing.assert_allclose(res.grad_anchor, p_neg * (n - p) / 0.01, rtol=1e-12)
        np.testing.assert_allclose(res.grad_positive, -p_neg * a / 0.01, rtol=1e-12)
        assert res.loss == pytest.approx(p_neg, rel=1e-12)

    def test_permutation_invariant(self, rng):
        u = unit_rows(rng, 7, 8)
        a = contrastive_loss(u[0], u[1], u[2:], 0.05).loss
        b = contrastive_loss(u[0], u[1], u[2:][::-1], 0.05).loss
        assert abs(a - b) < 1e-12

    def test_nonnegative(self, rng):
        for _ in range(200):
            u = unit_rows(rng, int(rng.integers(1, 8)), 6)
            w = unit_rows(rng, 1, 6)[0]
            assert contrastive_loss(w, u[0], u[1:], float(rng.choice([0.01, 0.1, 1.0]))).loss >= 0.0

    def test_small_step_decreases_loss(self, rng):
        raw = rng.normal(size=(3, 8))
        tau = 0.1
        u = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        res = contrastive_loss(u[0], u[1], u[2:], tau)
        grads = np.vstack([
            normalize_backward(raw[0], res.grad_anchor),
            normalize_backward(raw[1], res.grad_positive),
            normalize_backward(raw[2], res.grad_negatives[0]),
        ])
        assert raw_loss(raw - 1e-4 * grads, tau) < raw_loss(raw, tau)

    def test_batch_matches_per_anchor(self, rng):
        Q = unit_rows(rng, 4, 8)
        C = unit_rows(rng, 6, 8)
        pos = np.array([0, 2, 2, 5])
        mask = rng.random((4, 6)) < 0.6
        mask[np.arange(4), pos] = True
        mean, per, dQ, dC = batch_contrastive_loss(Q, C, pos, mask, 0.05)
        exp_dC = np.zeros_like(C)
        for i in range(4):
            negs = [j for j in range(6) if mask[i, j] and j != pos[i]]
            r = contrastive_loss(Q[i], C[pos[i]], C[negs], 0.05)
            assert per[i] == pytest.approx(r.loss, abs=1e-12)
            np.testing.assert_allclose(dQ[i], r.grad_anchor / 4, atol=1e-12)
            exp_dC[pos[i]] += r.grad_positive / 4
            for j, g in zip(negs, r.grad_negatives):
                exp_dC[j] += g / 4
        np.testing.assert_allclose(dC, exp_dC, atol=1e-12)
        assert mean == pytest.approx(per.mean())


class TestAdamW:
    def test_zero_grad_no_decay(self, rng):
        p = rng.normal(size=(3, 2))
        before = p.copy()
        adamw_step(p, np.zeros_like(p), AdamWState(), 1e-3, 0.0)
        assert np.array_equal(p, before)

    def test_zero_grad_decay(self, rng):
        p = rng.normal(size=5)
        before = p.copy()
        adamw_step(p, np.zeros_like(p), AdamWState(), 0.01, 0.1)
        np.testing.assert_allclose(p, before * (1 - 0.01 * 0.1), rtol=1e-15)

    def test_scalar_hand_trace(self):
        p = np.array([0.5])
        st = AdamWState()
        adamw_step(p, np.array([1.0]), st, 0.1, 0.0)
        # m_hat = v_hat = 1 after one step
        assert p[0] == pytest.approx(0.5 - 0.1 / (1 + 1e-8), rel=1e-15)
        assert st.step == 1

    def test_deterministic(self, rng):
        g = rng.normal(size=(4, 4))
        a, b = np.ones((4, 4)), np.ones((4, 4))
        sa, sb = AdamWState(), AdamWState()
        for _ in range(3):
            adamw_step(a, g, sa, 1e-2, 0.01)
            adamw_step(b, g, sb, 1e-2, 0.01)
        assert np.array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            adamw_step(np.ones(2), np.ones(3), AdamWState(), 0.1, 0.0)


class TestTrain:
    def test_deterministic(self, tiny_dataset):
        runs = [
            train(tiny_dataset.train, tiny_dataset.ontology, FAST, tiny_dataset.validation,
                  hasher=TINY_HASHER, embed_dim=16)
            for _ in range(2)
        ]
        assert np.array_equal(runs[0][0].projection, runs[1][0].projection)
        assert runs[0][1].epochs == runs[1][1].epochs

    def test_loss_decreases(self, tiny_dataset):
        _, log = train(tiny_dataset.train, tiny_dataset.ontology, FAST, hasher=TINY_HASHER, embed_dim=16)
        assert log.epochs[-1]["mean_loss"] < log.epochs[0]["mean_loss"]

    def test_does_not_mutate_start_params(self, tiny_dataset):
        start = init_params(TINY_HASHER, 16, seed=1)
        before = start.projection.copy()
        train(tiny_dataset.train, tiny_dataset.ontology, FAST, params=start)
        assert np.array_equal(start.projection, before)

    def test_no_hard_negatives_logged(self, tiny_dataset):
        cfg = replace(FAST, hard_negatives_p=0)
        _, log = train(tiny_dataset.train, tiny_dataset.ontology, cfg, hasher=TINY_HASHER, embed_dim=16)
        assert not log.dhns_enabled
        assert any("disabled" in w for w in log.warnings)

    def test_ablation_path_is_plain_p0_training(self, tiny_dataset):
        cfg = replace(FAST, hard_negatives_p=0)
        direct, _ = train(tiny_dataset.train, tiny_dataset.ontology, cfg, tiny_dataset.validation,
                          hasher=TINY_HASHER, embed_dim=16)
        via = fit(tiny_dataset, cfg, TINY_HASHER, 16)
        assert np.array_equal(direct.projection, via.params.projection)

    def test_dhns_invariants_hold(self, tiny_dataset):
        _, log = train(tiny_dataset.train, tiny_dataset.ontology, replace(FAST, hard_negatives_p=6),
                       hasher=TINY_HASHER, embed_dim=16)
        assert log.dhns_violations == 0

    def test_small_ontology_caps_hard_negatives(self):
        onto = Ontology([EntityRecord("A", "alpha"), EntityRecord("B", "beta"), EntityRecord("C", "gamma")])
        data = [Mention("alpha", "A"), Mention("beta", "B"), Mention("gama", "C")]
        _, log = train(data, onto, replace(FAST, hard_negatives_p=5), hasher=TINY_HASHER, embed_dim=8)
        assert log.dhns_violations == 0

    def test_empty_validation_disables_early_stop(self, tiny_dataset):
        _, log = train(tiny_dataset.train, tiny_dataset.ontology, replace(FAST, epochs=2),
                       validation=[], hasher=TINY_HASHER, embed_dim=16)
        assert len(log.epochs) == 2 and any("early stopping disabled" in w for w in log.warnings)

    def test_early_stopping(self, tiny_dataset):
        cfg = replace(FAST, epochs=20, early_stop_patience=1, learning_rate=1e-2)
        _, log = train(tiny_dataset.train, tiny_dataset.ontology, cfg, tiny_dataset.validation,
                       hasher=TINY_HASHER, embed_dim=16)
        assert len(log.epochs) < 20
        accs = [e["val_acc1"] for e in log.epochs]
        assert log.best_epoch == 1 + accs.index(max(accs))

    def test_frozen_rejected(self, tiny_dataset):
        table = FrozenTable({"x": np.ones(3)})
        with pytest.raises(UnsupportedModeError):
            train(tiny_dataset.train, tiny_dataset.ontology, FAST, params=frozen_params(table))

    def test_unknown_gold(self, tiny_dataset):
        with pytest.raises(InvalidInputError):
            train([Mention("x", "nope")], tiny_dataset.ontology, FAST)

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            TrainConfig(tau=0)
        with pytest.raises(InvalidInputError):
            TrainConfig(batch_size=1, hard_negatives_p=0)
