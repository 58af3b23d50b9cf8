import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adapt.aggregation import aggregate_topj, pool, stack_bags, topj_indices
from adapt.errors import ConfigError, DomainError
from adapt.metrics import evaluate
from adapt.stage2 import (
    Stage2Config,
    WsiForward,
    alignment_loss,
    bag_forwards,
    bce,
    loss_and_grad,
    repulsion_loss,
    train_stage2,
    wsi_loss,
)

probs = arrays(float, st.integers(1, 64), elements=st.floats(0, 1))


def sort_oracle(p, j):
    """Average of the first min(j, l) entries of a descending sort."""
    return sum(sorted(p, reverse=True)[: min(j, len(p))]) / min(j, len(p))


def wsi(grade_probs, md=None, j=5):
    """A hand-built bag forward from per-grade patch probabilities ``(l, 3)``."""
    grade_probs = np.asarray(grade_probs, dtype=float)
    l = grade_probs.shape[0]
    patch = np.zeros((l, 4))
    patch[:, 1:] = grade_probs
    md = np.zeros((l, 4)) if md is None else np.asarray(md, dtype=float)
    top = tuple(topj_indices(grade_probs[:, c], j) for c in range(3))
    b = np.array([grade_probs[t, c].mean() for c, t in enumerate(top)])
    return WsiForward(patch, b, top, md, np.zeros((l, 4), dtype=np.int64))


class TestTopJ:
    def test_worked_example(self):
        assert aggregate_topj([0.9, 0.2, 0.8, 0.7, 0.1], 3) == pytest.approx(0.8, abs=1e-15)

    @given(probs)
    def test_j_equal_l_is_the_mean(self, p):
        assert aggregate_topj(p, p.size) == pytest.approx(p.mean(), abs=1e-12)

    @given(st.floats(0, 1), st.integers(1, 20), st.integers(1, 10))
    def test_constant(self, v, l, j):
        assert aggregate_topj(np.full(l, v), j) == pytest.approx(v, abs=1e-15)

    def test_matches_sort_oracle_on_1000_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            l = int(rng.integers(1, 65))
            p = rng.random(l)
            if rng.random() < 0.3:  # plant ties
                p = np.round(p, 1)
            j = int(rng.integers(1, 9))
            assert aggregate_topj(p, j) == pytest.approx(sort_oracle(list(p), j), rel=1e-14, abs=0)

    def test_ties_go_to_lower_index(self):
        assert topj_indices([0.5, 0.7, 0.5, 0.7, 0.5], 3).tolist() == [1, 3, 0]

    def test_j_larger_than_l(self):
        assert aggregate_topj([0.2, 0.4], 5) == pytest.approx(0.3)

    def test_errors(self):
        with pytest.raises(DomainError):
            aggregate_topj([], 3)
        with pytest.raises(DomainError):
            aggregate_topj([0.1], 0)
        with pytest.raises(DomainError):
            stack_bags([])

    def test_pool_matches_per_bag_aggregation(self):
        rng = np.random.default_rng(1)
        p = rng.random((11, 4))
        offsets = np.array([0, 3, 4, 11])
        b = pool(p, offsets, 5)
        for n in range(3):
            for c in range(3):
                assert b[n, c] == aggregate_topj(p[offsets[n] : offsets[n + 1], c + 1], 5)


class TestAlignment:
    def test_no_missed_grades(self):
        w = wsi([[0.9, 0.1, 0.1]] * 3)
        assert alignment_loss([w], np.array([[1, 0, 0]])) == 0.0

    def test_best_patch_on_prototype(self):
        md = [[0, 2.0, 0, 0], [0, 0.0, 0, 0]]
        w = wsi([[0.1, 0, 0], [0.3, 0, 0]], md)
        assert alignment_loss([w], np.array([[1, 0, 0]])) == 0.0

    def test_two_missed_bags_average(self):
        # missed grade 4 in both bags; best patches sit at distance 4 and 6
        a = wsi([[0, 0.2, 0], [0, 0.3, 0]], [[0, 0, 9.0, 0], [0, 0, 4.0, 0]])
        b = wsi([[0, 0.4, 0], [0, 0.1, 0]], [[0, 0, 6.0, 0], [0, 0, 1.0, 0]])
        assert alignment_loss([a, b], np.array([[0, 1, 0], [0, 1, 0]])) == pytest.approx(5.0)

    def test_threshold_is_strict(self):
        w = wsi([[0.5, 0, 0]], [[0, 3.0, 0, 0]])
        assert alignment_loss([w], np.array([[1, 0, 0]])) == 0.0


class TestRepulsion:
    def test_no_spurious_grades(self):
        w = wsi([[0.1, 0.1, 0.9]])
        assert repulsion_loss([w], np.array([[0, 0, 1]])) == 0.0

    def test_single_offending_patch(self):
        w = wsi([[0.9, 0, 0], [0.2, 0, 0]], [[0, 3.0, 0, 0], [0, 1.0, 0, 0]], j=1)
        assert repulsion_loss([w], np.array([[0, 1, 0]])) == pytest.approx(-3.0)

    @given(arrays(float, 4, elements=st.floats(0.01, 10)))
    def test_homogeneous_in_distances(self, d):
        grade = [[0.9, 0, 0], [0.8, 0, 0], [0.7, 0, 0], [0.1, 0, 0]]
        md = np.zeros((4, 4))
        md[:, 1] = d
        y = np.array([[0, 0, 1]])
        one = repulsion_loss([wsi(grade, md, j=2)], y)
        two = repulsion_loss([wsi(grade, 2 * md, j=2)], y)
        assert one <= 0 and two == pytest.approx(2 * one, rel=1e-12)

    def test_event_without_offending_patch_counts_but_adds_nothing(self):
        # bag 0: b = 0.55 but no single patch above 0.5; bag 1: one offender at distance 2
        a = wsi([[0.5, 0, 0], [0.6, 0, 0], [0.55, 0, 0]], j=3)
        a.patch_probs[:, 1] = [0.5, 0.5, 0.5]
        a = WsiForward(a.patch_probs, np.array([0.55, 0.0, 0.0]), a.topj, a.class_md, a.class_arg)
        b = wsi([[0.9, 0, 0], [0.2, 0, 0]], [[0, 2.0, 0, 0], [0, 7.0, 0, 0]], j=1)
        assert repulsion_loss([a, b], np.array([[0, 1, 0], [0, 1, 0]])) == pytest.approx(-1.0)


class TestWsiLoss:
    def test_perfect_predictions(self):
        w = WsiForward(np.zeros((1, 4)), np.array([1.0, 0.0, 1.0]), tuple(np.array([0]) for _ in range(3)), np.zeros((1, 4)), np.zeros((1, 4), int))
        parts = wsi_loss([w], np.array([[1, 0, 1]]), Stage2Config())
        # only the 1e-12 probability clamp remains
        assert parts.total == pytest.approx(0.0, abs=1e-11) and parts.n_fn == parts.n_fp == 0

    @given(st.lists(st.sampled_from([0, 1]), min_size=3, max_size=3))
    def test_half_probabilities_give_ln2(self, y):
        w = wsi([[0.5, 0.5, 0.5]] * 2)
        parts = wsi_loss([w], np.array([y]), Stage2Config())
        assert parts.total == pytest.approx(math.log(2), abs=1e-15)
        assert parts.align == parts.repel == 0.0

    def test_bce_clamp(self):
        loss, grad = bce(np.array([[0.0, 1.0, 0.3]]), np.array([[1, 0, 0]]))
        assert loss == pytest.approx((2 * -math.log(1e-12) - math.log(0.7)) / 3)
        assert grad[0, 0] == grad[0, 1] == 0.0 and grad[0, 2] != 0.0

    def test_config_ranges(self):
        for bad in (dict(j=2), dict(j=8), dict(threshold=1.0), dict(lambda_align=-1)):
            with pytest.raises(ConfigError):
                Stage2Config(**bad).validate()


class TestTraining:
    def cfg(self, **kw):
        return Stage2Config(**{**dict(epochs=3, lr=1e-3), **kw})

    def test_zero_weights_leave_plain_bce(self, trained):
        _, report = train_stage2(trained["split"].train, trained["split"].val, trained["models"][1], self.cfg(lambda_align=0.0, lambda_repel=0.0), 0)
        for row in report.rows[1:]:
            assert row["total"] == row["bce"]

    def test_zero_lr_reproduces_the_stage1_baseline(self, trained):
        m1 = trained["models"][1]
        split = trained["split"]
        m2, _ = train_stage2(split.train, split.val, m1, self.cfg(lr=0.0), 0)
        assert m2.params == m1.params
        assert evaluate(m2, split.test) == evaluate(m1, split.test)

    def test_prototypes_frozen_by_default_and_trainable_on_request(self, trained):
        m1 = trained["models"][1]
        split = trained["split"]
        frozen, _ = train_stage2(split.train, split.val, m1, self.cfg(), 0)
        assert frozen.params["prototypes"].tobytes() == m1.params["prototypes"].tobytes()
        assert frozen.provenance == m1.provenance
        _, grads = loss_and_grad(m1, split.train[:8], self.cfg(threshold=0.9), wrt=("encoder", "fc", "prototypes"))
        assert np.any(grads["prototypes"] != 0)

    def test_deterministic(self, trained):
        split, m1 = trained["split"], trained["models"][1]
        a, ra = train_stage2(split.train, split.val, m1, self.cfg(), 5)
        b, rb = train_stage2(split.train, split.val, m1, self.cfg(), 5)
        assert a.params == b.params and ra.to_csv() == rb.to_csv()
        assert ra.columns == ["epoch", "bce", "align", "repel", "total", "val_f1_macro", "val_hamming"]

    def test_patch_labels_are_not_used(self, trained):
        split, m1 = trained["split"], trained["models"][1]
        a, _ = train_stage2(split.train, split.val, m1, self.cfg(), 1)
        b, _ = train_stage2([x.stripped() for x in split.train], [x.stripped() for x in split.val], m1, self.cfg(), 1)
        assert a.params == b.params

    def test_requires_stage1_model(self, trained, small_cfg):
        from adapt.model import init_model

        with pytest.raises(ConfigError):
            train_stage2(trained["split"].train, trained["split"].val, init_model(small_cfg.model_config(), 0), self.cfg(), 0)

    def test_bag_forwards_shapes(self, trained):
        bags = trained["split"].test[:3]
        fwd, offsets, wsis = bag_forwards(trained["models"][2], bags, 5)
        assert offsets.tolist() == [0, 12, 24, 36]
        for w in wsis:
            assert w.patch_probs.shape == (12, 4) and np.all((w.bag_probs >= 0) & (w.bag_probs <= 1))
            assert all(t.size == 5 and np.unique(t).size == 5 for t in w.topj)
