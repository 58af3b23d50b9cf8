import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adapt.aggregation import topj_indices
from adapt.cohort import GRADES
from adapt.errors import ConfigError, DomainError
from adapt.metrics import evaluate
from adapt.model import forward
from adapt.stage3 import (
    ClassAttentionStats,
    Stage3Config,
    class_attention_stats,
    class_loss,
    classwise_loss,
    lemma1_check,
    loss_and_grad,
    prototype_importance,
    train_stage3,
    verify_lemma1,
    verify_lemma2,
    wsi_attention_vector,
)

unit = st.floats(0, 1)


def stats(mu_pos, mu_neg, w, grade=3):
    return ClassAttentionStats(grade, np.asarray(mu_pos, float), np.asarray(mu_neg, float), w, 1, 1)


class TestAttentionVector:
    def test_constant_attention(self):
        a = np.tile([0.1, 0.7, 0.3, 0.9], (5, 1))
        v = wsi_attention_vector(a, np.linspace(0, 1, 5), np.array([1, 3]), 3)
        assert v == pytest.approx([0.7, 0.9], rel=1e-15)

    def test_j_one_takes_most_confident_patch(self):
        a = np.arange(12.0).reshape(4, 3) / 12
        v = wsi_attention_vector(a, np.array([0.2, 0.9, 0.1, 0.5]), np.array([0, 2]), 1)
        assert v.tolist() == a[1, [0, 2]].tolist()

    def test_bruteforce_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, p = rng.random((6, 8)), rng.random(6)
            idx = np.sort(rng.choice(8, 3, replace=False))
            order = sorted(range(6), key=lambda i: -p[i])[:3]
            expected = [sum(a[i, k] for i in order) / 3 for k in idx]
            assert wsi_attention_vector(a, p, idx, 3) == pytest.approx(expected, rel=1e-14)

    def test_empty_bag(self):
        with pytest.raises(DomainError):
            wsi_attention_vector(np.zeros((0, 4)), np.zeros(0), np.array([0]), 3)


class TestClasswiseLoss:
    def test_worked_example(self):
        assert class_loss(stats([1, 0], [0, 1], 0.5), 1.0, 0.3) == pytest.approx(0.15, abs=1e-15)

    @given(arrays(float, 3, elements=unit), unit)
    def test_no_negative_activity(self, mu_pos, w):
        assert class_loss(stats(mu_pos, np.zeros(3), w), 1.0, 0.3) == 0.0

    @given(st.floats(0.01, 5), st.floats(0.01, 5))
    def test_disjoint_supports_ignore_positive_magnitude(self, x, y):
        a = class_loss(stats([x, 0, 0], [0, 0.4, 0.2], 0.5), 1.0, 0.3)
        b = class_loss(stats([y, 0, 0], [0, 0.4, 0.2], 0.5), 1.0, 0.3)
        assert a == b

    @given(arrays(float, 4, elements=unit), arrays(float, 4, elements=unit), unit, st.floats(0.01, 3), st.floats(0.01, 3))
    def test_nonnegative(self, mp, mn, w, alpha, beta):
        assert class_loss(stats(mp, mn, w), alpha, beta) >= 0.0

    def test_average_over_grades(self):
        s = [stats([1, 0], [0, 1], 0.5, g) for g in GRADES]
        s[2] = stats([1, 0], [0, 0], 0.5, 5)
        per, total = classwise_loss(s, Stage3Config(alpha=1.0, beta=0.3))
        assert per == pytest.approx({3: 0.15, 4: 0.15, 5: 0.0})
        assert total == pytest.approx(0.1)

    def test_stats_with_one_sided_batch(self):
        s = class_attention_stats(np.array([[0.2, 0.4], [0.6, 0.8]]), np.array([1, 1]), 4)
        assert s.mu_pos.tolist() == pytest.approx([0.4, 0.6])
        assert s.mu_neg.tolist() == [0.0, 0.0] and s.w == 1.0 and s.n_neg == 0

    def test_config_ranges(self):
        for bad in (dict(alpha=0), dict(beta=-1), dict(j=0), dict(lr=-1), dict(threshold=0.0)):
            with pytest.raises(ConfigError):
                Stage3Config(**bad).validate()


class TestLemmas:
    def test_lemma1_worked_example(self):
        s = stats([0.4, 0], [0.3, 0.2], 0.5)
        eps = class_loss(s, 1.0, 0.3)
        res = lemma1_check(s, eps, 1.0)
        assert eps == pytest.approx(0.135, abs=1e-15)
        assert res["inner"] == pytest.approx(0.12, abs=1e-15)
        assert res["bound"] == pytest.approx(0.27, abs=1e-15)
        assert res["holds"] and res["overlap"] == 1

    def test_lemma1_zero_negative(self):
        res = lemma1_check(stats([0.9, 0.9], [0, 0], 0.5), 0.0, 1.0)
        assert res["inner"] == 0.0 and res["holds"] and res["overlap"] == 0

    def test_lemma1_skipped_without_positives(self):
        res = lemma1_check(stats([0, 0], [0.4, 0.4], 0.0), 0.0, 1.0)
        assert res["skipped"] and res["holds"] is None

    @given(arrays(float, 4, elements=unit), arrays(float, 4, elements=unit), st.floats(0.01, 1), st.floats(0.1, 3), st.floats(0.01, 3))
    def test_lemma1_bound_always_holds(self, mp, mn, w, alpha, beta):
        s = stats(mp, mn, w)
        assert lemma1_check(s, class_loss(s, alpha, beta), alpha)["holds"]

    def test_lemma2_worked_example(self):
        res = verify_lemma2(stats([0.5, 0.5], [0.2, 0.7], 0.25), Stage3Config(beta=0.4))
        assert res["passed"] and len(res["checks"]) == 6
        for row in res["checks"]:
            assert row["derivative"] == pytest.approx(0.1, abs=1e-9)

    def test_lemma2_zero_weight(self):
        res = verify_lemma2(stats([0, 0], [0.2, 0.7], 0.0), Stage3Config(beta=0.4))
        assert res["passed"] and all(r["derivative"] == 0.0 for r in res["checks"])

    def test_lemma2_magnitude_independent(self):
        res = verify_lemma2(stats([0.5], [0.3], 0.5), Stage3Config(beta=0.3))
        d = {r["magnitude"]: r["derivative"] for r in res["checks"]}
        assert d[1e-6] == pytest.approx(d[0.5], abs=1e-9)

    def test_lemma2_vacuous(self):
        res = verify_lemma2(stats([0.5], [0.0], 0.5), Stage3Config())
        assert res["vacuous"] and res["passed"]

    def test_lemma1_on_trained_batches(self, trained):
        res = verify_lemma1(trained["models"][3], trained["split"].train, Stage3Config())
        assert res["checked"] > 0 and res["holds"]
        assert trained["reports"][3].summary["lemma1_violations"] == 0


class TestImportance:
    def test_untrained_attention_is_half_everywhere(self, trained):
        model = trained["models"][2].copy()
        model.stage = 3
        imp = prototype_importance(model, trained["split"].train)
        for g in GRADES:
            ids = [k for k, _ in imp[g].ranking]
            assert all(s == 0.5 for _, s in imp[g].ranking)
            assert ids == sorted(ids) and ids == np.flatnonzero(model.class_of == g).tolist()

    def test_single_bag_reproduces_its_vector(self, trained):
        model = trained["models"][3]
        bag = next(b for b in trained["split"].train if b.target[0] == 1)
        fwd = forward(model, bag.patches, attention=True)
        idx = np.flatnonzero(model.class_of == 3)
        abar = wsi_attention_vector(fwd.a, fwd.probs[:, 1], idx, 5)
        ranking = prototype_importance(model, [bag])[3].ranking
        assert [s for _, s in ranking] == pytest.approx(sorted(abar, reverse=True), rel=1e-12)
        assert prototype_importance(model, [bag])[3].n_positive == 1

    def test_matches_recomputation_from_raw_forwards(self, trained):
        model = trained["models"][3]
        bags = trained["split"].train[:10]
        imp = prototype_importance(model, bags)
        for c, g in enumerate(GRADES):
            idx = np.flatnonzero(model.class_of == g)
            vecs = []
            for b in bags:
                if b.target[c]:
                    fwd = forward(model, b.patches, attention=True)
                    top = topj_indices(fwd.probs[:, c + 1], 5)
                    vecs.append(fwd.a[np.ix_(top, idx)].mean(axis=0))
            if not vecs:
                assert imp[g].empty
                continue
            want = dict(zip(idx.tolist(), np.mean(vecs, axis=0)))
            got = dict(imp[g].ranking)
            assert got == pytest.approx(want, rel=1e-12)
            assert all(0 <= s <= 1 for s in got.values())

    def test_no_positive_bags(self, trained):
        bags = [b for b in trained["split"].train if not b.target[2]][:3]
        assert prototype_importance(trained["models"][3], bags)[5].empty


class TestTraining:
    def cfg(self, **kw):
        return Stage3Config(**{**dict(epochs=3, lr=3e-3), **kw})

    def test_zero_lr_matches_stage2(self, trained):
        split, m2 = trained["split"], trained["models"][2]
        m3, _ = train_stage3(split.train, split.val, m2, self.cfg(lr=0.0), 0)
        assert evaluate(m3, split.test) == evaluate(m2, split.test)

    def test_only_attention_and_head_move(self, trained):
        m2, m3 = trained["models"][2], trained["models"][3]
        for name in m2.params.names:
            if name.startswith(("encoder", "prototypes")):
                assert m3.params[name].tobytes() == m2.params[name].tobytes()
        assert m3.provenance == m2.provenance and m3.stage == 3

    def test_deterministic(self, trained):
        split, m2 = trained["split"], trained["models"][2]
        a, ra = train_stage3(split.train, split.val, m2, self.cfg(), 4)
        b, rb = train_stage3(split.train, split.val, m2, self.cfg(), 4)
        assert a.params == b.params and ra.to_csv() == rb.to_csv()

    def test_attention_loss_switch(self, trained):
        bags = trained["split"].train[:8]
        model = trained["models"][3]
        full, _ = loss_and_grad(model, bags, self.cfg())
        plain, _ = loss_and_grad(model, bags, self.cfg(use_attention_loss=False))
        assert plain.total == plain.bce == full.bce and full.attn >= 0

    def test_requires_stage2_model(self, trained):
        split = trained["split"]
        with pytest.raises(ConfigError):
            train_stage3(split.train, split.val, trained["models"][1], self.cfg(), 0)
