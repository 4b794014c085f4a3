"""Trainer behaviour: objective wiring, gradient flow, determinism,
evaluation semantics, and the baseline protocols.

Everything here runs on a micro architecture (two 3x3 convs on 8x8
inputs) so the whole file finishes in seconds.
"""

import numpy as np
import pytest

from netagg import tensor as T
from netagg.aggregation import get_op
from netagg.data import LabeledDataset
from netagg.errors import ConfigError, DataError
from netagg.models import Model, ModelSpec, build_bundle, forward_graph, lift
from netagg.training import (
    TrainConfig,
    baseline_train,
    compute_objective,
    evaluate,
    evaluate_by_source,
    joint_train,
)

MICRO = ModelSpec(
    name="micro",
    conv_blocks=((4, 1), (4, 1)),
    gn_groups=2,
    head_dims=(8,),
    num_classes=10,
    input_shape=(1, 8, 8),
)


def tiny_dataset(seed: int, per_class: int = 3, name: str = "tiny") -> LabeledDataset:
    """Balanced 10-class dataset with a learnable brightness cue."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10), per_class)
    rng.shuffle(labels)
    m = len(labels)
    images = rng.uniform(0.0, 0.25, size=(m, 1, 8, 8)).astype(np.float32)
    images += (labels / 14.0).astype(np.float32)[:, None, None, None]
    return LabeledDataset(np.clip(images, 0, 1), labels.astype(np.int64), name=name)


def micro_config(**kw) -> TrainConfig:
    base = dict(
        n=2,
        preset="vgg-lite",  # overridden by passing MICRO explicitly
        lr=0.05,
        epochs=2,
        batch_size=10,
        lambda_agg=1.0,
        seed=3,
        mode="joint",
        augment_hflip=False,
        val_frac=0.1,
    )
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# config validation


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(n=0)
        with pytest.raises(ConfigError):
            TrainConfig(mode="magic")
        with pytest.raises(ConfigError):
            TrainConfig(val_frac=1.0)

    def test_mode_routing(self):
        ds = [tiny_dataset(0), tiny_dataset(1)]
        with pytest.raises(ConfigError):
            joint_train(micro_config(mode="baseline-separate"), ds, spec=MICRO)
        with pytest.raises(ConfigError):
            baseline_train(micro_config(mode="joint"), ds, spec=MICRO)

    def test_dataset_count_mismatch(self):
        with pytest.raises(DataError):
            joint_train(micro_config(n=2), [tiny_dataset(0)], spec=MICRO)

    def test_class_count_mismatch(self):
        bad = tiny_dataset(1)
        bad = LabeledDataset(bad.images, bad.labels % 5, name=bad.name, num_classes=5)
        with pytest.raises(DataError):
            joint_train(micro_config(), [tiny_dataset(0), bad], spec=MICRO)


# ---------------------------------------------------------------------------
# zero-epoch runs leave the initialisation untouched


class TestZeroEpochs:
    def test_joint_noop_is_bit_identical_to_init(self):
        cfg = micro_config(epochs=0)
        bundle = joint_train(cfg, [tiny_dataset(0), tiny_dataset(1)], spec=MICRO)
        exts, star, head = build_bundle(MICRO, cfg.n, cfg.seed)
        for got, want in zip(bundle.extractors, exts):
            for k in want.keys():
                assert np.array_equal(got[k], want[k])
        for k in star.keys():
            assert np.array_equal(bundle.star[k], star[k])
        for k in head.keys():
            assert np.array_equal(bundle.head[k], head[k])
        assert bundle.history == []

    def test_baseline_noop_history_empty(self):
        cfg = micro_config(epochs=0, mode="baseline-separate")
        bundle = baseline_train(cfg, [tiny_dataset(0), tiny_dataset(1)], spec=MICRO)
        assert bundle.history == []
        assert len(bundle.extractors) == 2 and len(bundle.heads) == 2


# ---------------------------------------------------------------------------
# objective structure and gradient flow


def _lift_bundle(seed=7, n=2):
    exts, star, head = build_bundle(MICRO, n, seed)
    return [lift(e) for e in exts], lift(star), lift(head), exts[0].aggregable_keys()


def _micro_batches(seed, bs=6, n=2):
    rng = np.random.default_rng(seed)
    mk = lambda: (
        rng.uniform(0, 1, size=(bs, 1, 8, 8)).astype(np.float32),
        rng.integers(0, 10, size=bs),
    )
    return [mk() for _ in range(n)], mk()


class TestObjective:
    def test_parts_breakdown_sums_to_total(self):
        ext_t, star_t, head_t, keys = _lift_bundle()
        batches, ub = _micro_batches(0)
        lam = 0.5
        total, parts = compute_objective(MICRO, ext_t, star_t, head_t, batches, ub, lam, get_op("sum"), keys)
        expect = parts["N1"] + parts["N2"] + parts["Nstar"] + lam * parts["agg"]
        assert abs(parts["total"] - expect) < 1e-5
        assert abs(total.item() - parts["total"]) < 1e-12

    def test_lambda_zero_drops_regulariser(self):
        ext_t, star_t, head_t, keys = _lift_bundle()
        batches, ub = _micro_batches(1)
        _, p0 = compute_objective(MICRO, ext_t, star_t, head_t, batches, ub, 0.0, get_op("sum"), keys)
        assert abs(p0["total"] - (p0["N1"] + p0["N2"] + p0["Nstar"])) < 1e-5
        assert p0["agg"] > 0.0  # still reported, just unweighted

    def test_shared_head_receives_gradient_from_single_branch(self):
        """Forward only dataset 1: its extractor and the head get gradients,
        the other extractor and the aggregated extractor stay untouched."""
        ext_t, star_t, head_t, _ = _lift_bundle()
        (xb, yb), _ = _micro_batches(2)[0][0], None
        logits = forward_graph(MICRO, ext_t[0], head_t, T.Tensor(xb))
        loss = T.softmax_cross_entropy(logits, yb)
        loss.backward()
        assert any(t.grad is not None and np.any(t.grad != 0) for t in head_t.values())
        assert any(t.grad is not None and np.any(t.grad != 0) for t in ext_t[0].values())
        assert all(t.grad is None for t in ext_t[1].values())
        assert all(t.grad is None for t in star_t.values())

    def test_regulariser_couples_star_to_extractors(self):
        """With lambda > 0 every aggregable tensor of every extractor gets a
        gradient even though only the aggregated model saw the union batch."""
        ext_t, star_t, head_t, keys = _lift_bundle()
        batches, ub = _micro_batches(3)
        total, _ = compute_objective(MICRO, ext_t, star_t, head_t, batches, ub, 1.0, get_op("sum"), keys)
        total.backward()
        for td in [*ext_t, star_t]:
            for k in keys:
                assert td[k].grad is not None and np.any(td[k].grad != 0)

    def test_objective_gradcheck_spot(self):
        """Central-difference check of the full objective on a few random
        coordinates of every parameter group (the exhaustive version lives
        in the acceptance suite)."""
        ext_t, star_t, head_t, keys = _lift_bundle(seed=11)
        all_t = {f"e{i}.{k}": t for i, td in enumerate(ext_t) for k, t in td.items()}
        all_t |= {f"s.{k}": t for k, t in star_t.items()}
        all_t |= {f"h.{k}": t for k, t in head_t.items()}
        for t in all_t.values():
            t.data = t.data.astype(np.float64)
        batches, ub = _micro_batches(4)

        def objective():
            total, _ = compute_objective(MICRO, ext_t, star_t, head_t, batches, ub, 0.7, get_op("sum"), keys)
            return total

        objective().backward()
        grads = {k: t.grad.copy() for k, t in all_t.items()}
        rng = np.random.default_rng(99)
        h = 1e-5
        for name in rng.choice(sorted(all_t), size=8, replace=False):
            t = all_t[name]
            flat = t.data.reshape(-1)
            j = int(rng.integers(flat.size))
            keep = flat[j]
            flat[j] = keep + h
            up = objective().item()
            flat[j] = keep - h
            dn = objective().item()
            flat[j] = keep
            fd = (up - dn) / (2 * h)
            ana = grads[name].reshape(-1)[j]
            assert abs(fd - ana) <= 1e-2 * max(abs(fd), abs(ana), 1e-4), name


# ---------------------------------------------------------------------------
# joint training dynamics


class TestJointTrain:
    def test_determinism(self):
        ds = [tiny_dataset(0), tiny_dataset(1)]
        cfg = micro_config(epochs=2)
        b1 = joint_train(cfg, ds, spec=MICRO)
        b2 = joint_train(cfg, ds, spec=MICRO)
        for e1, e2 in zip(b1.extractors, b2.extractors):
            for k in e1.keys():
                assert np.allclose(e1[k], e2[k], rtol=0, atol=1e-6)
        for k in b1.star.keys():
            assert np.allclose(b1.star[k], b2.star[k], rtol=0, atol=1e-6)
        assert b1.history[-1].loss_total == pytest.approx(b2.history[-1].loss_total, abs=1e-9)

    def test_losses_decrease_and_regulariser_shrinks(self):
        ds = [tiny_dataset(0, per_class=6), tiny_dataset(1, per_class=6)]
        cfg = micro_config(epochs=6, lr=0.05)
        bundle = joint_train(cfg, ds, spec=MICRO)
        first, last = bundle.history[0], bundle.history[-1]
        assert last.loss_total < first.loss_total
        assert last.loss_agg < first.loss_agg

    def test_history_schema(self):
        ds = [tiny_dataset(0), tiny_dataset(1)]
        bundle = joint_train(micro_config(epochs=1), ds, spec=MICRO)
        rec = bundle.history[0]
        assert rec.epoch == 0
        assert set(rec.accuracy) == {"N1", "N2", "Nstar"}
        assert set(rec.accuracy["N1"]) == {"train", "val"}
        assert set(rec.loss_task) == {"N1", "N2", "Nstar"}
        assert rec.loss_agg >= 0.0

    def test_bundle_model_accessors(self):
        ds = [tiny_dataset(0), tiny_dataset(1)]
        bundle = joint_train(micro_config(epochs=1), ds, spec=MICRO)
        for which in ("N1", "N2", "Nstar"):
            m = bundle.model(which)
            assert m.forward(ds[0].images[:4]).shape == (4, 10)
        # joint mode: every model shares the same head object
        assert bundle.model("N1").head is bundle.model("Nstar").head


# ---------------------------------------------------------------------------
# baseline protocols


class TestBaselineTrain:
    def test_separate_models_are_independent(self):
        ds = [tiny_dataset(0), tiny_dataset(1)]
        bundle = baseline_train(micro_config(epochs=1, mode="baseline-separate"), ds, spec=MICRO)
        assert bundle.star is None and bundle.head is None
        assert len(bundle.heads) == 2
        # different initialisations and different data: heads must differ
        assert not np.array_equal(bundle.heads[0]["fc0.weight"], bundle.heads[1]["fc0.weight"])
        rec = bundle.history[0]
        assert set(rec.accuracy) == {"N1", "N2"}
        assert rec.loss_agg == 0.0

    def test_star_trains_on_union(self):
        ds = [tiny_dataset(0), tiny_dataset(1)]
        bundle = baseline_train(micro_config(epochs=1, mode="baseline-star"), ds, spec=MICRO)
        assert bundle.star is not None and bundle.star_head is not None
        assert bundle.model("Nstar").forward(ds[0].images[:2]).shape == (2, 10)
        with pytest.raises(ConfigError):
            bundle.model("N1")

    def test_baseline_determinism(self):
        ds = [tiny_dataset(0), tiny_dataset(1)]
        cfg = micro_config(epochs=1, mode="baseline-separate")
        b1 = baseline_train(cfg, ds, spec=MICRO)
        b2 = baseline_train(cfg, ds, spec=MICRO)
        for e1, e2 in zip(b1.extractors, b2.extractors):
            for k in e1.keys():
                assert np.allclose(e1[k], e2[k], rtol=0, atol=1e-6)


# ---------------------------------------------------------------------------
# evaluation


class _PerfectStub:
    """Forwards to one-hot logits by reading the label encoded in pixel
    (0, 0, 0); lets us pin evaluate() at exactly 1.0."""

    def forward(self, batch):
        labels = np.round(batch[:, 0, 0, 0] * 9).astype(int)
        out = np.full((len(batch), 10), -1.0, dtype=np.float32)
        out[np.arange(len(batch)), labels] = 1.0
        return out


class TestEvaluate:
    def test_untrained_model_near_chance(self):
        ds = tiny_dataset(5, per_class=20)
        exts, star, head = build_bundle(MICRO, 1, seed=0)
        acc = evaluate(Model(MICRO, exts[0], head), ds)
        assert 0.05 <= acc <= 0.15

    def test_perfect_stub_scores_one(self):
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(10), 4)
        images = np.zeros((40, 1, 8, 8), np.float32)
        images[:, 0, 0, 0] = labels / 9.0
        ds = LabeledDataset(images, labels.astype(np.int64), name="stub")
        assert evaluate(_PerfectStub(), ds) == 1.0

    def test_batch_size_invariance(self):
        ds = tiny_dataset(6, per_class=5)
        exts, _, head = build_bundle(MICRO, 1, seed=1)
        m = Model(MICRO, exts[0], head)
        assert evaluate(m, ds, batch_size=7) == evaluate(m, ds, batch_size=128)

    def test_empty_dataset_rejected(self):
        ds = LabeledDataset(np.zeros((0, 1, 8, 8), np.float32), np.zeros(0, np.int64), name="empty")
        exts, _, head = build_bundle(MICRO, 1, seed=1)
        with pytest.raises(DataError):
            evaluate(Model(MICRO, exts[0], head), ds)

    def test_by_source_matches_direct(self):
        from netagg.data import union

        a, b = tiny_dataset(7, name="a"), tiny_dataset(8, name="b")
        combined = union(a, b)
        exts, _, head = build_bundle(MICRO, 1, seed=2)
        m = Model(MICRO, exts[0], head)
        per = evaluate_by_source(m, combined)
        assert per[0] == evaluate(m, a)
        assert per[1] == evaluate(m, b)

    def test_by_source_requires_provenance(self):
        ds = tiny_dataset(9)
        exts, _, head = build_bundle(MICRO, 1, seed=2)
        with pytest.raises(DataError):
            evaluate_by_source(Model(MICRO, exts[0], head), ds)
