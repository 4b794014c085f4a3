"""Joint optimisation of the task losses plus the merge regulariser,
and the independent-training baseline protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .aggregation import AggregationOp, aggregation_loss, get_op
from .data import LabeledDataset, augment_hflip, split_train_val, union
from .errors import ConfigError, DataError, NumericsError
from .models import Model, ModelSpec, build_bundle, forward_graph, get_preset, init_extractor, init_head, lift
from .params import ParamSet

__all__ = [
    "TrainConfig",
    "MetricsRecord",
    "TrainedBundle",
    "joint_train",
    "baseline_train",
    "evaluate",
    "evaluate_by_source",
    "compute_objective",
]

MODES = ("joint", "baseline-separate", "baseline-star")


@dataclass(frozen=True)
class TrainConfig:
    n: int = 2
    preset: str = "vgg-lite"
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 100
    lambda_agg: float = 1.0
    seed: int = 0
    mode: str = "joint"
    agg_op: str = "sum"
    augment_hflip: bool = True
    val_frac: float = 0.1
    # cap for per-epoch train-accuracy evaluation; None = full train set
    eval_train_cap: int | None = 1000

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.val_frac < 1.0:
            raise ConfigError(f"val_frac must be in (0, 1), got {self.val_frac}")


@dataclass
class MetricsRecord:
    """One epoch of training: accuracies per model/split plus the loss split."""

    epoch: int
    accuracy: dict[str, dict[str, float]]  # model -> {"train": .., "val": ..}
    loss_task: dict[str, float]  # model -> epoch-mean task loss
    loss_agg: float
    loss_total: float


@dataclass
class TrainedBundle:
    spec: ModelSpec
    config: TrainConfig
    extractors: list[ParamSet]
    star: ParamSet | None
    head: ParamSet | None  # shared head (joint mode)
    heads: list[ParamSet] | None = None  # per-model heads (baseline-separate)
    star_head: ParamSet | None = None  # baseline-star's own head
    history: list[MetricsRecord] = field(default_factory=list)

    def model(self, which: str) -> Model:
        """Materialise one trained model; `which` is N1..Nn or Nstar."""
        if which == "Nstar":
            head = self.star_head or self.head
            if self.star is None or head is None:
                raise ConfigError("bundle has no trained aggregated model")
            return Model(self.spec, self.star, head)
        i = int(which[1:]) - 1
        head = self.heads[i] if self.heads is not None else self.head
        if head is None:
            raise ConfigError(f"bundle has no head for {which}")
        return Model(self.spec, self.extractors[i], head)


# ---------------------------------------------------------------------------
# objective


def compute_objective(
    spec: ModelSpec,
    ext_tensors: list[dict[str, T.Tensor]],
    star_tensors: dict[str, T.Tensor],
    head_tensors: dict[str, T.Tensor],
    batches: list[tuple[np.ndarray, np.ndarray]],
    union_batch: tuple[np.ndarray, np.ndarray],
    lambda_agg: float,
    op: AggregationOp,
    agg_keys: list[str],
) -> tuple[T.Tensor, dict[str, float]]:
    """Single-step objective: sum of per-dataset task losses, the
    union-batch task loss of the aggregated model, and the weighted
    merge regulariser.  Returns the scalar graph node and a float
    breakdown for logging."""
    parts: dict[str, float] = {}
    total: T.Tensor | None = None
    for i, ((xb, yb), ext) in enumerate(zip(batches, ext_tensors)):
        logits = forward_graph(spec, ext, head_tensors, T.Tensor(xb))
        li = T.softmax_cross_entropy(logits, yb)
        parts[f"N{i + 1}"] = li.item()
        total = li if total is None else T.add(total, li)
    xs, ys = union_batch
    logits = forward_graph(spec, star_tensors, head_tensors, T.Tensor(xs))
    lstar = T.softmax_cross_entropy(logits, ys)
    parts["Nstar"] = lstar.item()
    total = lstar if total is None else T.add(total, lstar)
    lagg = aggregation_loss(star_tensors, ext_tensors, agg_keys, op)
    parts["agg"] = lagg.item()
    if lambda_agg != 0.0:
        total = T.add(total, T.scale(lagg, lambda_agg))
    parts["total"] = total.item()
    return total, parts


# ---------------------------------------------------------------------------
# batching helpers


def _epoch_order(rng: np.random.Generator, m: int, steps: int, bs: int) -> np.ndarray:
    """Shuffled index stream covering steps*bs draws, recycling as needed."""
    reps = math.ceil(steps * bs / m)
    return np.concatenate([rng.permutation(m) for _ in range(reps)])[: steps * bs]


def _take_batch(ds: LabeledDataset, idx: np.ndarray, cfg: TrainConfig, epoch: int, step: int, stream: int):
    xb = ds.images[idx]
    if cfg.augment_hflip:
        rng = np.random.default_rng([cfg.seed, 7000 + stream, epoch, step])
        xb = augment_hflip(xb, rng)
    return xb, ds.labels[idx]


def _sgd_update(tensor_dicts: list[dict[str, T.Tensor]], lr: float, step: int) -> None:
    for td in tensor_dicts:
        for name, t in td.items():
            if t.grad is None:
                continue
            if not np.all(np.isfinite(t.grad)):
                raise NumericsError(f"non-finite gradient for {name} at step {step}")
            t.data -= t.grad * t.data.dtype.type(lr)
            t.grad = None


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: Model, dataset: LabeledDataset, batch_size: int = 128) -> float:
    """Fraction of correct argmax predictions; never augments."""
    if len(dataset) == 0:
        raise DataError("evaluate: empty dataset")
    correct = 0
    for lo in range(0, len(dataset), batch_size):
        hi = min(lo + batch_size, len(dataset))
        logits = model.forward(dataset.images[lo:hi])
        T.check_finite(logits, "evaluation logits")
        correct += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[lo:hi]))
    return correct / len(dataset)


def evaluate_by_source(model: Model, combined: LabeledDataset, batch_size: int = 128) -> dict[int, float]:
    """Per-source accuracy on a union dataset, via its provenance index."""
    if combined.provenance is None:
        raise DataError("evaluate_by_source: dataset has no provenance index")
    out = {}
    for src in np.unique(combined.provenance):
        out[int(src)] = evaluate(model, combined.take(np.flatnonzero(combined.provenance == src)), batch_size)
    return out


def _train_accuracy(model: Model, ds: LabeledDataset, cap: int | None, seed: int) -> float:
    if cap is None or len(ds) <= cap:
        return evaluate(model, ds)
    idx = np.random.default_rng([seed, 507]).choice(len(ds), size=cap, replace=False)
    return evaluate(model, ds.take(idx))


# ---------------------------------------------------------------------------
# joint training


def _check_datasets(config: TrainConfig, datasets: list[LabeledDataset]) -> None:
    if len(datasets) != config.n:
        raise DataError(f"expected {config.n} datasets, got {len(datasets)}")
    classes = {d.num_classes for d in datasets}
    if len(classes) != 1:
        raise DataError(f"datasets disagree on class count: {sorted(classes)}")
    shapes = {d.images.shape[1:] for d in datasets}
    if len(shapes) != 1:
        raise DataError(f"datasets disagree on image shape: {shapes}")


def joint_train(config: TrainConfig, datasets: list[LabeledDataset], spec: ModelSpec | None = None) -> TrainedBundle:
    """End-to-end training of the n dataset extractors, the aggregated
    extractor, and the single shared head, under the summed objective."""
    if config.mode != "joint":
        raise ConfigError(f"joint_train requires mode 'joint', got {config.mode!r}")
    _check_datasets(config, datasets)
    spec = spec or get_preset(config.preset)
    op = get_op(config.agg_op)

    splits = [split_train_val(d, config.val_frac, seed=config.seed) for d in datasets]
    trains = [s[0] for s in splits]
    vals = [s[1] for s in splits]
    union_train = trains[0]
    union_val = vals[0]
    for t, v in zip(trains[1:], vals[1:]):
        union_train = union(union_train, t)
        union_val = union(union_val, v)

    extractors, star, head = build_bundle(spec, config.n, config.seed)
    ext_t = [lift(e) for e in extractors]
    star_t = lift(star)
    head_t = lift(head)
    agg_keys = extractors[0].aggregable_keys()

    bs = config.batch_size
    steps = max(1, math.ceil(max(len(t) for t in trains) / bs))
    bundle = TrainedBundle(spec, config, extractors, star, head)

    for epoch in range(config.epochs):
        orders = [
            _epoch_order(np.random.default_rng([config.seed, 100 + i, epoch]), len(t), steps, bs)
            for i, t in enumerate(trains)
        ]
        star_rng = np.random.default_rng([config.seed, 99, epoch])
        task_sums = {f"N{i + 1}": 0.0 for i in range(config.n)}
        task_sums["Nstar"] = 0.0
        agg_sum = 0.0
        total_sum = 0.0
        for step in range(steps):
            batches = [
                _take_batch(trains[i], orders[i][step * bs : (step + 1) * bs], config, epoch, step, i)
                for i in range(config.n)
            ]
            star_idx = star_rng.integers(0, len(union_train), size=bs)
            union_batch = _take_batch(union_train, star_idx, config, epoch, step, 98)
            total, parts = compute_objective(
                spec, ext_t, star_t, head_t, batches, union_batch, config.lambda_agg, op, agg_keys
            )
            if not np.isfinite(parts["total"]):
                raise NumericsError(f"non-finite objective at epoch {epoch}, step {step}")
            total.backward()
            _sgd_update([*ext_t, star_t, head_t], config.lr, step)
            for k in task_sums:
                task_sums[k] += parts[k]
            agg_sum += parts["agg"]
            total_sum += parts["total"]

        accuracy = {}
        for i in range(config.n):
            m = Model(spec, extractors[i], head)
            accuracy[f"N{i + 1}"] = {
                "train": _train_accuracy(m, trains[i], config.eval_train_cap, config.seed),
                "val": evaluate(m, vals[i]),
            }
        m = Model(spec, star, head)
        accuracy["Nstar"] = {
            "train": _train_accuracy(m, union_train, config.eval_train_cap, config.seed),
            "val": evaluate(m, union_val),
        }
        bundle.history.append(
            MetricsRecord(
                epoch=epoch,
                accuracy=accuracy,
                loss_task={k: v / steps for k, v in task_sums.items()},
                loss_agg=agg_sum / steps,
                loss_total=total_sum / steps,
            )
        )
    return bundle


# ---------------------------------------------------------------------------
# baseline training


def _train_single(
    spec: ModelSpec,
    extractor: ParamSet,
    head: ParamSet,
    train_ds: LabeledDataset,
    val_ds: LabeledDataset,
    config: TrainConfig,
    stream: int,
) -> list[tuple[int, dict[str, float], float]]:
    ext_t, head_t = lift(extractor), lift(head)
    bs = config.batch_size
    steps = max(1, math.ceil(len(train_ds) / bs))
    history = []
    for epoch in range(config.epochs):
        order = _epoch_order(np.random.default_rng([config.seed, 300 + stream, epoch]), len(train_ds), steps, bs)
        loss_sum = 0.0
        for step in range(steps):
            xb, yb = _take_batch(train_ds, order[step * bs : (step + 1) * bs], config, epoch, step, 200 + stream)
            logits = forward_graph(spec, ext_t, head_t, T.Tensor(xb))
            loss = T.softmax_cross_entropy(logits, yb)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericsError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            _sgd_update([ext_t, head_t], config.lr, step)
            loss_sum += val
        m = Model(spec, extractor, head)
        history.append(
            (
                epoch,
                {
                    "train": _train_accuracy(m, train_ds, config.eval_train_cap, config.seed),
                    "val": evaluate(m, val_ds),
                },
                loss_sum / steps,
            )
        )
    return history


def baseline_train(config: TrainConfig, datasets: list[LabeledDataset], spec: ModelSpec | None = None) -> TrainedBundle:
    """Independent training: each dataset model on its own data with its
    own head (baseline-separate), or one model on the union
    (baseline-star).  No regulariser, no parameter sharing."""
    if config.mode not in ("baseline-separate", "baseline-star"):
        raise ConfigError(f"baseline_train requires a baseline mode, got {config.mode!r}")
    _check_datasets(config, datasets)
    spec = spec or get_preset(config.preset)
    splits = [split_train_val(d, config.val_frac, seed=config.seed) for d in datasets]

    if config.mode == "baseline-separate":
        extractors, heads = [], []
        per_model: list[list] = []
        for i, (tr, va) in enumerate(splits):
            rng = np.random.default_rng([config.seed, 400 + i])
            ext = init_extractor(spec, rng, f"extractor-{i + 1}")
            hd = init_head(spec, rng)
            per_model.append(_train_single(spec, ext, hd, tr, va, config, stream=i))
            extractors.append(ext)
            heads.append(hd)
        bundle = TrainedBundle(spec, config, extractors, star=None, head=None, heads=heads)
        for epoch in range(config.epochs):
            accuracy = {f"N{i + 1}": per_model[i][epoch][1] for i in range(config.n)}
            loss_task = {f"N{i + 1}": per_model[i][epoch][2] for i in range(config.n)}
            bundle.history.append(
                MetricsRecord(epoch, accuracy, loss_task, loss_agg=0.0, loss_total=sum(loss_task.values()))
            )
        return bundle

    union_train, union_val = splits[0]
    for tr, va in splits[1:]:
        union_train = union(union_train, tr)
        union_val = union(union_val, va)
    rng = np.random.default_rng([config.seed, 499])
    star = init_extractor(spec, rng, "extractor-star")
    star_head = init_head(spec, rng)
    hist = _train_single(spec, star, star_head, union_train, union_val, config, stream=99)
    bundle = TrainedBundle(spec, config, extractors=[], star=star, head=None, star_head=star_head)
    for epoch in range(config.epochs):
        bundle.history.append(
            MetricsRecord(epoch, {"Nstar": hist[epoch][1]}, {"Nstar": hist[epoch][2]}, 0.0, hist[epoch][2])
        )
    return bundle
