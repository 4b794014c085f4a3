"""Parameter algebra: merge, selective forget, and the merge regulariser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .models import Model, ModelSpec
from .params import ParamSet

__all__ = [
    "AggregationOp",
    "SUM",
    "MEAN",
    "get_op",
    "aggregate",
    "subtract",
    "aggregation_loss",
    "compose_model",
]


@dataclass(frozen=True)
class AggregationOp:
    """Elementwise associative combine with an optional inverse.

    ``sum`` inverts by plain subtraction.  ``mean`` needs the operand
    count to invert, so compositions store it in their manifest.
    """

    kind: str

    # The algebra computes and returns float64: the inverse round-trip
    # property (|(A+B)-B - A| / |A| <= 1e-6) cannot be met in float32,
    # where the combine's rounding alone can exceed it.

    def combine(self, arrays: list[np.ndarray]) -> np.ndarray:
        acc = arrays[0].astype(np.float64)
        for a in arrays[1:]:
            acc += a
        if self.kind == "mean":
            acc /= len(arrays)
        return acc

    def invert(self, whole: np.ndarray, part: np.ndarray, n_parts: int | None = None) -> np.ndarray:
        if self.kind == "sum":
            return whole.astype(np.float64) - part
        if self.kind == "mean":
            if n_parts is None or n_parts < 2:
                raise ConfigError("mean inverse requires the operand count (n_parts >= 2)")
            return (whole.astype(np.float64) * n_parts - part) / (n_parts - 1)
        raise ConfigError(f"operator {self.kind!r} has no inverse")


SUM = AggregationOp("sum")
MEAN = AggregationOp("mean")
_OPS = {"sum": SUM, "mean": MEAN}


def get_op(kind: str) -> AggregationOp:
    try:
        return _OPS[kind]
    except KeyError:
        raise ConfigError(f"unknown aggregation operator {kind!r}; available: {sorted(_OPS)}") from None


def _check_parts(parts: list[ParamSet]) -> list[str]:
    if not parts:
        raise ConfigError("aggregate: need at least one ParamSet")
    keys = parts[0].aggregable_keys()
    for other in parts[1:]:
        parts[0].require_compatible(other, keys=parts[0].keys())
    return keys


def aggregate(parts: list[ParamSet], op: AggregationOp = SUM) -> tuple[ParamSet, list[str]]:
    """Combine aggregable entries across parts, in list order.

    Returns the combined ParamSet (aggregable entries only) and the
    list of keys that were skipped because they are non-aggregable.
    """
    keys = _check_parts(parts)
    out = ParamSet("aggregate")
    for k in keys:
        out.add(k, op.combine([p[k] for p in parts]), aggregable=True)
    skipped = parts[0].non_aggregable_keys()
    return out, skipped


def subtract(whole: ParamSet, part: ParamSet, op: AggregationOp = SUM, n_parts: int | None = None) -> ParamSet:
    """Undo one operand's contribution from a combined ParamSet."""
    keys = whole.aggregable_keys()
    for k in keys:
        if k not in part:
            raise ShapeError(f"subtract: key {k!r} missing from part")
        if whole[k].shape != part[k].shape:
            raise ShapeError(f"subtract: shape mismatch for {k!r}")
    out = ParamSet("aggregate")
    for k in keys:
        out.add(k, op.invert(whole[k], part[k], n_parts), aggregable=True)
    return out


def aggregation_loss(
    star: dict[str, T.Tensor],
    parts: list[dict[str, T.Tensor]],
    keys: list[str],
    op: AggregationOp = SUM,
) -> T.Tensor:
    """Differentiable penalty: sum over layers of the squared Frobenius
    norm of (combined-extractor weight minus the combine of the parts).

    Zero exactly when the combined extractor equals the elementwise
    combine; non-negative otherwise.
    """
    if op.kind not in ("sum", "mean"):
        raise ConfigError(f"aggregation_loss: unsupported operator {op.kind!r}")
    total: T.Tensor | None = None
    for k in keys:
        combined = parts[0][k]
        for p in parts[1:]:
            combined = T.add(combined, p[k])
        if op.kind == "mean":
            combined = T.scale(combined, 1.0 / len(parts))
        term = T.sum_squares(T.sub(star[k], combined))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ShapeError("aggregation_loss: no aggregable keys")
    return total


def compose_model(
    parts: list[ParamSet],
    donor: ParamSet,
    head: ParamSet,
    spec: ModelSpec,
    op: AggregationOp = SUM,
) -> Model:
    """Test-time model: combined conv parameters, donor's normalisation
    parameters, and the shared head.  No training involved."""
    combined, _ = aggregate(parts, op)
    extractor = ParamSet("composed")
    for name, arr in donor.items():
        if donor.is_aggregable(name):
            # back to storage precision for inference
            extractor.add(name, combined[name].astype(np.float32), aggregable=True)
        else:
            extractor.add(name, arr.copy(), aggregable=False)
    return Model(spec=spec, extractor=extractor, head=head)
