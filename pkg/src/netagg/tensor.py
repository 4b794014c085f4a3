"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operations needed by VGG-style classifiers are provided:
conv2d, group_norm, linear, relu, max_pool2d, flatten, elementwise
add/sub/scale, sum-of-squares and softmax cross-entropy.

Storage defaults to float32; reductions (normalisation statistics,
losses) accumulate in float64.  Convolutions and matrix products run
in the storage dtype so they go through BLAS.  Gradient-check tests
may build float64 tensors; every op preserves the input dtype.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import DataError, NumericsError, ShapeError

__all__ = [
    "Tensor",
    "add",
    "sub",
    "scale",
    "conv2d",
    "group_norm",
    "linear",
    "relu",
    "max_pool2d",
    "flatten",
    "sum_squares",
    "softmax",
    "softmax_cross_entropy",
    "sgd_step",
    "check_finite",
]


class Tensor:
    """A node in the computation graph wrapping one numpy array."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _prev: tuple["Tensor", ...] = (),
        op: str = "leaf",
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] | None = None
        self._prev = _prev
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        """Add g into the gradient buffer; own=True means g is freshly
        allocated and may be adopted without copying."""
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g if own and g.flags.owndata and g.flags.writeable else g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, free_graph: bool = True) -> None:
        """Reverse-mode sweep from this node; seeds with ones.

        With free_graph, interior nodes are unlinked afterwards (the
        closures form reference cycles that refcounting alone cannot
        reclaim); leaf gradients are kept.
        """
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
        if free_graph:
            for node in topo:
                if node._prev:
                    node._backward = None
                    node._prev = ()
                    node.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    return Tensor(data, requires_grad=_needs_grad(*parents), _prev=parents, op=op)


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad)
            if b.requires_grad:
                b._accumulate(out.grad)

        out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad)
            if b.requires_grad:
                b._accumulate(-out.grad)

        out._backward = _bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = _result(a.data * a.data.dtype.type(s), (a,), "scale")
    if out.requires_grad:

        def _bw():
            a._accumulate(out.grad * s, own=True)

        out._backward = _bw
    return out


def sum_squares(a: Tensor) -> Tensor:
    """Scalar sum of squared entries, accumulated in float64."""
    val = np.sum(a.data.astype(np.float64) ** 2)
    out = _result(np.asarray(val, dtype=a.dtype), (a,), "sum_squares")
    if out.requires_grad:

        def _bw():
            a._accumulate(2.0 * a.data * out.grad, own=True)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCkhkw kernels."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: channel mismatch input {c} vs kernel {ck}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({f},)")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    if (hp - kh) % stride != 0 or (wp - kw) % stride != 0:
        raise ShapeError(
            f"conv2d: non-exact output size for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    cols = _kernels.im2col(x.data, kh, kw, stride, pad, ho, wo)  # (C*kh*kw, N*ho*wo)
    w2 = kernel.data.reshape(f, c * kh * kw)
    out2 = w2 @ cols
    out2 += bias.data[:, None]
    out_data = np.ascontiguousarray(out2.reshape(f, n, ho, wo).transpose(1, 0, 2, 3))
    out = _result(out_data, (x, kernel, bias), "conv2d")

    if out.requires_grad:

        def _bw():
            go = np.ascontiguousarray(out.grad.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
            if kernel.requires_grad:
                kernel._accumulate((go @ cols.T).reshape(kernel.shape), own=True)
            if bias.requires_grad:
                bias._accumulate(go.sum(axis=1), own=True)
            if x.requires_grad:
                gcols = w2.T @ go
                gx = _kernels.col2im(gcols, n, c, h, w, kh, kw, stride, pad, ho, wo)
                x._accumulate(gx, own=True)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# normalisation


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel-group normalisation with learnable scale/shift."""
    from .errors import ConfigError

    if x.data.ndim != 4:
        raise ShapeError(f"group_norm: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise ConfigError(f"group_norm: groups={groups} does not divide channels={c}")
    if eps <= 0:
        raise ConfigError(f"group_norm: eps must be positive, got {eps}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: gamma/beta shapes {gamma.shape}/{beta.shape}, expected ({c},)")

    # single fused pass; statistics accumulate in float64
    out_data, mu, inv_std = _kernels.group_norm_fwd(x.data, gamma.data, beta.data, groups, eps)
    out = _result(out_data, (x, gamma, beta), "group_norm")

    if out.requires_grad:

        def _bw():
            dx, dgamma, dbeta = _kernels.group_norm_bwd(
                x.data, out.grad, gamma.data, mu, inv_std, groups
            )
            if gamma.requires_grad:
                gamma._accumulate(dgamma, own=True)
            if beta.requires_grad:
                beta._accumulate(dbeta, own=True)
            if x.requires_grad:
                x._accumulate(dx, own=True)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# dense / activations / pooling


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear: expected 2-d input/weight, got {x.shape}, {weight.shape}")
    n, d = x.shape
    k, dw = weight.shape
    if dw != d:
        raise ShapeError(f"linear: inner dims differ, input {d} vs weight {dw}")
    if bias.shape != (k,):
        raise ShapeError(f"linear: bias shape {bias.shape}, expected ({k},)")
    out = _result(x.data @ weight.data.T + bias.data, (x, weight, bias), "linear")

    if out.requires_grad:

        def _bw():
            go = out.grad
            if x.requires_grad:
                x._accumulate(go @ weight.data, own=True)
            if weight.requires_grad:
                weight._accumulate(go.T @ x.data, own=True)
            if bias.requires_grad:
                bias._accumulate(go.sum(axis=0), own=True)

        out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0), (x,), "relu")
    if out.requires_grad:

        def _bw():
            x._accumulate(out.grad * (x.data > 0), own=True)

        out._backward = _bw
    return out


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Windowed max; gradient routes to the first (lowest linear index) argmax."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if (h - window) % stride != 0 or (w - window) % stride != 0 or h < window or w < window:
        raise ShapeError(f"max_pool2d: input {h}x{w} indivisible by window {window}, stride {stride}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1

    # argmax keeps the first (row-major) maximum, so ties resolve to the
    # lowest linear input index
    out_data, arg = _kernels.maxpool_fwd(x.data, window, stride, ho, wo)
    out = _result(out_data, (x,), "max_pool2d")

    if out.requires_grad:

        def _bw():
            gx = _kernels.maxpool_bwd(out.grad, arg, n, c, h, w, window, stride, ho, wo)
            x._accumulate(gx, own=True)

        out._backward = _bw
    return out


def flatten(x: Tensor) -> Tensor:
    n = x.shape[0]
    out = _result(x.data.reshape(n, -1), (x,), "flatten")
    if out.requires_grad:

        def _bw():
            x._accumulate(out.grad.reshape(x.shape))

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# loss


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction, in float64."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected 2-d logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape}, expected ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"softmax_cross_entropy: label out of range [0, {k})")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    out = _result(np.asarray(nll.mean(), dtype=logits.dtype), (logits,), "softmax_ce")

    if out.requires_grad:

        def _bw():
            p = np.exp(z - lse[:, None])
            p[np.arange(n), labels] -= 1.0
            logits._accumulate(p * (out.grad / n), own=True)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# optimiser


def sgd_step(params: "ParamLike", grads: "ParamLike", lr: float) -> None:
    """In-place p <- p - lr*g over matching key/shape collections.

    Accepts any mapping name -> ndarray on both sides (ParamSet works).
    """
    pkeys, gkeys = list(params.keys()), list(grads.keys())
    if pkeys != gkeys:
        raise ShapeError(f"sgd_step: key mismatch {pkeys} vs {gkeys}")
    for name in pkeys:
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeError(f"sgd_step: shape mismatch for {name}: {p.shape} vs {g.shape}")
        p -= np.asarray(g, dtype=p.dtype) * p.dtype.type(lr)


ParamLike = dict  # any mapping name -> np.ndarray
