"""VGG-style extractor/head construction and the shared-head bundle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .params import ParamSet

__all__ = ["ModelSpec", "Model", "PRESETS", "get_preset", "build_bundle", "lift", "forward_graph", "forward", "predict"]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: conv blocks, normalisation groups, head."""

    name: str
    conv_blocks: tuple[tuple[int, int], ...]  # (out_channels, convs_per_block)
    gn_groups: int
    head_dims: tuple[int, ...]
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (1, 32, 32)

    def __post_init__(self):
        for out_ch, reps in self.conv_blocks:
            if out_ch % self.gn_groups != 0:
                raise ConfigError(
                    f"{self.name}: gn_groups={self.gn_groups} does not divide {out_ch} channels"
                )
            if reps < 1:
                raise ConfigError(f"{self.name}: convs_per_block must be >= 1")
        side = self.input_shape[1]
        if side % (2 ** len(self.conv_blocks)) != 0:
            raise ConfigError(f"{self.name}: input side {side} not divisible by pooling stack")

    @property
    def num_conv_layers(self) -> int:
        return sum(reps for _, reps in self.conv_blocks)

    @property
    def flat_features(self) -> int:
        side = self.input_shape[1] // (2 ** len(self.conv_blocks))
        return self.conv_blocks[-1][0] * side * side


PRESETS: dict[str, ModelSpec] = {
    # 13 conv layers, 32 normalisation groups, classifier 512 -> 512 -> classes
    "vgg16-gn": ModelSpec(
        name="vgg16-gn",
        conv_blocks=((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)),
        gn_groups=32,
        head_dims=(512, 512),
    ),
    # desk-scale variant: one conv per block, trains in minutes on CPU
    "vgg-lite": ModelSpec(
        name="vgg-lite",
        conv_blocks=((32, 1), (64, 1), (128, 1), (128, 1)),
        gn_groups=8,
        head_dims=(128,),
    ),
}


def get_preset(name: str) -> ModelSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None


@dataclass
class Model:
    """An extractor paired with a (possibly shared) classifier head."""

    spec: ModelSpec
    extractor: ParamSet
    head: ParamSet

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return forward(self.spec, self.extractor, self.head, batch)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return predict(self.forward(batch))


# ---------------------------------------------------------------------------
# initialisation


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_extractor(spec: ModelSpec, rng: np.random.Generator, role: str) -> ParamSet:
    ps = ParamSet(role)
    in_ch = spec.input_shape[0]
    idx = 0
    for out_ch, reps in spec.conv_blocks:
        for _ in range(reps):
            fan_in = in_ch * 9
            ps.add(f"conv{idx}.weight", _he_uniform(rng, (out_ch, in_ch, 3, 3), fan_in), aggregable=True)
            ps.add(f"conv{idx}.bias", np.zeros(out_ch, np.float32), aggregable=True)
            ps.add(f"gn{idx}.gamma", np.ones(out_ch, np.float32), aggregable=False)
            ps.add(f"gn{idx}.beta", np.zeros(out_ch, np.float32), aggregable=False)
            in_ch = out_ch
            idx += 1
    return ps


def init_head(spec: ModelSpec, rng: np.random.Generator) -> ParamSet:
    ps = ParamSet("task-head")
    dims = [spec.flat_features, *spec.head_dims, spec.num_classes]
    for j in range(len(dims) - 1):
        ps.add(f"fc{j}.weight", _he_uniform(rng, (dims[j + 1], dims[j]), dims[j]), aggregable=False)
        ps.add(f"fc{j}.bias", np.zeros(dims[j + 1], np.float32), aggregable=False)
    return ps


def build_bundle(spec: ModelSpec, n: int, seed: int) -> tuple[list[ParamSet], ParamSet, ParamSet]:
    """n dataset extractors, one aggregated extractor, one shared head."""
    if n < 1:
        raise ConfigError(f"build_bundle: n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    extractors = [init_extractor(spec, rng, f"extractor-{i + 1}") for i in range(n)]
    star = init_extractor(spec, rng, "extractor-star")
    head = init_head(spec, rng)
    return extractors, star, head


# ---------------------------------------------------------------------------
# forward pass


def lift(ps: ParamSet, requires_grad: bool = True, dtype=None) -> dict[str, T.Tensor]:
    """Wrap every parameter array in a graph leaf tensor."""
    out = {}
    for name, arr in ps.items():
        data = arr if dtype is None else arr.astype(dtype)
        out[name] = T.Tensor(data, requires_grad=requires_grad)
    return out


def forward_graph(
    spec: ModelSpec,
    extractor: dict[str, T.Tensor],
    head: dict[str, T.Tensor],
    x: T.Tensor,
) -> T.Tensor:
    """Differentiable logits for a lifted parameter dict pair."""
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"forward: batch shape {x.shape} incompatible with input {spec.input_shape}")
    idx = 0
    for _, reps in spec.conv_blocks:
        for _ in range(reps):
            x = T.conv2d(x, extractor[f"conv{idx}.weight"], extractor[f"conv{idx}.bias"], stride=1, pad=1)
            x = T.group_norm(x, extractor[f"gn{idx}.gamma"], extractor[f"gn{idx}.beta"], spec.gn_groups)
            x = T.relu(x)
            idx += 1
        x = T.max_pool2d(x, 2, 2)
    x = T.flatten(x)
    n_fc = len(spec.head_dims) + 1
    for j in range(n_fc):
        x = T.linear(x, head[f"fc{j}.weight"], head[f"fc{j}.bias"])
        if j < n_fc - 1:
            x = T.relu(x)
    return x


def forward(spec: ModelSpec, extractor: ParamSet, head: ParamSet, batch: np.ndarray) -> np.ndarray:
    """Inference logits; builds no gradient tape."""
    x = T.Tensor(np.asarray(batch, dtype=np.float32))
    logits = forward_graph(spec, lift(extractor, requires_grad=False), lift(head, requires_grad=False), x)
    return logits.data


def predict(logits: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=1)
