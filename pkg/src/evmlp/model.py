"""Network configuration, parameters and the patch-wise forward pass.

Patches are pushed through a building block in fixed-size row tiles. A
stage always uses the same tile height no matter how many patches are being
computed, so a patch evaluated alone (as the event engine does) goes through
exactly the same BLAS call shape as during a full pass and yields the same
bits. Tiles are independent, which is also what makes threaded execution
reproducible.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from evmlp.errors import ConfigError, ShapeError
from evmlp.numerics import (
    DEFAULT_LN_EPS,
    DenseLayer,
    LayerNormParams,
    dense_forward,
    gelu,
    layer_norm,
    patchify,
    unpatchify,
)

Mode = Literal["inference", "training"]

TILE_ROWS = 64


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    patch_side: int
    expansion: float
    out_dim: int
    bottlenecks: int
    dropout_p: float = 0.0

    @property
    def hidden_dim(self) -> int:
        return int(round(self.out_dim * self.expansion))


@dataclass(frozen=True)
class Normalization:
    """Per-channel ``(x - mean) / std`` applied to network inputs only."""

    mean: tuple[float, ...]
    std: tuple[float, ...]


@dataclass(frozen=True)
class NetworkConfig:
    input_side: int
    input_channels: int
    stages: tuple[StageConfig, ...]
    num_classes: int
    name: str = "custom"
    normalize: Normalization | None = None
    layer_norm_eps: float = DEFAULT_LN_EPS

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        self.validate()

    def validate(self) -> None:
        if self.input_side < 1 or self.input_channels < 1:
            raise ConfigError("input_side and input_channels must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if not self.stages:
            raise ConfigError("stages: at least one stage is required")
        if not self.layer_norm_eps > 0:
            raise ConfigError("layer_norm_eps must be positive")
        if self.normalize is not None:
            n = self.normalize
            if len(n.mean) != self.input_channels or len(n.std) != self.input_channels:
                raise ConfigError("normalize: mean/std need one entry per input channel")
            if any(s <= 0 for s in n.std):
                raise ConfigError("normalize.std: entries must be positive")
        side = self.input_side
        for i, st in enumerate(self.stages):
            where = f"stages[{i}]"
            if st.patch_side < 1:
                raise ConfigError(f"{where}.patch_side must be >= 1")
            if st.expansion < 1:
                raise ConfigError(f"{where}.expansion must be >= 1")
            if st.out_dim < 1:
                raise ConfigError(f"{where}.out_dim must be >= 1")
            if st.bottlenecks < 0:
                raise ConfigError(f"{where}.bottlenecks must be >= 0")
            if not 0 <= st.dropout_p < 1:
                raise ConfigError(f"{where}.dropout_p must lie in [0, 1)")
            if not math.isclose(st.out_dim * st.expansion, st.hidden_dim):
                raise ConfigError(f"{where}: out_dim * expansion must be an integer")
            if side % st.patch_side:
                raise ConfigError(
                    f"{where}: incoming map side {side} is not divisible by patch_side {st.patch_side}"
                )
            side //= st.patch_side
        if side != 1:
            raise ConfigError(f"final stage emits a {side}x{side} map; the head needs 1x1")

    # -- derived shapes ----------------------------------------------------

    def stage_io(self) -> list[tuple[int, int, int, int]]:
        """Per stage ``(in_side, in_channels, out_side, in_dim)``."""
        side, ch = self.input_side, self.input_channels
        out = []
        for st in self.stages:
            nside = side // st.patch_side
            out.append((side, ch, nside, st.patch_side * st.patch_side * ch))
            side, ch = nside, st.out_dim
        return out

    def map_shapes(self) -> list[tuple[int, int, int]]:
        """The input map shape followed by every stage's output shape."""
        shapes = [(self.input_side, self.input_side, self.input_channels)]
        for (_, _, nside, _), st in zip(self.stage_io(), self.stages):
            shapes.append((nside, nside, st.out_dim))
        return shapes

    @property
    def final_dim(self) -> int:
        return self.stages[-1].out_dim

    # -- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "input_side": self.input_side,
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "layer_norm_eps": self.layer_norm_eps,
            "normalize": None
            if self.normalize is None
            else {"mean": list(self.normalize.mean), "std": list(self.normalize.std)},
            "stages": [
                {
                    "patch_side": s.patch_side,
                    "expansion": s.expansion,
                    "out_dim": s.out_dim,
                    "bottlenecks": s.bottlenecks,
                    "dropout_p": s.dropout_p,
                }
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, doc: Any) -> "NetworkConfig":
        """Strictly validate a decoded JSON document; errors name the field path."""
        return _parse_config(doc)


_TOP_FIELDS = {
    "name": (str, False),
    "input_side": (int, True),
    "input_channels": (int, True),
    "num_classes": (int, True),
    "stages": (list, True),
    "normalize": ((dict, type(None)), False),
    "layer_norm_eps": ((int, float), False),
}
_STAGE_FIELDS = {
    "patch_side": (int, True),
    "expansion": ((int, float), True),
    "out_dim": (int, True),
    "bottlenecks": (int, True),
    "dropout_p": ((int, float), False),
}


def _check_fields(doc: Any, spec: dict, path: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    for key in doc:
        if key not in spec:
            raise ConfigError(f"{path}{'.' if path else ''}{key}: unknown field")
    for key, (types, required) in spec.items():
        where = f"{path}{'.' if path else ''}{key}"
        if key not in doc:
            if required:
                raise ConfigError(f"{where}: missing required field")
            continue
        value = doc[key]
        if isinstance(value, bool) or not isinstance(value, types):
            raise ConfigError(f"{where}: wrong type {type(value).__name__}")


def _parse_config(doc: Any) -> NetworkConfig:
    _check_fields(doc, _TOP_FIELDS, "")
    if not doc["stages"]:
        raise ConfigError("stages: at least one stage is required")
    stages = []
    for i, sd in enumerate(doc["stages"]):
        _check_fields(sd, _STAGE_FIELDS, f"stages[{i}]")
        stages.append(
            StageConfig(
                patch_side=sd["patch_side"],
                expansion=float(sd["expansion"]),
                out_dim=sd["out_dim"],
                bottlenecks=sd["bottlenecks"],
                dropout_p=float(sd.get("dropout_p", 0.0)),
            )
        )
    norm = doc.get("normalize")
    normalize = None
    if norm is not None:
        _check_fields(norm, {"mean": (list, True), "std": (list, True)}, "normalize")
        for key in ("mean", "std"):
            for j, v in enumerate(norm[key]):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"normalize.{key}[{j}]: expected a number")
        normalize = Normalization(tuple(map(float, norm["mean"])), tuple(map(float, norm["std"])))
    return NetworkConfig(
        input_side=doc["input_side"],
        input_channels=doc["input_channels"],
        stages=tuple(stages),
        num_classes=doc["num_classes"],
        name=doc.get("name", "custom"),
        normalize=normalize,
        layer_norm_eps=float(doc.get("layer_norm_eps", DEFAULT_LN_EPS)),
    )


def evmlp_t1_config(num_classes: int = 1000) -> NetworkConfig:
    """The six-stage 224x224 configuration."""
    rows = [(7, 64, 0.0), (2, 128, 0.0), (2, 512, 0.0), (2, 512, 0.0), (2, 512, 0.0), (2, 512, 0.2)]
    return NetworkConfig(
        input_side=224,
        input_channels=3,
        stages=tuple(StageConfig(p, 4.0, c, 5, d) for p, c, d in rows),
        num_classes=num_classes,
        name="evmlp-t1",
    )


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass
class InvertedResidualBottleneck:
    expand: DenseLayer
    project: DenseLayer
    norm: LayerNormParams
    dropout_p: float = 0.0

    def __post_init__(self):
        d_in = self.expand.in_dim
        if self.project.in_dim != self.expand.out_dim or self.project.out_dim != d_in:
            raise ShapeError(
                f"bottleneck layers do not chain: expand {d_in}->{self.expand.out_dim}, "
                f"project {self.project.in_dim}->{self.project.out_dim}"
            )
        if self.norm.dim != d_in:
            raise ShapeError(f"bottleneck norm has dim {self.norm.dim}, expected {d_in}")


@dataclass
class BuildingBlock:
    mixer: DenseLayer
    bottlenecks: list[InvertedResidualBottleneck] = field(default_factory=list)

    def __post_init__(self):
        for i, b in enumerate(self.bottlenecks):
            if b.expand.in_dim != self.mixer.out_dim:
                raise ShapeError(
                    f"bottleneck {i} expects {b.expand.in_dim} features, mixer emits {self.mixer.out_dim}"
                )


@dataclass
class Network:
    config: NetworkConfig
    blocks: list[BuildingBlock]
    head: DenseLayer

    @property
    def dtype(self) -> np.dtype:
        return self.head.weight.dtype

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Canonical tensor names, in a fixed order, mapped to live arrays."""
        out: dict[str, np.ndarray] = {}
        for l, blk in enumerate(self.blocks, start=1):
            out[f"stage{l}.mixer.weight"] = blk.mixer.weight
            out[f"stage{l}.mixer.bias"] = blk.mixer.bias
            for i, b in enumerate(blk.bottlenecks):
                pre = f"stage{l}.bn{i}"
                out[f"{pre}.expand.weight"] = b.expand.weight
                out[f"{pre}.expand.bias"] = b.expand.bias
                out[f"{pre}.project.weight"] = b.project.weight
                out[f"{pre}.project.bias"] = b.project.bias
                out[f"{pre}.norm.gamma"] = b.norm.gamma
                out[f"{pre}.norm.beta"] = b.norm.beta
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def astype(self, dtype) -> "Network":
        """Deep copy with every parameter cast to ``dtype``."""
        params = {k: v.astype(dtype, copy=True) for k, v in self.named_parameters().items()}
        return network_from_params(self.config, params)

    def copy(self) -> "Network":
        return self.astype(self.dtype)


def expected_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names mapped to the shapes ``config`` requires."""
    shapes: dict[str, tuple[int, ...]] = {}
    for l, ((_, _, _, in_dim), st) in enumerate(zip(config.stage_io(), config.stages), start=1):
        c, h = st.out_dim, st.hidden_dim
        shapes[f"stage{l}.mixer.weight"] = (c, in_dim)
        shapes[f"stage{l}.mixer.bias"] = (c,)
        for i in range(st.bottlenecks):
            pre = f"stage{l}.bn{i}"
            shapes[f"{pre}.expand.weight"] = (h, c)
            shapes[f"{pre}.expand.bias"] = (h,)
            shapes[f"{pre}.project.weight"] = (c, h)
            shapes[f"{pre}.project.bias"] = (c,)
            shapes[f"{pre}.norm.gamma"] = (c,)
            shapes[f"{pre}.norm.beta"] = (c,)
    shapes["head.weight"] = (config.num_classes, config.final_dim)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def network_from_params(config: NetworkConfig, params: dict[str, np.ndarray]) -> Network:
    """Assemble a network from named tensors, checking names and shapes first."""
    want = expected_shapes(config)
    for name, shape in want.items():
        if name not in params:
            raise ShapeError(f"missing tensor {name}")
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"tensor {name} has shape {tuple(params[name].shape)}, expected {shape}")
    extra = sorted(set(params) - set(want))
    if extra:
        raise ShapeError(f"unexpected tensor {extra[0]}")

    blocks = []
    for l, st in enumerate(config.stages, start=1):
        mixer = DenseLayer(params[f"stage{l}.mixer.weight"], params[f"stage{l}.mixer.bias"])
        bns = []
        for i in range(st.bottlenecks):
            pre = f"stage{l}.bn{i}"
            bns.append(
                InvertedResidualBottleneck(
                    expand=DenseLayer(params[f"{pre}.expand.weight"], params[f"{pre}.expand.bias"]),
                    project=DenseLayer(params[f"{pre}.project.weight"], params[f"{pre}.project.bias"]),
                    norm=LayerNormParams(
                        params[f"{pre}.norm.gamma"], params[f"{pre}.norm.beta"], config.layer_norm_eps
                    ),
                    dropout_p=st.dropout_p,
                )
            )
        blocks.append(BuildingBlock(mixer, bns))
    head = DenseLayer(params["head.weight"], params["head.bias"])
    return Network(config, blocks, head)


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    """Seeded initialization: dense weights and biases ~ U(-1/sqrt(in), 1/sqrt(in)).

    Values are drawn at 64-bit in canonical tensor order and then cast, so a
    given seed yields the same network regardless of ``dtype`` rounding.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    shapes = expected_shapes(config)
    params: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".beta"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shapes[name.rsplit(".", 1)[0] + ".weight"][1]
            bound = math.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return network_from_params(config, params)


@dataclass(frozen=True)
class ParamCount:
    stages: tuple[int, ...]
    head: int

    @property
    def total(self) -> int:
        return sum(self.stages) + self.head


def count_params(net: Network) -> ParamCount:
    """Count every weight, bias, gamma and beta scalar in ``net``."""
    per_stage = [0] * len(net.blocks)
    head = 0
    for name, arr in net.named_parameters().items():
        if name.startswith("head."):
            head += arr.size
        else:
            per_stage[int(name.split(".")[0][len("stage"):]) - 1] += arr.size
    return ParamCount(tuple(per_stage), head)


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------


def default_threads() -> int:
    env = os.environ.get("EVMLP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def bottleneck_forward(
    b: InvertedResidualBottleneck,
    x: np.ndarray,
    mode: Mode = "inference",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """``layer_norm(x + project(dropout(gelu(expand(x)))))``."""
    if x.shape[-1] != b.expand.in_dim:
        raise ShapeError(f"bottleneck input has {x.shape[-1]} features, expects {b.expand.in_dim}")
    h = gelu(dense_forward(b.expand, x))
    if mode == "training" and b.dropout_p > 0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = rng.random(h.shape) >= b.dropout_p
        h = h * keep / h.dtype.type(1.0 - b.dropout_p)
    return layer_norm(b.norm, x + dense_forward(b.project, h))


def block_forward(
    blk: BuildingBlock,
    patch: np.ndarray,
    mode: Mode = "inference",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Mixer followed by the bottlenecks; accepts one patch or a batch of rows."""
    if patch.shape[-1] != blk.mixer.in_dim:
        raise ShapeError(f"patch has {patch.shape[-1]} features, block expects {blk.mixer.in_dim}")
    x = dense_forward(blk.mixer, patch)
    for b in blk.bottlenecks:
        x = bottleneck_forward(b, x, mode, rng)
    return x


def stage_tile(num_patches: int) -> int:
    return min(TILE_ROWS, num_patches)


def run_block_rows(
    blk: BuildingBlock,
    rows: np.ndarray,
    tile: int,
    mode: Mode = "inference",
    rng: np.random.Generator | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Apply ``blk`` to each row of ``rows`` in zero-padded tiles of ``tile`` rows."""
    m = rows.shape[0]
    out = np.empty((m, blk.mixer.out_dim), dtype=rows.dtype)
    if m == 0:
        return out
    starts = range(0, m, tile)

    def one(start: int) -> None:
        chunk = rows[start : start + tile]
        if chunk.shape[0] < tile:
            padded = np.zeros((tile, rows.shape[1]), dtype=rows.dtype)
            padded[: chunk.shape[0]] = chunk
            chunk = padded
        res = block_forward(blk, np.ascontiguousarray(chunk), mode, rng)
        n = min(tile, m - start)
        out[start : start + n] = res[:n]

    if threads <= 1 or len(starts) == 1 or mode == "training":
        for s in starts:
            one(s)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, starts))
    return out


def prepare_input(net: Network, image: np.ndarray) -> np.ndarray:
    """Check an ``(H, W, C)`` image against the config and cast it for the network."""
    cfg = net.config
    want = (cfg.input_side, cfg.input_side, cfg.input_channels)
    image = np.asarray(image)
    if image.shape != want:
        raise ShapeError(f"image shape {image.shape} does not match network input {want}")
    x = image.astype(net.dtype, copy=False)
    if cfg.normalize is not None:
        mean = np.asarray(cfg.normalize.mean, dtype=net.dtype)
        std = np.asarray(cfg.normalize.std, dtype=net.dtype)
        x = (x - mean) / std
    return x


def stage_forward(
    net: Network,
    index: int,
    fmap: np.ndarray,
    mode: Mode = "inference",
    rng: np.random.Generator | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Run stage ``index`` (0-based) on every patch of ``fmap``."""
    st = net.config.stages[index]
    patches = patchify(fmap, st.patch_side)
    n = fmap.shape[0] // st.patch_side
    out = run_block_rows(net.blocks[index], patches, stage_tile(n * n), mode, rng, threads)
    return unpatchify(out, 1, st.out_dim, (n, n))


def head_forward(net: Network, final_map: np.ndarray) -> np.ndarray:
    if final_map.shape != (1, 1, net.config.final_dim):
        raise ShapeError(f"head expects a 1x1x{net.config.final_dim} map, got {final_map.shape}")
    return dense_forward(net.head, final_map.reshape(-1))


def network_forward(
    net: Network,
    image: np.ndarray,
    mode: Mode = "inference",
    rng: np.random.Generator | None = None,
    threads: int = 1,
) -> np.ndarray:
    x = prepare_input(net, image)
    for l in range(len(net.blocks)):
        x = stage_forward(net, l, x, mode, rng, threads)
    return head_forward(net, x)


def config_param_count(config: NetworkConfig) -> ParamCount:
    """Parameter count straight from the config, without allocating weights."""
    per_stage = [0] * len(config.stages)
    head = 0
    for name, shape in expected_shapes(config).items():
        size = math.prod(shape)
        if name.startswith("head."):
            head += size
        else:
            per_stage[int(name.split(".")[0][len("stage"):]) - 1] += size
    return ParamCount(tuple(per_stage), head)
