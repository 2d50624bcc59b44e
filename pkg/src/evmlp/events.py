"""Event-driven local update: recompute only patches whose inputs changed.

For every new frame the absolute difference against the previous frame is
collapsed over channels by maximum, thresholded at ``tau`` (inclusive) and
average-pooled down the stage cascade. A stage-``l`` patch is recomputed when
its pooled cell is nonzero; all other outputs are copied from the cached maps
of the previous frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from evmlp.errors import CacheError, ShapeError
from evmlp.model import (
    Network,
    StageConfig,
    head_forward,
    network_forward,
    patchify,
    prepare_input,
    run_block_rows,
    stage_forward,
    stage_tile,
)
from evmlp.numerics import avg_pool_2d


@dataclass
class EventState:
    tau: float
    diff: np.ndarray
    c0: np.ndarray
    cascade: list[np.ndarray]

    def event_counts(self) -> tuple[int, ...]:
        return tuple(int(np.count_nonzero(c)) for c in self.cascade)


@dataclass
class FeatureCache:
    """Previous raw frame, every stage output it produced, and its logits."""

    frame: np.ndarray | None = None
    stage_outputs: list[np.ndarray] = field(default_factory=list)
    logits: np.ndarray | None = None
    valid: bool = False


@dataclass
class FrameStats:
    events_per_stage: tuple[int, ...]
    patches_per_stage: tuple[int, ...]
    macs_per_stage: tuple[int, ...]
    head_macs: int
    logits: np.ndarray
    event_overhead_ops: int = 0

    def __post_init__(self):
        for e, p in zip(self.events_per_stage, self.patches_per_stage):
            if e > p:
                raise ValueError(f"event count {e} exceeds patch count {p}")

    @property
    def macs(self) -> int:
        return sum(self.macs_per_stage) + self.head_macs

    @property
    def top1(self) -> int:
        return int(np.argmax(self.logits))


def diff_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel absolute difference, maximum over channels, at 64-bit."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"frames must share an (H, W, C) shape, got {a.shape} and {b.shape}")
    return np.abs(a.astype(np.float64) - b.astype(np.float64)).max(axis=2)


def threshold_events(d: np.ndarray, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValueError(f"event threshold must be nonnegative, got {tau}")
    return np.where(d >= tau, d, 0.0)


def build_cascade(c0: np.ndarray, stages: list[StageConfig] | tuple[StageConfig, ...]) -> list[np.ndarray]:
    cascade = []
    c = c0
    for st in stages:
        c = avg_pool_2d(c, st.patch_side)
        cascade.append(c)
    return cascade


def compute_events(frame: np.ndarray, previous: np.ndarray, tau: float, stages) -> EventState:
    d = diff_map(frame, previous)
    c0 = threshold_events(d, tau)
    return EventState(tau, d, c0, build_cascade(c0, stages))


def _block_macs(net: Network, l: int) -> int:
    blk = net.blocks[l]
    return blk.mixer.weight.size + sum(b.expand.weight.size + b.project.weight.size for b in blk.bottlenecks)


def _overhead_ops(frame_shape, cascade) -> int:
    h, w, c = frame_shape
    prev = h * w
    ops = h * w * c + h * w
    for level in cascade:
        ops += prev
        prev = level.size
    return ops


def _check_frame(net: Network, frame: np.ndarray) -> np.ndarray:
    cfg = net.config
    want = (cfg.input_side, cfg.input_side, cfg.input_channels)
    frame = np.asarray(frame)
    if frame.shape != want:
        raise ShapeError(f"frame shape {frame.shape} does not match network input {want}")
    return frame


def init_cache(net: Network, frame: np.ndarray, threads: int = 1) -> tuple[FeatureCache, FrameStats]:
    """Full inference pass on ``frame`` that records every stage output."""
    frame = _check_frame(net, frame)
    x = prepare_input(net, frame)
    outputs = []
    for l in range(len(net.blocks)):
        x = stage_forward(net, l, x, "inference", None, threads)
        outputs.append(x)
    logits = head_forward(net, x)
    patches = tuple(o.shape[0] * o.shape[1] for o in outputs)
    stats = FrameStats(
        events_per_stage=patches,
        patches_per_stage=patches,
        macs_per_stage=tuple(p * _block_macs(net, l) for l, p in enumerate(patches)),
        head_macs=net.head.weight.size,
        logits=logits,
    )
    cache = FeatureCache(np.array(frame, copy=True), outputs, logits, True)
    return cache, stats


def event_forward(
    net: Network,
    frame: np.ndarray,
    cache: FeatureCache,
    tau: float,
    threads: int = 1,
) -> tuple[np.ndarray, FeatureCache, FrameStats]:
    """Process ``frame`` against ``cache``; returns logits, the next cache and stats.

    The input cache is left untouched.
    """
    if not cache.valid or cache.frame is None or cache.logits is None:
        raise CacheError("feature cache is not initialized; run init_cache on the first frame")
    frame = _check_frame(net, frame)
    cfg = net.config
    if len(cache.stage_outputs) != len(cfg.stages):
        raise CacheError("feature cache does not match the network's stage count")
    for have, want in zip(cache.stage_outputs, cfg.map_shapes()[1:]):
        if have.shape != want:
            raise CacheError(f"cached map shape {have.shape} does not match {want}")

    state = compute_events(frame, cache.frame, tau, cfg.stages)
    x = prepare_input(net, frame)
    outputs = []
    events, patches, macs = [], [], []
    for l, (st, cell) in enumerate(zip(cfg.stages, state.cascade)):
        n = cell.shape[0]
        idx = np.flatnonzero(cell)
        out = cache.stage_outputs[l].copy()
        if idx.size:
            rows = patchify(x, st.patch_side)[idx]
            res = run_block_rows(net.blocks[l], rows, stage_tile(n * n), "inference", None, threads)
            out.reshape(n * n, st.out_dim)[idx] = res
        outputs.append(out)
        events.append(int(idx.size))
        patches.append(n * n)
        macs.append(int(idx.size) * _block_macs(net, l))
        x = out

    if events[-1]:
        logits = head_forward(net, x)
        head_macs = net.head.weight.size
    else:
        logits = cache.logits.copy()
        head_macs = 0
    stats = FrameStats(
        events_per_stage=tuple(events),
        patches_per_stage=tuple(patches),
        macs_per_stage=tuple(macs),
        head_macs=head_macs,
        logits=logits,
        event_overhead_ops=_overhead_ops(frame.shape, state.cascade),
    )
    return logits, FeatureCache(np.array(frame, copy=True), outputs, logits, True), stats


def full_frame_stats(net: Network, frame: np.ndarray, threads: int = 1) -> FrameStats:
    """Stats of the baseline that recomputes every patch of every frame."""
    logits = network_forward(net, _check_frame(net, frame), "inference", None, threads)
    patches = tuple(s[0] * s[1] for s in net.config.map_shapes()[1:])
    return FrameStats(
        events_per_stage=patches,
        patches_per_stage=patches,
        macs_per_stage=tuple(p * _block_macs(net, l) for l, p in enumerate(patches)),
        head_macs=net.head.weight.size,
        logits=logits,
    )


class EventStream:
    """Feeds frames one at a time: the first builds the cache, the rest update it."""

    def __init__(self, net: Network, tau: float, threads: int = 1):
        if tau < 0:
            raise ValueError(f"event threshold must be nonnegative, got {tau}")
        self.net = net
        self.tau = tau
        self.threads = threads
        self.cache = FeatureCache()

    def push(self, frame: np.ndarray) -> FrameStats:
        if not self.cache.valid:
            self.cache, stats = init_cache(self.net, frame, self.threads)
        else:
            _, self.cache, stats = event_forward(self.net, frame, self.cache, self.tau, self.threads)
        return stats
