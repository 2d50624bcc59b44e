"""Multiply-accumulate accounting and per-sequence cost reports.

Only dense-layer multiply-accumulates are counted (one per weight per patch);
bias adds, activations, normalization, pooling and event-map construction are
not. All counts are Python integers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Sequence

from evmlp.model import NetworkConfig

if TYPE_CHECKING:
    from evmlp.events import FrameStats


@dataclass(frozen=True)
class StageMacs:
    patches: int
    mixer_per_patch: int
    bottleneck_per_patch: int

    @property
    def per_patch(self) -> int:
        return self.mixer_per_patch + self.bottleneck_per_patch

    @property
    def mixer(self) -> int:
        return self.patches * self.mixer_per_patch

    @property
    def bottleneck(self) -> int:
        return self.patches * self.bottleneck_per_patch

    @property
    def total(self) -> int:
        return self.patches * self.per_patch


@dataclass(frozen=True)
class MacBreakdown:
    stages: tuple[StageMacs, ...]
    head: int

    @property
    def total(self) -> int:
        return sum(s.total for s in self.stages) + self.head

    def to_dict(self) -> dict[str, Any]:
        return {
            "stages": [
                {
                    "patches": s.patches,
                    "mixer_macs": s.mixer,
                    "bottleneck_macs": s.bottleneck,
                    "total_macs": s.total,
                }
                for s in self.stages
            ],
            "head_macs": self.head,
            "total_macs": self.total,
        }


def analytic_macs(config: NetworkConfig) -> MacBreakdown:
    """Closed-form MACs of one full forward pass; no network is allocated."""
    config.validate()
    stages = []
    for (_, _, nside, in_dim), st in zip(config.stage_io(), config.stages):
        c, h = st.out_dim, st.hidden_dim
        stages.append(
            StageMacs(
                patches=nside * nside,
                mixer_per_patch=in_dim * c,
                bottleneck_per_patch=st.bottlenecks * (c * h + h * c),
            )
        )
    return MacBreakdown(tuple(stages), config.final_dim * config.num_classes)


def predict_event_macs(config: NetworkConfig, event_counts: Sequence[int]) -> int:
    """MACs of a selective update that recomputes ``event_counts[l]`` patches at stage ``l``.

    The head is charged only when the final stage has an event.
    """
    full = analytic_macs(config)
    if len(event_counts) != len(full.stages):
        raise ValueError(f"expected {len(full.stages)} event counts, got {len(event_counts)}")
    total = 0
    for l, (count, st) in enumerate(zip(event_counts, full.stages)):
        count = int(count)
        if count < 0 or count > st.patches:
            raise ValueError(f"stage {l + 1}: event count {count} outside [0, {st.patches}]")
        total += count * st.per_patch
    if int(event_counts[-1]) > 0:
        total += full.head
    return total


@dataclass
class SequenceReport:
    """Aggregate cost of one processed sequence.

    ``mean_macs_per_frame`` averages frames after the first; the first frame
    is always a full pass and is reported separately as ``init_macs``.
    """

    config_id: str
    tau: float | None
    frames: int
    init_macs: int
    mean_macs_per_frame: float | None
    baseline_macs_per_frame: int
    reduction: float | None
    match_rate: float | None
    per_frame: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config_id": self.config_id,
            "tau": self.tau,
            "frames": self.frames,
            "init_macs": self.init_macs,
            "mean_macs_per_frame": self.mean_macs_per_frame,
            "baseline_macs_per_frame": self.baseline_macs_per_frame,
            "reduction": self.reduction,
            "match_rate": self.match_rate,
            "mean_excludes_init_frame": True,
            "per_frame": self.per_frame,
        }

    def top1(self) -> list[int]:
        return [int(f["top1"]) for f in self.per_frame]

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "SequenceReport":
        try:
            return cls(
                config_id=doc["config_id"],
                tau=doc["tau"],
                frames=int(doc["frames"]),
                init_macs=int(doc["init_macs"]),
                mean_macs_per_frame=doc["mean_macs_per_frame"],
                baseline_macs_per_frame=int(doc["baseline_macs_per_frame"]),
                reduction=doc["reduction"],
                match_rate=doc["match_rate"],
                per_frame=list(doc["per_frame"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed sequence report: {exc}") from exc

    @classmethod
    def read(cls, path: str | Path) -> "SequenceReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def aggregate_sequence(
    stats: Sequence["FrameStats"],
    baseline: MacBreakdown,
    ground_truth_top1: Sequence[int] | None = None,
    config_id: str = "custom",
    tau: float | None = None,
) -> SequenceReport:
    if not stats:
        raise ValueError("cannot aggregate an empty sequence")
    if ground_truth_top1 is not None and len(ground_truth_top1) != len(stats):
        raise ValueError(
            f"ground truth has {len(ground_truth_top1)} frames, sequence has {len(stats)}"
        )
    base = baseline.total
    rest = [s.macs for s in stats[1:]]
    mean = sum(rest) / len(rest) if rest else None
    reduction = None if mean is None or base == 0 else 1.0 - mean / base

    per_frame = []
    hits = 0
    for i, s in enumerate(stats):
        top1 = s.top1
        per_frame.append(
            {"index": i, "macs": s.macs, "events_per_stage": list(s.events_per_stage), "top1": top1}
        )
        if ground_truth_top1 is not None and top1 == int(ground_truth_top1[i]):
            hits += 1
    match_rate = hits / len(stats) if ground_truth_top1 is not None else None
    return SequenceReport(
        config_id=config_id,
        tau=tau,
        frames=len(stats),
        init_macs=stats[0].macs,
        mean_macs_per_frame=mean,
        baseline_macs_per_frame=base,
        reduction=reduction,
        match_rate=match_rate,
        per_frame=per_frame,
    )
