"""Synthetic long-video environment with planted evidence.

A video is a timeline of unit-norm frame embeddings, each with a handful of
region embeddings. One location (global, segment, frame or region) carries the
evidence for the question; everything else is a distractor whose cosine to the
question stays below ``margin``. Distractors are built by Gram-Schmidt against
the question vector, so their cosines are exact by construction.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Iterable

import numpy as np


class Granularity(enum.IntEnum):
    GLOBAL = 0
    SEGMENT = 1
    FRAME = 2
    REGION = 3


class Reached(enum.IntEnum):
    COARSE = 0
    BROWSED = 1
    SEGMENT_SELECTED = 2
    FRAME_SELECTED = 3
    REGION_SELECTED = 4


class Cue(enum.IntEnum):
    GLOBAL_CUE = 0
    LOCAL_CUE = 1


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class SandboxConfig:
    frame_count: int = 64
    segment_size: int = 8
    dim: int = 16
    regions: int = 4
    choices: int = 4
    margin: float = 0.6
    mix_global: float = 0.25
    mix_segment: float = 0.25
    mix_frame: float = 0.25
    mix_region: float = 0.25

    @property
    def num_segments(self) -> int:
        return self.frame_count // self.segment_size

    @property
    def mix(self) -> tuple[float, float, float, float]:
        return (self.mix_global, self.mix_segment, self.mix_frame, self.mix_region)

    def validate(self) -> None:
        if self.segment_size < 1 or self.frame_count < self.segment_size:
            raise InvalidConfig("frame_count must be at least segment_size >= 1")
        if self.frame_count % self.segment_size:
            raise InvalidConfig(
                f"frame_count {self.frame_count} is not divisible by segment_size {self.segment_size}"
            )
        if self.num_segments < 2:
            raise InvalidConfig("need at least two segments")
        if self.dim < 4:
            raise InvalidConfig(f"dim must be >= 4, got {self.dim}")
        if not 0.0 < self.margin < 0.9:
            raise InvalidConfig(f"margin must lie in (0, 0.9), got {self.margin}")
        if self.regions < 1:
            raise InvalidConfig("regions must be >= 1")
        if self.choices < 2:
            raise InvalidConfig("choices must be >= 2")
        mix = self.mix
        if any(p < 0 for p in mix) or abs(sum(mix) - 1.0) > 1e-9:
            raise InvalidConfig(f"granularity mix must be non-negative and sum to 1, got {mix}")


@dataclass(frozen=True)
class EvidenceSpec:
    granularity: Granularity
    correct_choice: int
    segment: int | None = None
    frame: int | None = None  # global frame index
    region: int | None = None

    def __post_init__(self) -> None:
        need = {
            Granularity.GLOBAL: (False, False, False),
            Granularity.SEGMENT: (True, False, False),
            Granularity.FRAME: (True, True, False),
            Granularity.REGION: (True, True, True),
        }[self.granularity]
        have = (self.segment is not None, self.frame is not None, self.region is not None)
        if need != have:
            raise ValueError(f"{self.granularity.name} evidence has index presence {have}")


@dataclass(frozen=True)
class Question:
    id: str
    query: np.ndarray
    cue: Cue
    choices: int
    video_ref: int  # seed of the video this question is about


@dataclass(frozen=True, eq=False)
class SyntheticVideo:
    seed: int
    config: SandboxConfig
    frames: np.ndarray  # (T, D)
    regions: np.ndarray  # (T, G, D)
    evidence: EvidenceSpec

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SyntheticVideo):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.config == other.config
            and self.evidence == other.evidence
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.regions, other.regions)
        )

    __hash__ = None  # type: ignore[assignment]

    @cached_property
    def segment_means(self) -> np.ndarray:
        cfg = self.config
        return self.frames.reshape(cfg.num_segments, cfg.segment_size, cfg.dim).mean(axis=1)


@dataclass
class ObservationState:
    reached: Reached = Reached.COARSE
    segment: int | None = None
    frame: int | None = None
    region: int | None = None
    evidence_visible: bool = False
    tokens: int = 0
    turn: int = 0

    def copy(self) -> "ObservationState":
        return ObservationState(
            self.reached, self.segment, self.frame, self.region,
            self.evidence_visible, self.tokens, self.turn,
        )

    def snapshot(self) -> dict[str, Any]:
        return {
            "reached": self.reached.name.lower(),
            "segment": self.segment,
            "frame": self.frame,
            "region": self.region,
            "evidence_visible": self.evidence_visible,
            "tokens": self.tokens,
            "turn": self.turn,
        }


# Cosine bands, as fractions of the margin for distractors.
_BACKGROUND = (-0.5, 0.5)
_CONTEXT = (0.55, 0.75)
_ANCHOR = (0.8, 0.95)
_EVIDENCE = (0.92, 0.99)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _at_cosine(q: np.ndarray, c: float, rng: np.random.Generator) -> np.ndarray:
    """Unit vector with cosine exactly ``c`` to unit vector ``q`` (Gram-Schmidt)."""
    u = rng.standard_normal(q.shape[0])
    u -= (u @ q) * q
    u = _unit(u)
    return _unit(c * q + np.sqrt(1.0 - c * c) * u)


def _segment_cosines(means: np.ndarray, q: np.ndarray) -> np.ndarray:
    return (means @ q) / np.linalg.norm(means, axis=1)


def generate_video(
    seed: int,
    config: SandboxConfig | None = None,
    granularity: Granularity | None = None,
) -> tuple[SyntheticVideo, Question]:
    """Build one video and its question. Pure in (seed, config, granularity)."""
    cfg = config or SandboxConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    T, S, D, G, m = cfg.frame_count, cfg.segment_size, cfg.dim, cfg.regions, cfg.margin

    if granularity is None:
        granularity = Granularity(int(rng.choice(4, p=np.asarray(cfg.mix))))
    q = _unit(rng.standard_normal(D))

    def band(lo_hi: tuple[float, float], scale: float = m) -> float:
        lo, hi = lo_hi
        return float(rng.uniform(lo * scale, hi * scale))

    frames = np.stack([_at_cosine(q, band(_BACKGROUND), rng) for _ in range(T)])
    regions = np.stack(
        [np.stack([_at_cosine(q, band(_BACKGROUND), rng) for _ in range(G)]) for _ in range(T)]
    )

    seg = frame = region = None
    if granularity is not Granularity.GLOBAL:
        seg = int(rng.integers(cfg.num_segments))
        span = range(seg * S, (seg + 1) * S)
        if granularity is Granularity.SEGMENT:
            for f in span:
                frames[f] = _at_cosine(q, band(_EVIDENCE, 1.0), rng)
        else:
            frame = seg * S + int(rng.integers(S))
            for f in span:
                frames[f] = _at_cosine(q, band(_CONTEXT), rng)
            if granularity is Granularity.FRAME:
                frames[frame] = _at_cosine(q, band(_EVIDENCE, 1.0), rng)
            else:
                frames[frame] = _at_cosine(q, band(_ANCHOR), rng)
                region = int(rng.integers(G))
                regions[frame, region] = _at_cosine(q, band(_EVIDENCE, 1.0), rng)
        _separate_segments(frames, q, seg, cfg, rng)

    evidence = EvidenceSpec(granularity, int(rng.integers(cfg.choices)), seg, frame, region)
    video = SyntheticVideo(seed, cfg, frames, regions, evidence)
    cue = Cue.GLOBAL_CUE if granularity is Granularity.GLOBAL else Cue.LOCAL_CUE
    return video, Question(f"q{seed}", q, cue, cfg.choices, seed)


def _separate_segments(
    frames: np.ndarray, q: np.ndarray, target: int, cfg: SandboxConfig, rng: np.random.Generator
) -> None:
    # The evidence segment must win segment retrieval by a clear gap; redraw
    # any background segment whose mean happens to point too close to q.
    S, m = cfg.segment_size, cfg.margin
    for _ in range(1000):
        means = frames.reshape(cfg.num_segments, S, cfg.dim).mean(axis=1)
        cos = _segment_cosines(means, q)
        bad = [s for s in range(cfg.num_segments) if s != target and cos[s] >= cos[target] - 0.05]
        if not bad:
            return
        for s in bad:
            for f in range(s * S, (s + 1) * S):
                frames[f] = _at_cosine(q, float(rng.uniform(-0.5 * m, 0.5 * m)), rng)
    raise RuntimeError("could not separate evidence segment from distractors")


def reveal_rule(evidence: EvidenceSpec, obs: ObservationState) -> bool:
    """Whether the current selection exposes the evidence (ignores the latch)."""
    g = evidence.granularity
    if g is Granularity.GLOBAL:
        return obs.reached is Reached.BROWSED
    if g is Granularity.SEGMENT:
        return obs.segment == evidence.segment
    if g is Granularity.FRAME:
        return obs.frame == evidence.frame
    return obs.frame == evidence.frame and obs.region == evidence.region


def judge_answer(
    evidence: EvidenceSpec,
    choices: int,
    choice: int,
    obs: ObservationState,
    guess_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> int:
    if not 0 <= choice < choices:
        raise ValueError(f"choice {choice} outside [0, {choices})")
    if obs.evidence_visible:
        return int(choice == evidence.correct_choice)
    if not guess_mode:
        return 0
    if rng is None:
        raise ValueError("guess mode needs an rng")
    return int(rng.random() < 1.0 / choices)


# -- corpora -----------------------------------------------------------------


@dataclass
class SandboxItem:
    video: SyntheticVideo
    question: Question

    def to_json(self) -> dict[str, Any]:
        v, q, e = self.video, self.question, self.video.evidence
        return {
            "question_id": q.id,
            "seed": v.seed,
            "config": vars(v.config).copy(),
            "cue": q.cue.name.lower(),
            "choices": q.choices,
            "query": q.query.tolist(),
            "evidence": {
                "granularity": e.granularity.name.lower(),
                "correct_choice": e.correct_choice,
                "segment": e.segment,
                "frame": e.frame,
                "region": e.region,
            },
            "frames": v.frames.tolist(),
            "regions": v.regions.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "SandboxItem":
        cfg = SandboxConfig(**d["config"])
        e = d["evidence"]
        evidence = EvidenceSpec(
            Granularity[e["granularity"].upper()], e["correct_choice"], e["segment"], e["frame"], e["region"]
        )
        video = SyntheticVideo(
            d["seed"], cfg, np.asarray(d["frames"], dtype=float), np.asarray(d["regions"], dtype=float), evidence
        )
        q = Question(d["question_id"], np.asarray(d["query"], dtype=float), Cue[d["cue"].upper()], d["choices"], d["seed"])
        return cls(video, q)


def allocate_mix(count: int, mix: Iterable[float]) -> list[int]:
    """Largest-remainder allocation of ``count`` items to proportions ``mix``."""
    mix = list(mix)
    raw = [p * count for p in mix]
    base = [int(np.floor(r)) for r in raw]
    short = count - sum(base)
    order = sorted(range(len(mix)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def video_seed(base_seed: int, index: int) -> int:
    return base_seed * 1_000_003 + index


def generate_corpus(count: int, seed: int, config: SandboxConfig | None = None) -> list[SandboxItem]:
    """``count`` items whose granularity counts match the configured mix exactly."""
    cfg = config or SandboxConfig()
    cfg.validate()
    if count < 1:
        raise ValueError("count must be >= 1")
    counts = allocate_mix(count, cfg.mix)
    labels = [Granularity(g) for g, n in enumerate(counts) for _ in range(n)]
    np.random.default_rng(seed).shuffle(labels)
    items = []
    for i, g in enumerate(labels):
        video, question = generate_video(video_seed(seed, i), cfg, g)
        items.append(SandboxItem(video, question))
    return items


def write_corpus(path, items: Iterable[SandboxItem]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_corpus(path) -> list[SandboxItem]:
    with open(path, encoding="utf-8") as fh:
        return [SandboxItem.from_json(json.loads(line)) for line in fh if line.strip()]


def corpus_stats(items: list[SandboxItem]) -> dict[str, Any]:
    """Granularity mix and the spread of distractor/evidence cosines."""
    mix = {g.name.lower(): 0 for g in Granularity}
    distractor_max = []
    evidence_min = []
    for item in items:
        v, q = item.video, item.question.query
        mix[v.evidence.granularity.name.lower()] += 1
        mask_f, mask_r = evidence_masks(v)
        cf = v.frames @ q
        cr = v.regions @ q
        distractor_max.append(float(max(cf[~mask_f].max(), cr[~mask_r].max())))
        ev = np.concatenate([cf[mask_f], cr[mask_r]])
        if ev.size:
            evidence_min.append(float(ev.min()))
    return {
        "count": len(items),
        "granularity_mix": mix,
        "distractor_cos_max": {
            "min": min(distractor_max), "mean": float(np.mean(distractor_max)), "max": max(distractor_max)
        },
        "evidence_cos_min": (
            None if not evidence_min else
            {"min": min(evidence_min), "mean": float(np.mean(evidence_min)), "max": max(evidence_min)}
        ),
    }


def evidence_masks(video: SyntheticVideo) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks over frames (T,) and regions (T, G) marking evidence-bearing embeddings."""
    cfg, e = video.config, video.evidence
    mf = np.zeros(cfg.frame_count, dtype=bool)
    mr = np.zeros((cfg.frame_count, cfg.regions), dtype=bool)
    if e.granularity is Granularity.SEGMENT:
        mf[e.segment * cfg.segment_size:(e.segment + 1) * cfg.segment_size] = True
    elif e.granularity is Granularity.FRAME:
        mf[e.frame] = True
    elif e.granularity is Granularity.REGION:
        mr[e.frame, e.region] = True
    return mf, mr
