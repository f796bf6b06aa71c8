"""Seeded synthetic corpora with known latent view-switch rules.

Videos are generated step by step on the prediction-interval grid: each step
holds one view, cue rules or a baseline hazard decide the next view, and
"echo" channels announce the upcoming view through next-narration tokens,
previous-narration tokens, or a visual precursor added to the closing frames
of the previous step.  Features are per-view centroids plus Gaussian noise, so
the optimal achievable accuracy is known analytically for each grammar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, asdict
from enum import Enum
from typing import Sequence

import numpy as np

from .data import (
    NarrationSegment,
    VideoRecord,
    ViewKind,
    ViewLabel,
    ViewSpan,
)
from .errors import DegenerateGrammarError
from .metrics import AnnotationInstance


class CueChannel(str, Enum):
    NEXT_NARRATION = "next_narration"
    PAST_NARRATION = "past_narration"
    FRAMES = "frames"


@dataclass(frozen=True)
class CueRule:
    """When fired, sets the upcoming view and injects tokens into the next narration."""

    tokens: tuple[str, ...]
    target: ViewKind
    fire_prob: float


@dataclass(frozen=True)
class EchoCue:
    """Announces the resolved upcoming view through one channel with some probability."""

    channel: CueChannel
    announce_prob: float
    ego_tokens: tuple[str, ...] = ()
    exo_tokens: tuple[str, ...] = ()


def _default_vocab() -> tuple[str, ...]:
    return tuple(f"word{i:02d}" for i in range(64))


@dataclass(frozen=True)
class SwitchGrammar:
    """Latent switching process plus the feature/narration emission model."""

    cue_rules: tuple[CueRule, ...] = ()
    echo_cues: tuple[EchoCue, ...] = ()
    hazard: float = 0.15
    feature_dim: int = 16
    centroid_scale: float = 1.0
    noise_scale: float = 0.1
    narration_vocab: tuple[str, ...] = field(default_factory=_default_vocab)
    tokens_per_narration: int = 5
    video_steps: int = 30
    delta_s: float = 2.0
    fps: float = 4.0
    boundary_noise: float = 0.0
    boundary_jitter_s: float = 0.0
    precursor_window_s: float = 1.0
    precursor_scale: float = 1.0
    scenarios: tuple[str, ...] = ("cooking", "knitting", "repair")

    def __post_init__(self) -> None:
        if not self.narration_vocab:
            raise DegenerateGrammarError("empty narration vocabulary")
        probs = [self.hazard, self.boundary_noise]
        probs += [r.fire_prob for r in self.cue_rules]
        probs += [e.announce_prob for e in self.echo_cues]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise DegenerateGrammarError("probabilities must lie in [0, 1]")
        if self.centroid_scale <= 0:
            raise DegenerateGrammarError("view centroids must be distinct")
        if self.video_steps < 2:
            raise DegenerateGrammarError("need at least two steps per video")
        if self.delta_s <= 0.3:
            raise DegenerateGrammarError("delta_s too small for narration margins")
        if self.boundary_jitter_s > self.delta_s / 2:
            raise DegenerateGrammarError("boundary jitter must stay below delta/2")
        if abs(self.delta_s * self.fps - round(self.delta_s * self.fps)) > 1e-9:
            raise DegenerateGrammarError("delta_s * fps must be integral")

    @property
    def ego_centroid(self) -> np.ndarray:
        return np.full(self.feature_dim, self.centroid_scale)

    @property
    def exo_centroid(self) -> np.ndarray:
        return np.full(self.feature_dim, -self.centroid_scale)

    @property
    def precursor_vector(self) -> np.ndarray:
        # Alternating signs: orthogonal to the ego-exo axis (constant vector).
        signs = np.where(np.arange(self.feature_dim) % 2 == 0, 1.0, -1.0)
        return signs * self.precursor_scale

    @property
    def video_duration_s(self) -> float:
        return self.video_steps * self.delta_s


_NARR_MARGIN_S = 0.1


def _resolve_views(grammar: SwitchGrammar, rng: np.random.Generator):
    """Per-step views plus token/precursor injections decided by rules and echoes."""
    K = grammar.video_steps
    views: list[ViewKind] = [ViewKind.EGO if rng.random() < 0.5 else ViewKind.EXO]
    narration_extras: list[list[str]] = [[] for _ in range(K)]
    precursor_signs: dict[int, float] = {}
    for k in range(1, K):
        fired: CueRule | None = None
        for rule in grammar.cue_rules:
            if rng.random() < rule.fire_prob:
                fired = rule
                break
        if fired is not None:
            view = fired.target
            narration_extras[k].extend(fired.tokens)
        else:
            if rng.random() < grammar.hazard:
                view = views[k - 1].flipped()
            else:
                view = views[k - 1]
        views.append(view)
        for echo in grammar.echo_cues:
            if rng.random() >= echo.announce_prob:
                continue
            tokens = echo.ego_tokens if view == ViewKind.EGO else echo.exo_tokens
            if echo.channel == CueChannel.NEXT_NARRATION:
                narration_extras[k].extend(tokens)
            elif echo.channel == CueChannel.PAST_NARRATION:
                narration_extras[k - 1].extend(tokens)
            else:  # FRAMES: visual precursor at the tail of the previous step
                precursor_signs[k] = 1.0 if view == ViewKind.EGO else -1.0
    return views, narration_extras, precursor_signs


def _view_track(grammar: SwitchGrammar, views: Sequence[ViewKind], rng: np.random.Generator) -> list[ViewSpan]:
    delta = grammar.delta_s
    change_times: list[tuple[float, ViewKind]] = []
    for k in range(1, len(views)):
        if views[k] != views[k - 1]:
            jitter = rng.uniform(0.0, grammar.boundary_jitter_s) if grammar.boundary_jitter_s > 0 else 0.0
            change_times.append((k * delta + jitter, views[k]))
    spans: list[ViewSpan] = []
    begin, kind = 0.0, views[0]
    for t, new_kind in change_times:
        spans.append(ViewSpan(begin, t, ViewLabel(kind, 1.0)))
        begin, kind = t, new_kind
    spans.append(ViewSpan(begin, grammar.video_duration_s, ViewLabel(kind, 1.0)))
    return spans


def generate_video(
    grammar: SwitchGrammar,
    video_id: str,
    rng: np.random.Generator,
    scenario: str | None = None,
    multiview: bool = False,
) -> VideoRecord:
    views, extras, precursor_signs = _resolve_views(grammar, rng)
    track = _view_track(grammar, views, rng)

    delta = grammar.delta_s
    narrations: list[NarrationSegment] = []
    for k in range(grammar.video_steps):
        n_bg = grammar.tokens_per_narration
        tokens = list(rng.choice(grammar.narration_vocab, size=n_bg)) + extras[k]
        rng.shuffle(tokens)
        narrations.append(
            NarrationSegment(
                text=" ".join(tokens),
                begin_s=k * delta + _NARR_MARGIN_S,
                end_s=(k + 1) * delta - _NARR_MARGIN_S,
            )
        )

    n_frames = int(round(grammar.video_duration_s * grammar.fps))
    times = np.arange(n_frames) / grammar.fps
    record_stub = VideoRecord(
        video_id=video_id,
        duration_s=grammar.video_duration_s,
        fps=grammar.fps,
        frame_features=np.zeros((n_frames, grammar.feature_dim), dtype=np.float32),
        view_track=track,
    )
    is_ego = np.array(
        [record_stub.view_at(t).kind == ViewKind.EGO for t in times], dtype=bool
    )

    offsets = np.zeros((n_frames, grammar.feature_dim))
    for k, sign in precursor_signs.items():
        lo = k * delta - grammar.precursor_window_s
        mask = (times >= lo - 1e-9) & (times < k * delta - 1e-9)
        offsets[mask] += sign * grammar.precursor_vector

    centroids = np.where(is_ego[:, None], grammar.ego_centroid, grammar.exo_centroid)
    if multiview:
        ego_rows = grammar.ego_centroid + rng.normal(0.0, grammar.noise_scale, (n_frames, grammar.feature_dim)) + offsets
        exo_rows = grammar.exo_centroid + rng.normal(0.0, grammar.noise_scale, (n_frames, grammar.feature_dim)) + offsets
        frame_features = np.where(is_ego[:, None], ego_rows, exo_rows)
        ego_f = ego_rows.astype(np.float32)
        exo_f = exo_rows.astype(np.float32)
    else:
        frame_features = centroids + rng.normal(0.0, grammar.noise_scale, (n_frames, grammar.feature_dim)) + offsets
        ego_f = exo_f = None

    record = VideoRecord(
        video_id=video_id,
        duration_s=grammar.video_duration_s,
        fps=grammar.fps,
        frame_features=frame_features.astype(np.float32),
        narrations=narrations,
        view_track=track,
        scenario=scenario,
        ego_features=ego_f,
        exo_features=exo_f,
    )
    record.validate()
    return record


class CentroidClipClassifier:
    """Oracle clip classifier: per-frame nearest centroid, averaged over the clip.

    ``flip_prob`` models classification failures concentrated at shot
    boundaries: only clips containing frames from both views can be flipped.
    With ``flip_prob`` 0 the oracle classifies every clip correctly.
    """

    def __init__(
        self,
        ego_centroid: np.ndarray,
        exo_centroid: np.ndarray,
        flip_prob: float = 0.0,
        seed: int = 0,
        clip_len_s: float = 2.0,
    ) -> None:
        self.ego_centroid = np.asarray(ego_centroid, dtype=float)
        self.exo_centroid = np.asarray(exo_centroid, dtype=float)
        self.flip_prob = float(flip_prob)
        self.seed = int(seed)
        self.clip_len_s = float(clip_len_s)
        self._rng = np.random.default_rng(seed)
        # Safe for concurrent calls only when no RNG state is consumed.
        self.concurrent_safe = self.flip_prob == 0.0

    def classify(self, clip_features: np.ndarray) -> float:
        feats = np.asarray(clip_features, dtype=float)
        d_ego = np.linalg.norm(feats - self.ego_centroid, axis=1)
        d_exo = np.linalg.norm(feats - self.exo_centroid, axis=1)
        frac = float(np.mean(d_ego < d_exo))
        if 0.0 < frac < 1.0 and self.flip_prob > 0.0 and self._rng.random() < self.flip_prob:
            frac = 1.0 - frac
        return frac

    def to_dict(self) -> dict:
        return {
            "ego_centroid": self.ego_centroid.tolist(),
            "exo_centroid": self.exo_centroid.tolist(),
            "flip_prob": self.flip_prob,
            "seed": self.seed,
            "clip_len_s": self.clip_len_s,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CentroidClipClassifier":
        return cls(
            ego_centroid=np.asarray(obj["ego_centroid"]),
            exo_centroid=np.asarray(obj["exo_centroid"]),
            flip_prob=float(obj["flip_prob"]),
            seed=int(obj["seed"]),
            clip_len_s=float(obj["clip_len_s"]),
        )


def generate_corpus(
    grammar: SwitchGrammar,
    n_videos: int,
    seed: int,
    multiview: bool = False,
) -> tuple[list[VideoRecord], CentroidClipClassifier]:
    """Generate ``n_videos`` seeded records plus the matching oracle classifier.

    Each video uses an independent child stream of ``seed``, so generation is
    reproducible per video and safe to parallelize.
    """
    if n_videos < 1:
        raise DegenerateGrammarError("n_videos must be >= 1")
    records = []
    for v in range(n_videos):
        rng = np.random.default_rng([seed, v])
        scenario = grammar.scenarios[v % len(grammar.scenarios)] if grammar.scenarios else None
        records.append(
            generate_video(grammar, f"synth{v:04d}", rng, scenario=scenario, multiview=multiview)
        )
    oracle = CentroidClipClassifier(
        ego_centroid=grammar.ego_centroid,
        exo_centroid=grammar.exo_centroid,
        flip_prob=grammar.boundary_noise,
        seed=seed + 1,
        clip_len_s=2.0,
    )
    return records, oracle


def simulate_annotator_votes(
    true_kinds: Sequence[ViewKind],
    n_annotators: int = 9,
    error_prob: float = 0.15,
    seed: int = 0,
    instance_ids: Sequence[str] | None = None,
) -> list[AnnotationInstance]:
    """Simulate per-annotator votes: the true kind, flipped independently per rater."""
    rng = np.random.default_rng(seed)
    out = []
    for i, kind in enumerate(true_kinds):
        votes = tuple(
            kind.flipped() if rng.random() < error_prob else kind
            for _ in range(n_annotators)
        )
        iid = instance_ids[i] if instance_ids is not None else f"inst{i:05d}"
        out.append(AnnotationInstance(instance_id=iid, votes=votes))
    return out


# ---------------------------------------------------------------------------
# Presets and (de)serialization
# ---------------------------------------------------------------------------


def deterministic_cue_grammar(**overrides) -> SwitchGrammar:
    """Every step's view is announced by a token in the overlapping narration."""
    defaults = dict(
        cue_rules=(
            CueRule(tokens=("closer",), target=ViewKind.EGO, fire_prob=0.5),
            CueRule(tokens=("wide",), target=ViewKind.EXO, fire_prob=1.0),
        ),
        hazard=0.0,
    )
    defaults.update(overrides)
    return SwitchGrammar(**defaults)


def hazard_grammar(hazard: float = 0.3, **overrides) -> SwitchGrammar:
    """No cues: views follow a per-step switching hazard only."""
    return SwitchGrammar(hazard=hazard, **overrides)


def three_channel_grammar(announce_prob: float = 0.6, **overrides) -> SwitchGrammar:
    """Fair-coin views announced independently via frames, past, and next narrations."""
    defaults = dict(
        cue_rules=(
            CueRule(tokens=(), target=ViewKind.EGO, fire_prob=0.5),
            CueRule(tokens=(), target=ViewKind.EXO, fire_prob=1.0),
        ),
        echo_cues=(
            EchoCue(CueChannel.NEXT_NARRATION, announce_prob, ("soonclose",), ("soonwide",)),
            EchoCue(CueChannel.PAST_NARRATION, announce_prob, ("hintclose",), ("hintwide",)),
            EchoCue(CueChannel.FRAMES, announce_prob),
        ),
        hazard=0.0,
    )
    defaults.update(overrides)
    return SwitchGrammar(**defaults)


def jittered_boundary_grammar(
    boundary_noise: float = 0.2, boundary_jitter_s: float = 0.9, **overrides
) -> SwitchGrammar:
    """Switch boundaries fall off the clip grid; oracle errs on straddling clips."""
    return SwitchGrammar(
        hazard=0.35,
        boundary_noise=boundary_noise,
        boundary_jitter_s=boundary_jitter_s,
        **overrides,
    )


GRAMMAR_PRESETS = {
    "deterministic-cue": deterministic_cue_grammar,
    "hazard": hazard_grammar,
    "three-channel": three_channel_grammar,
    "jittered": jittered_boundary_grammar,
}


def grammar_to_dict(grammar: SwitchGrammar) -> dict:
    obj = asdict(grammar)
    obj["cue_rules"] = [
        {"tokens": list(r.tokens), "target": r.target.value, "fire_prob": r.fire_prob}
        for r in grammar.cue_rules
    ]
    obj["echo_cues"] = [
        {
            "channel": e.channel.value,
            "announce_prob": e.announce_prob,
            "ego_tokens": list(e.ego_tokens),
            "exo_tokens": list(e.exo_tokens),
        }
        for e in grammar.echo_cues
    ]
    obj["narration_vocab"] = list(grammar.narration_vocab)
    obj["scenarios"] = list(grammar.scenarios)
    return obj


def grammar_from_dict(obj: dict) -> SwitchGrammar:
    known = {f.name for f in fields(SwitchGrammar)}
    unknown = set(obj) - known
    if unknown:
        raise DegenerateGrammarError(f"unknown grammar keys {sorted(unknown)}")
    kwargs = dict(obj)
    kwargs["cue_rules"] = tuple(
        CueRule(tuple(r["tokens"]), ViewKind(r["target"]), float(r["fire_prob"]))
        for r in obj.get("cue_rules", [])
    )
    kwargs["echo_cues"] = tuple(
        EchoCue(
            CueChannel(e["channel"]),
            float(e["announce_prob"]),
            tuple(e.get("ego_tokens", [])),
            tuple(e.get("exo_tokens", [])),
        )
        for e in obj.get("echo_cues", [])
    )
    if "narration_vocab" in obj:
        kwargs["narration_vocab"] = tuple(obj["narration_vocab"])
    if "scenarios" in obj:
        kwargs["scenarios"] = tuple(obj["scenarios"])
    return SwitchGrammar(**kwargs)


def load_grammar(path) -> SwitchGrammar:
    with open(path, "r", encoding="utf-8") as fh:
        return grammar_from_dict(json.load(fh))
