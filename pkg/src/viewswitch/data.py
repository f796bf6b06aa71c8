"""Corpus data types, on-disk manifest/feature formats, and windowed sample extraction.

A corpus is a JSONL manifest in which each line describes one narrated video and
points at a binary feature file holding its per-frame features.  Samples for the
view prediction models are cut out of records with :func:`extract_sample`.

All types are immutable after construction and all operations are pure, so they
are safe to use from concurrent workers.
"""

from __future__ import annotations

import bisect
import json
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyNarrationIntervalError,
    FeatureIOError,
    InsufficientContextError,
    ManifestParseError,
    RecordValidationError,
    UnlabeledTargetError,
)

FEATURE_MAGIC = b"SWAVFT01"

# Small slack for comparing timestamps that went through float arithmetic.
_TIME_EPS = 1e-6


class ViewKind(str, Enum):
    EGO = "ego"
    EXO = "exo"

    def flipped(self) -> "ViewKind":
        return ViewKind.EXO if self is ViewKind.EGO else ViewKind.EGO


#: Ties between ego and exo resolve to the wide "default" shot of edited how-tos.
TIE_BREAK_KIND = ViewKind.EXO


@dataclass(frozen=True)
class ViewLabel:
    """A view kind plus the confidence that the kind is correct (1.0 for manual labels)."""

    kind: ViewKind
    probability: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise RecordValidationError(
                f"view label probability {self.probability} outside [0, 1]"
            )


@dataclass(frozen=True)
class NarrationSegment:
    """One transcribed speech segment with its time extent in seconds."""

    text: str
    begin_s: float
    end_s: float

    def __post_init__(self) -> None:
        if not self.end_s > self.begin_s:
            raise RecordValidationError(
                f"narration end {self.end_s} must exceed begin {self.begin_s}"
            )

    @property
    def mean_s(self) -> float:
        return 0.5 * (self.begin_s + self.end_s)


@dataclass(frozen=True)
class ViewSpan:
    """A labeled stretch of the timeline: [begin_s, end_s) shows one view."""

    begin_s: float
    end_s: float
    label: ViewLabel


@dataclass(eq=False)
class VideoRecord:
    """One narrated video: frame features, timed narrations, optional view track.

    ``view_track`` holds either manual ground truth or pseudo-labels; when
    present it must partition [0, duration_s) with no gaps or overlaps.
    ``ego_features``/``exo_features`` are optional synchronized candidate
    streams used by multi-view corpora (selector training / evaluation).
    """

    video_id: str
    duration_s: float
    fps: float
    frame_features: np.ndarray
    narrations: list[NarrationSegment] = field(default_factory=list)
    view_track: list[ViewSpan] | None = None
    scenario: str | None = None
    ego_features: np.ndarray | None = None
    exo_features: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return int(self.frame_features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.frame_features.shape[1])

    def frame_time(self, index: int) -> float:
        return index / self.fps

    def frame_index(self, time_s: float) -> int:
        """Index of the frame covering ``time_s``, clamped to the valid range."""
        idx = int(math.floor(time_s * self.fps + _TIME_EPS))
        return min(max(idx, 0), self.num_frames - 1)

    def view_at(self, time_s: float) -> ViewLabel | None:
        """Label of the half-open span [begin, end) covering ``time_s``, else None."""
        track = self.view_track
        if track is None:
            return None
        begins = self.__dict__.get("_track_begins")
        if begins is None or len(begins) != len(track):
            begins = [s.begin_s for s in track]
            self.__dict__["_track_begins"] = begins
        i = bisect.bisect_right(begins, time_s + _TIME_EPS) - 1
        if i < 0:
            return None
        span = track[i]
        if time_s < span.end_s - _TIME_EPS:
            return span.label
        return None

    def frame_range(self, begin_s: float, end_s: float, closed_end: bool) -> range:
        """Indices of frames whose time lies in [begin_s, end_s) or [begin_s, end_s]."""
        lo = max(0, math.ceil((begin_s - _TIME_EPS) * self.fps))
        if closed_end:
            hi = math.floor((end_s + _TIME_EPS) * self.fps)
        else:
            hi = math.ceil((end_s - _TIME_EPS) * self.fps) - 1
        hi = min(hi, self.num_frames - 1)
        return range(lo, hi + 1)

    def with_view_track(self, track: list[ViewSpan]) -> "VideoRecord":
        rec = replace(self, view_track=list(track))
        rec.validate()
        return rec

    def validate(self) -> None:
        vid = self.video_id
        if self.duration_s <= 0:
            raise RecordValidationError(f"{vid}: duration_s must be positive")
        if self.fps <= 0:
            raise RecordValidationError(f"{vid}: fps must be positive")
        if self.frame_features.ndim != 2:
            raise RecordValidationError(f"{vid}: frame_features must be 2-D")
        expected = math.floor(self.duration_s * self.fps)
        if abs(self.num_frames - expected) > 1:
            raise RecordValidationError(
                f"{vid}: {self.num_frames} frames but duration*fps gives {expected}"
            )
        last_begin = -math.inf
        for seg in self.narrations:
            if seg.begin_s < 0:
                raise RecordValidationError(f"{vid}: narration begin_s < 0")
            if seg.begin_s < last_begin:
                raise RecordValidationError(f"{vid}: narrations not sorted by begin_s")
            last_begin = seg.begin_s
        if self.view_track is not None:
            self._validate_track(self.view_track)
        for name, stream in (("ego", self.ego_features), ("exo", self.exo_features)):
            if stream is not None and stream.shape != self.frame_features.shape:
                raise RecordValidationError(
                    f"{vid}: {name}_features shape {stream.shape} does not match frames"
                )

    def _validate_track(self, track: list[ViewSpan]) -> None:
        vid = self.video_id
        if not track:
            raise RecordValidationError(f"{vid}: empty view track")
        if abs(track[0].begin_s) > _TIME_EPS:
            raise RecordValidationError(f"{vid}: view track does not start at 0")
        for prev, cur in zip(track, track[1:]):
            if abs(cur.begin_s - prev.end_s) > _TIME_EPS:
                raise RecordValidationError(
                    f"{vid}: view track gap/overlap at {prev.end_s}..{cur.begin_s}"
                )
        if abs(track[-1].end_s - self.duration_s) > _TIME_EPS:
            raise RecordValidationError(
                f"{vid}: view track ends at {track[-1].end_s}, not duration"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VideoRecord):
            return NotImplemented

        def arr_eq(a: np.ndarray | None, b: np.ndarray | None) -> bool:
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.array_equal(a, b))

        return (
            self.video_id == other.video_id
            and self.duration_s == other.duration_s
            and self.fps == other.fps
            and arr_eq(self.frame_features, other.frame_features)
            and self.narrations == other.narrations
            and self.view_track == other.view_track
            and self.scenario == other.scenario
            and arr_eq(self.ego_features, other.ego_features)
            and arr_eq(self.exo_features, other.exo_features)
        )


@dataclass(frozen=True)
class WindowConfig:
    """Windowing used to cut prediction samples out of a record.

    ``past_frames_s`` and ``past_narrations_s`` bound the visual and spoken
    context, ``delta_s`` is the prediction interval length, and ``frame_rate``
    is the grid at which past/candidate frames are sampled.
    """

    past_frames_s: float = 8.0
    past_narrations_s: float = 32.0
    delta_s: float = 2.0
    frame_rate: float = 4.0

    def __post_init__(self) -> None:
        for name in ("past_frames_s", "past_narrations_s", "delta_s", "frame_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def max_past_frames(self) -> int:
        return int(round(self.past_frames_s * self.frame_rate))

    @property
    def candidate_frames(self) -> int:
        return int(round(self.delta_s * self.frame_rate))


@dataclass(eq=False)
class Sample:
    """One prediction instance: past context at time ``t`` plus the target view.

    All times are relative to the begin time of the earliest included past
    narration (window start if there is none).  Relative frame times may be
    negative when a frame precedes that narration; encoders clamp them.
    """

    video_id: str
    t: float
    delta: float
    past_frame_features: np.ndarray
    past_frame_views: list[ViewLabel]
    past_frame_times: list[float]
    past_narrations: list[tuple[NarrationSegment, ViewLabel, float]]
    next_narration: tuple[str, float]
    target: ViewLabel
    scenario: str | None = None

    @property
    def is_switch(self) -> bool:
        """Derived, never stored: the target differs from the most recent past view."""
        return self.target.kind != self.past_frame_views[-1].kind

    @property
    def next_text(self) -> str:
        return self.next_narration[0]


@dataclass(eq=False)
class SelectorSample:
    """A Sample extended with synchronized candidate frames from both views."""

    base: Sample
    ego_candidate_features: np.ndarray
    exo_candidate_features: np.ndarray

    def __post_init__(self) -> None:
        if self.ego_candidate_features.shape[0] == 0:
            raise RecordValidationError("empty ego candidate stream")
        if self.ego_candidate_features.shape != self.exo_candidate_features.shape:
            raise RecordValidationError(
                "candidate streams must be time-synchronized with equal length"
            )

    @property
    def is_switch(self) -> bool:
        return self.base.is_switch

    @property
    def scenario(self) -> str | None:
        return self.base.scenario


# ---------------------------------------------------------------------------
# Binary feature file format
# ---------------------------------------------------------------------------
#
# Little-endian: 8-byte magic "SWAVFT01", u32 row count, u32 dim, then
# row-major float32 payload.  Round-trips must be bit-exact.


def write_features(path: str | Path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("feature array must be 2-D")
    rows, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", rows, dim))
        fh.write(arr.tobytes(order="C"))


def read_features(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FEATURE_MAGIC:
        raise FeatureIOError(f"{path}: bad magic, not a feature file")
    if len(blob) < 16:
        raise FeatureIOError(f"{path}: truncated header")
    rows, dim = struct.unpack("<II", blob[8:16])
    payload = blob[16:]
    if len(payload) != rows * dim * 4:
        raise FeatureIOError(
            f"{path}: payload has {len(payload)} bytes, expected {rows * dim * 4}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(rows, dim)
    return arr.copy()


# ---------------------------------------------------------------------------
# JSONL manifest
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = {
    "video_id",
    "duration_s",
    "fps",
    "features",
    "narrations",
    "views",
    "scenario",
    "ego_features",
    "exo_features",
}


def _parse_views(raw: list[dict]) -> list[ViewSpan]:
    return [
        ViewSpan(
            begin_s=float(v["begin_s"]),
            end_s=float(v["end_s"]),
            label=ViewLabel(ViewKind(v["kind"]), float(v.get("prob", 1.0))),
        )
        for v in raw
    ]


def load_manifest(path: str | Path) -> list[VideoRecord]:
    """Load a JSONL manifest into validated records.

    Feature paths are resolved relative to the manifest's directory.  Raises
    :class:`ManifestParseError` (naming the line), :class:`FeatureIOError`
    (naming the video_id), or :class:`RecordValidationError` (naming the
    video_id).  Mixed feature dimensionalities across the corpus are rejected.
    """
    path = Path(path)
    base = path.parent
    records: list[VideoRecord] = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ManifestParseError(f"cannot open manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise ManifestParseError(f"line {lineno}: expected a JSON object")
        unknown = set(obj) - _MANIFEST_KEYS
        if unknown:
            raise ManifestParseError(f"line {lineno}: unknown keys {sorted(unknown)}")
        try:
            video_id = str(obj["video_id"])
            duration_s = float(obj["duration_s"])
            fps = float(obj["fps"])
            features_rel = str(obj["features"])
            narrations = [
                NarrationSegment(str(n["text"]), float(n["begin_s"]), float(n["end_s"]))
                for n in obj.get("narrations", [])
            ]
            views = _parse_views(obj["views"]) if obj.get("views") is not None else None
            scenario = obj.get("scenario")
        except RecordValidationError as exc:
            raise RecordValidationError(f"{obj.get('video_id', '?')}: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestParseError(f"line {lineno}: malformed record ({exc})") from exc

        def _load_stream(key: str) -> np.ndarray | None:
            rel = obj.get(key)
            if rel is None:
                return None
            try:
                return read_features(base / str(rel))
            except OSError as exc:
                raise FeatureIOError(f"{video_id}: cannot read {key} ({exc})") from exc

        try:
            frame_features = read_features(base / features_rel)
        except OSError as exc:
            raise FeatureIOError(
                f"{video_id}: cannot read feature file {features_rel} ({exc})"
            ) from exc
        record = VideoRecord(
            video_id=video_id,
            duration_s=duration_s,
            fps=fps,
            frame_features=frame_features,
            narrations=narrations,
            view_track=views,
            scenario=scenario,
            ego_features=_load_stream("ego_features"),
            exo_features=_load_stream("exo_features"),
        )
        try:
            record.validate()
        except RecordValidationError:
            raise
        records.append(record)

    dims = {r.feature_dim for r in records}
    if len(dims) > 1:
        raise RecordValidationError(
            f"corpus mixes feature dimensionalities {sorted(dims)}"
        )
    return records


def write_manifest(
    records: Sequence[VideoRecord],
    path: str | Path,
    features_dirname: str = "features",
) -> Path:
    """Write records as a JSONL manifest plus binary feature files.

    Feature files land in ``<manifest dir>/<features_dirname>/<video_id>.swavft``
    (candidate streams get ``.ego``/``.exo`` infixes).  The output loads back
    to records equal to the input.
    """
    path = Path(path)
    feat_dir = path.parent / features_dirname
    feat_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            rel = f"{features_dirname}/{rec.video_id}.swavft"
            write_features(path.parent / rel, rec.frame_features)
            obj: dict = {
                "video_id": rec.video_id,
                "duration_s": rec.duration_s,
                "fps": rec.fps,
                "features": rel,
                "narrations": [
                    {"text": n.text, "begin_s": n.begin_s, "end_s": n.end_s}
                    for n in rec.narrations
                ],
            }
            if rec.view_track is not None:
                obj["views"] = [
                    {
                        "begin_s": s.begin_s,
                        "end_s": s.end_s,
                        "kind": s.label.kind.value,
                        "prob": s.label.probability,
                    }
                    for s in rec.view_track
                ]
            if rec.scenario is not None:
                obj["scenario"] = rec.scenario
            for name, stream in (("ego", rec.ego_features), ("exo", rec.exo_features)):
                if stream is not None:
                    srel = f"{features_dirname}/{rec.video_id}.{name}.swavft"
                    write_features(path.parent / srel, stream)
                    obj[f"{name}_features"] = srel
            fh.write(json.dumps(obj) + "\n")
    return path


# ---------------------------------------------------------------------------
# Sample extraction
# ---------------------------------------------------------------------------


def narration_view(record: VideoRecord, seg: NarrationSegment) -> ViewLabel:
    """The dominant view over a narration's interval, by per-view frame count.

    Frames at times in [begin_s, end_s] vote with their view kind; ties break
    to :data:`TIE_BREAK_KIND`.  The returned probability is the winning share.
    """
    counts = {ViewKind.EGO: 0, ViewKind.EXO: 0}
    total = 0
    for idx in record.frame_range(seg.begin_s, seg.end_s, closed_end=True):
        label = record.view_at(record.frame_time(idx))
        if label is None:
            continue
        counts[label.kind] += 1
        total += 1
    if total == 0:
        raise EmptyNarrationIntervalError(
            f"{record.video_id}: empty narration interval "
            f"[{seg.begin_s}, {seg.end_s}]"
        )
    return _majority_label(counts, total)


def _majority_label(counts: dict[ViewKind, int], total: int) -> ViewLabel:
    if counts[ViewKind.EGO] > counts[ViewKind.EXO]:
        kind = ViewKind.EGO
    elif counts[ViewKind.EXO] > counts[ViewKind.EGO]:
        kind = ViewKind.EXO
    else:
        kind = TIE_BREAK_KIND
    return ViewLabel(kind, counts[kind] / total)


def _overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def extract_sample(record: VideoRecord, t: float, cfg: WindowConfig) -> Sample:
    """Cut the prediction sample at time ``t`` out of ``record``.

    Past frames sit on the fixed grid t - k/frame_rate (k = 1..past window),
    clipped at the start of the video.  Past narrations are every segment
    intersecting [t - past_narrations_s, t); the next narration is the segment
    with the largest overlap with (t, t + delta], empty text if none.  All
    times are re-expressed relative to the earliest included past narration's
    begin time (window start when there is no past narration).  The target is
    the majority view over frames in (t, t + delta], ties to EXO.
    """
    if record.view_track is None:
        raise UnlabeledTargetError(f"{record.video_id}: record has no view track")

    # Past frame grid, oldest first.
    times: list[float] = []
    for k in range(cfg.max_past_frames, 0, -1):
        s = t - k / cfg.frame_rate
        if s >= -_TIME_EPS:
            times.append(max(s, 0.0))
    if not times:
        raise InsufficientContextError(
            f"{record.video_id}: no past frames available at t={t}"
        )

    rows = np.stack([record.frame_features[record.frame_index(s)] for s in times])
    views: list[ViewLabel] = []
    for s in times:
        label = record.view_at(s)
        if label is None:
            raise UnlabeledTargetError(
                f"{record.video_id}: no view label at past frame time {s}"
            )
        views.append(label)

    # Narration windows.
    past_segs = [
        seg
        for seg in record.narrations
        if seg.begin_s < t - _TIME_EPS and seg.end_s > t - cfg.past_narrations_s + _TIME_EPS
    ]
    next_candidates = [
        (seg, _overlap(seg.begin_s, seg.end_s, t, t + cfg.delta_s))
        for seg in record.narrations
    ]
    next_candidates = [(seg, ov) for seg, ov in next_candidates if ov > _TIME_EPS]
    if next_candidates:
        # Greatest overlap wins; ties go to the earlier segment.
        next_seg = max(next_candidates, key=lambda p: (p[1], -p[0].begin_s))[0]
    else:
        next_seg = None

    origin = min(s.begin_s for s in past_segs) if past_segs else max(0.0, t - cfg.past_narrations_s)

    past_narrations = [
        (seg, narration_view(record, seg), seg.mean_s - origin) for seg in past_segs
    ]
    if next_seg is not None:
        next_narration = (next_seg.text, next_seg.mean_s - origin)
    else:
        next_narration = ("", t + 0.5 * cfg.delta_s - origin)

    # Target: majority view over frames in (t, t + delta].
    counts = {ViewKind.EGO: 0, ViewKind.EXO: 0}
    total = 0
    first = math.floor((t + _TIME_EPS) * record.fps) + 1  # strictly after t
    last = min(math.floor((t + cfg.delta_s + _TIME_EPS) * record.fps), record.num_frames - 1)
    for idx in range(first, last + 1):
        label = record.view_at(record.frame_time(idx))
        if label is None:
            raise UnlabeledTargetError(
                f"{record.video_id}: no view label inside ({t}, {t + cfg.delta_s}]"
            )
        counts[label.kind] += 1
        total += 1
    if total == 0:
        raise UnlabeledTargetError(
            f"{record.video_id}: no labeled frames inside ({t}, {t + cfg.delta_s}]"
        )
    target = _majority_label(counts, total)

    return Sample(
        video_id=record.video_id,
        t=t,
        delta=cfg.delta_s,
        past_frame_features=rows,
        past_frame_views=views,
        past_frame_times=[s - origin for s in times],
        past_narrations=past_narrations,
        next_narration=next_narration,
        target=target,
        scenario=record.scenario,
    )


def prediction_grid(record: VideoRecord, cfg: WindowConfig, stride_s: float) -> list[float]:
    """Grid points t = k*stride with a full past-frame window and a full target."""
    ts: list[float] = []
    k = 1
    while True:
        t = k * stride_s
        if t + cfg.delta_s > record.duration_s + _TIME_EPS:
            break
        if t >= cfg.past_frames_s - _TIME_EPS:
            ts.append(t)
        k += 1
    return ts


def build_detection_samples(
    records: Iterable[VideoRecord],
    cfg: WindowConfig,
    stride_s: float | None = None,
) -> list[Sample]:
    """Extract every grid sample from every record, skipping rejected points."""
    stride = stride_s if stride_s is not None else cfg.delta_s
    out: list[Sample] = []
    for rec in records:
        for t in prediction_grid(rec, cfg, stride):
            try:
                out.append(extract_sample(rec, t, cfg))
            except (InsufficientContextError, UnlabeledTargetError):
                continue
    return out


def candidate_features(record: VideoRecord, t: float, cfg: WindowConfig) -> tuple[np.ndarray, np.ndarray]:
    """Candidate frames from both streams on the [t, t + delta) grid."""
    if record.ego_features is None or record.exo_features is None:
        raise RecordValidationError(
            f"{record.video_id}: record has no candidate view streams"
        )
    idx = [record.frame_index(t + k / cfg.frame_rate) for k in range(cfg.candidate_frames)]
    return record.ego_features[idx], record.exo_features[idx]


def extract_selector_sample(record: VideoRecord, t: float, cfg: WindowConfig) -> SelectorSample:
    base = extract_sample(record, t, cfg)
    ego, exo = candidate_features(record, t, cfg)
    return SelectorSample(base=base, ego_candidate_features=ego, exo_candidate_features=exo)


def build_selector_samples(
    records: Iterable[VideoRecord],
    cfg: WindowConfig,
    stride_s: float | None = None,
) -> list[SelectorSample]:
    stride = stride_s if stride_s is not None else cfg.delta_s
    out: list[SelectorSample] = []
    for rec in records:
        for t in prediction_grid(rec, cfg, stride):
            try:
                out.append(extract_selector_sample(rec, t, cfg))
            except (InsufficientContextError, UnlabeledTargetError):
                continue
    return out


def overlay_view_track(
    track: list[ViewSpan], begin_s: float, end_s: float, label: ViewLabel
) -> list[ViewSpan]:
    """Return a new track with [begin_s, end_s) replaced by ``label``."""
    out: list[ViewSpan] = []
    for span in track:
        if span.end_s <= begin_s + _TIME_EPS or span.begin_s >= end_s - _TIME_EPS:
            out.append(span)
            continue
        if span.begin_s < begin_s - _TIME_EPS:
            out.append(ViewSpan(span.begin_s, begin_s, span.label))
        if span.end_s > end_s + _TIME_EPS:
            out.append(ViewSpan(end_s, span.end_s, span.label))
    out.append(ViewSpan(begin_s, min(end_s, track[-1].end_s), label))
    out.sort(key=lambda s: s.begin_s)
    # Merge zero-length fragments defensively.
    return [s for s in out if s.end_s - s.begin_s > _TIME_EPS]
