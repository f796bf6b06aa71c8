import numpy as np
import pytest
import torch

from viewswitch.data import (
    NarrationSegment,
    VideoRecord,
    ViewKind,
    ViewLabel,
    ViewSpan,
    WindowConfig,
)

torch.set_num_threads(1)


def make_record(
    video_id="vid0",
    duration_s=20.0,
    fps=4.0,
    feature_dim=4,
    track=None,
    narrations=(),
    noise=0.0,
    seed=0,
    scenario=None,
):
    """Record whose features are +1 on ego stretches and -1 on exo stretches."""
    if track is None:
        track = ((0.0, duration_s, ViewKind.EXO),)
    n = int(round(duration_s * fps))
    spans = [ViewSpan(b, e, ViewLabel(k, 1.0)) for b, e, k in track]
    rec = VideoRecord(
        video_id=video_id,
        duration_s=duration_s,
        fps=fps,
        frame_features=np.zeros((n, feature_dim), dtype=np.float32),
        narrations=[NarrationSegment(t, b, e) for t, b, e in narrations],
        view_track=spans,
        scenario=scenario,
    )
    rec.validate()
    feats = np.empty((n, feature_dim), dtype=np.float32)
    for i in range(n):
        label = rec.view_at(i / fps)
        feats[i] = 1.0 if label.kind == ViewKind.EGO else -1.0
    if noise:
        rng = np.random.default_rng(seed)
        feats = feats + rng.normal(0.0, noise, feats.shape).astype(np.float32)
    rec.frame_features = feats
    rec.validate()
    return rec


@pytest.fixture(scope="session")
def tiny_window():
    return WindowConfig(past_frames_s=2.0, past_narrations_s=8.0, delta_s=2.0, frame_rate=4.0)


@pytest.fixture(scope="session")
def desk_window():
    return WindowConfig(past_frames_s=8.0, past_narrations_s=8.0, delta_s=2.0, frame_rate=4.0)


@pytest.fixture(scope="session")
def cue_corpus():
    """Small deterministic-cue corpus shared by model-level tests."""
    from viewswitch.synth import deterministic_cue_grammar, generate_corpus

    grammar = deterministic_cue_grammar(video_steps=16)
    records, oracle = generate_corpus(grammar, n_videos=10, seed=101)
    return records, oracle


@pytest.fixture(scope="session")
def multiview_corpus():
    from viewswitch.synth import deterministic_cue_grammar, generate_corpus

    grammar = deterministic_cue_grammar(video_steps=16)
    records, oracle = generate_corpus(grammar, n_videos=8, seed=202, multiview=True)
    return records, oracle


@pytest.fixture(scope="session")
def tiny_trained_detector(cue_corpus, desk_window):
    """A briefly trained desk-scale detector reused across tests."""
    from viewswitch.detector import DetectorTrainConfig, TrainSettings, train_detector

    records, _ = cue_corpus
    cfg = DetectorTrainConfig(
        window=desk_window,
        train=TrainSettings(seed=3, epochs=6, batch_size=32, patience=None),
    )
    return train_detector(records, cfg)
