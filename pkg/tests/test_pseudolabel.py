import numpy as np
import pytest

from conftest import make_record
from viewswitch.data import ViewKind
from viewswitch.errors import RecordValidationError, ShotBelowClipLengthError
from viewswitch.pseudolabel import (
    PseudoLabelMode,
    detect_shots,
    frame_accuracy,
    label_shot,
    load_pseudo_label_tracks,
    pseudo_label_video,
    write_pseudo_labels,
)
from viewswitch.synth import (
    generate_corpus,
    hazard_grammar,
    jittered_boundary_grammar,
)


class FixedClassifier:
    """Returns scripted per-clip probabilities in call order."""

    clip_len_s = 2.0
    concurrent_safe = True

    def __init__(self, probs):
        self.probs = list(probs)
        self.calls = 0

    def classify(self, clip_features):
        p = self.probs[self.calls % len(self.probs)]
        self.calls += 1
        return p


class TestDetectShots:
    def test_constant_stream_single_shot(self):
        rec = make_record(duration_s=20.0)
        assert detect_shots(rec, threshold=0.3) == [(0.0, 20.0)]

    def test_single_discontinuity(self):
        rec = make_record(
            duration_s=20.0,
            track=((0.0, 10.0, ViewKind.EXO), (10.0, 20.0, ViewKind.EGO)),
        )
        shots = detect_shots(rec, threshold=0.3)
        # Oracle: scan every consecutive-frame distance against the threshold.
        feats = rec.frame_features.astype(float)
        norm = (feats - feats.min(0)) / np.where(
            feats.max(0) - feats.min(0) == 0, 1, feats.max(0) - feats.min(0)
        )
        dists = np.abs(np.diff(norm, axis=0)).mean(axis=1)
        expected_bounds = [(i + 1) / rec.fps for i in np.nonzero(dists > 0.3)[0]]
        assert expected_bounds == [10.0]
        assert shots == [(0.0, 10.0), (10.0, 20.0)]

    def test_close_boundaries_suppressed(self):
        # Discontinuities at 1.0 s and 1.5 s with a 2 s minimum: both conflict
        # (the first with the video start), so a single shot remains.
        rec = make_record(
            duration_s=20.0,
            track=(
                (0.0, 1.0, ViewKind.EXO),
                (1.0, 1.5, ViewKind.EGO),
                (1.5, 20.0, ViewKind.EXO),
            ),
        )
        shots = detect_shots(rec, threshold=0.3, min_shot_len_s=2.0)
        bounds = [b for b, _ in shots[1:]]
        assert 1.5 not in bounds
        assert shots == [(0.0, 20.0)]

    def test_earliest_admissible_boundary_kept(self):
        rec = make_record(
            duration_s=20.0,
            track=(
                (0.0, 4.0, ViewKind.EXO),
                (4.0, 4.5, ViewKind.EGO),
                (4.5, 20.0, ViewKind.EXO),
            ),
        )
        shots = detect_shots(rec, threshold=0.3, min_shot_len_s=2.0)
        assert shots == [(0.0, 4.0), (4.0, 20.0)]

    def test_trailing_short_shot_suppressed(self):
        rec = make_record(
            duration_s=21.0,
            track=((0.0, 20.0, ViewKind.EXO), (20.0, 21.0, ViewKind.EGO)),
        )
        shots = detect_shots(rec, threshold=0.3, min_shot_len_s=2.0)
        assert shots == [(0.0, 21.0)]

    def test_partition_property(self):
        g = hazard_grammar(0.4, video_steps=20)
        records, _ = generate_corpus(g, 5, seed=3)
        for rec in records:
            shots = detect_shots(rec)
            assert shots[0][0] == 0.0
            assert shots[-1][1] == rec.duration_s
            for (b0, e0), (b1, e1) in zip(shots, shots[1:]):
                assert e0 == b1
            assert sum(e - b for b, e in shots) == pytest.approx(rec.duration_s)

    def test_too_few_frames_rejected(self):
        rec = make_record(duration_s=0.25, fps=4.0, track=((0.0, 0.25, ViewKind.EXO),))
        with pytest.raises(RecordValidationError):
            detect_shots(rec)


class TestLabelShot:
    def test_mean_maps_to_ego(self):
        clf = FixedClassifier([0.9, 0.8, 0.7])
        feats = np.zeros((24, 4), dtype=np.float32)  # 3 clips at 2 s / 4 fps
        shot = label_shot(feats, 0.0, 6.0, 4.0, clf)
        assert shot.clip_probs == (0.9, 0.8, 0.7)
        assert shot.label.kind == ViewKind.EGO
        assert shot.label.probability == pytest.approx(0.8)

    def test_mean_maps_to_exo(self):
        clf = FixedClassifier([0.2, 0.3, 0.9])
        feats = np.zeros((24, 4), dtype=np.float32)
        shot = label_shot(feats, 0.0, 6.0, 4.0, clf)
        assert shot.label.kind == ViewKind.EXO
        assert shot.label.probability == pytest.approx(1.0 - (0.2 + 0.3 + 0.9) / 3.0)

    def test_tie_breaks_to_exo(self):
        clf = FixedClassifier([0.5, 0.5])
        feats = np.zeros((16, 4), dtype=np.float32)
        shot = label_shot(feats, 0.0, 4.0, 4.0, clf)
        assert shot.label.kind == ViewKind.EXO
        assert shot.label.probability == 0.5

    def test_trailing_remainder_dropped(self):
        clf = FixedClassifier([0.9])
        feats = np.zeros((19, 4), dtype=np.float32)  # 2 clips + 3 leftover rows
        shot = label_shot(feats, 0.0, 4.75, 4.0, clf)
        assert len(shot.clip_probs) == 2

    def test_below_clip_length_errors(self):
        clf = FixedClassifier([0.9])
        with pytest.raises(ShotBelowClipLengthError):
            label_shot(np.zeros((4, 4), dtype=np.float32), 0.0, 1.0, 4.0, clf)

    def test_permutation_invariant_label(self):
        feats = np.zeros((24, 4), dtype=np.float32)
        a = label_shot(feats, 0.0, 6.0, 4.0, FixedClassifier([0.9, 0.1, 0.6]))
        b = label_shot(feats, 0.0, 6.0, 4.0, FixedClassifier([0.6, 0.9, 0.1]))
        assert a.label == b.label


class TestPseudoLabelVideo:
    def test_perfect_oracle_recovers_ground_truth(self):
        g = hazard_grammar(0.4, video_steps=16)
        records, oracle = generate_corpus(g, 4, seed=11)
        for rec in records:
            pls = pseudo_label_video(rec, oracle, PseudoLabelMode.SHOT_LEVEL)
            assert frame_accuracy(pls, rec) == 1.0

    def test_single_shot_video_uniform_labels(self):
        g = hazard_grammar(0.0, video_steps=8)
        records, oracle = generate_corpus(g, 1, seed=12)
        pls = pseudo_label_video(records[0], oracle, PseudoLabelMode.SHOT_LEVEL)
        assert len(pls.shots) == 1
        assert len({l.kind for l in pls.frame_labels}) == 1

    def test_shots_partition_and_frames_match_shots(self):
        g = jittered_boundary_grammar(video_steps=20)
        records, oracle = generate_corpus(g, 3, seed=13)
        for rec in records:
            for mode in PseudoLabelMode:
                pls = pseudo_label_video(rec, oracle, mode)
                assert pls.shots[0].begin_s == 0.0
                assert pls.shots[-1].end_s == rec.duration_s
                for a, b in zip(pls.shots, pls.shots[1:]):
                    assert a.end_s == b.begin_s
                assert len(pls.frame_labels) == rec.num_frames
                shot_idx = 0
                for i, lab in enumerate(pls.frame_labels):
                    t = rec.frame_time(i)
                    while t >= pls.shots[shot_idx].end_s - 1e-9:
                        shot_idx += 1
                    assert lab == pls.shots[shot_idx].label

    def test_shot_level_beats_clip_level_under_boundary_noise(self):
        g = jittered_boundary_grammar(boundary_noise=0.2, video_steps=24)
        records, oracle = generate_corpus(g, 30, seed=14)
        shot_acc = []
        clip_acc = []
        for rec in records:
            shot_acc.append(
                frame_accuracy(pseudo_label_video(rec, oracle, PseudoLabelMode.SHOT_LEVEL), rec)
            )
            clip_acc.append(
                frame_accuracy(pseudo_label_video(rec, oracle, PseudoLabelMode.CLIP_LEVEL), rec)
            )
        assert np.mean(shot_acc) > np.mean(clip_acc)

    def test_json_round_trip(self, tmp_path):
        g = hazard_grammar(0.4, video_steps=10)
        records, oracle = generate_corpus(g, 2, seed=15)
        sets = [pseudo_label_video(r, oracle, PseudoLabelMode.SHOT_LEVEL) for r in records]
        path = tmp_path / "pl.jsonl"
        write_pseudo_labels(sets, path)
        tracks = load_pseudo_label_tracks(path)
        assert set(tracks) == {r.video_id for r in records}
        for pls in sets:
            spans = tracks[pls.video_id]
            assert [(s.begin_s, s.end_s) for s in spans] == [
                (sh.begin_s, sh.end_s) for sh in pls.shots
            ]
            for span, shot in zip(spans, pls.shots):
                assert span.label.kind == shot.label.kind

    def test_pseudo_track_usable_for_extraction(self):
        g = hazard_grammar(0.4, video_steps=16)
        records, oracle = generate_corpus(g, 1, seed=16)
        rec = records[0]
        pls = pseudo_label_video(rec, oracle, PseudoLabelMode.SHOT_LEVEL)
        relabeled = rec.with_view_track(pls.to_view_track())
        assert relabeled.view_track is not None
