import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_record
from viewswitch.data import (
    NarrationSegment,
    VideoRecord,
    ViewKind,
    ViewLabel,
    ViewSpan,
    WindowConfig,
    extract_sample,
    load_manifest,
    narration_view,
    prediction_grid,
    read_features,
    write_features,
    write_manifest,
)
from viewswitch.errors import (
    FeatureIOError,
    InsufficientContextError,
    ManifestParseError,
    RecordValidationError,
    UnlabeledTargetError,
)


def _write_corpus(tmp_path, records):
    return write_manifest(records, tmp_path / "manifest.jsonl")


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.normal(size=(40, 7)).astype(np.float32)
        path = tmp_path / "x.swavft"
        write_features(path, arr)
        back = read_features(path)
        assert back.dtype == np.float32
        assert np.array_equal(arr, back)
        assert arr.tobytes() == back.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.swavft"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(FeatureIOError):
            read_features(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "trunc.swavft"
        write_features(path, np.zeros((4, 3), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FeatureIOError):
            read_features(path)


class TestManifest:
    def test_single_record_frame_count(self, tmp_path):
        rec = make_record(duration_s=10.0, fps=4.0)
        path = _write_corpus(tmp_path, [rec])
        loaded = load_manifest(path)
        assert len(loaded) == 1
        assert loaded[0].num_frames == 40

    def test_bad_narration_interval_rejected(self, tmp_path):
        rec = make_record()
        path = _write_corpus(tmp_path, [rec])
        line = json.loads(path.read_text())
        line["narrations"] = [{"text": "x", "begin_s": 5.0, "end_s": 4.0}]
        path.write_text(json.dumps(line) + "\n")
        with pytest.raises((RecordValidationError, ManifestParseError)):
            load_manifest(path)

    def test_missing_feature_file_names_video(self, tmp_path):
        records = [make_record(video_id=f"v{i}") for i in range(3)]
        path = _write_corpus(tmp_path, records)
        (tmp_path / "features" / "v1.swavft").unlink()
        with pytest.raises(FeatureIOError, match="v1"):
            load_manifest(path)

    def test_malformed_line_names_line_number(self, tmp_path):
        rec = make_record()
        path = _write_corpus(tmp_path, [rec])
        with open(path, "a") as fh:
            fh.write("{this is not json\n")
        with pytest.raises(ManifestParseError, match="line 2"):
            load_manifest(path)

    def test_unknown_keys_rejected(self, tmp_path):
        rec = make_record()
        path = _write_corpus(tmp_path, [rec])
        line = json.loads(path.read_text())
        line["surprise"] = 1
        path.write_text(json.dumps(line) + "\n")
        with pytest.raises(ManifestParseError, match="surprise"):
            load_manifest(path)

    def test_mixed_feature_dims_rejected(self, tmp_path):
        records = [
            make_record(video_id="a", feature_dim=4),
            make_record(video_id="b", feature_dim=5),
        ]
        path = tmp_path / "manifest.jsonl"
        write_manifest(records, path)
        with pytest.raises(RecordValidationError, match="dimension"):
            load_manifest(path)

    def test_round_trip_equality(self, tmp_path):
        records = [
            make_record(
                video_id="a",
                track=((0.0, 8.0, ViewKind.EGO), (8.0, 20.0, ViewKind.EXO)),
                narrations=(("pick up the whisk", 1.0, 3.0), ("now stir", 9.0, 11.5)),
                scenario="cooking",
                noise=0.3,
            ),
            make_record(video_id="b"),
        ]
        path = _write_corpus(tmp_path, records)
        loaded = load_manifest(path)
        assert loaded == records
        path2 = write_manifest(loaded, tmp_path / "again" / "manifest.jsonl")
        assert load_manifest(path2) == records

    @settings(max_examples=25, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.floats(min_value=0.5, max_value=5.0),
                st.sampled_from([ViewKind.EGO, ViewKind.EXO]),
            ),
            min_size=1,
            max_size=4,
        ),
        st.integers(min_value=0, max_value=10_000),
    )
    def test_round_trip_random_records(self, tmp_path_factory, spans, seed):
        tmp_path = tmp_path_factory.mktemp("rt")
        begin = 0.0
        track = []
        for dur, kind in spans:
            dur = round(dur * 4) / 4  # align to the frame grid
            if dur == 0:
                dur = 0.25
            track.append((begin, begin + dur, kind))
            begin += dur
        rec = make_record(duration_s=begin, track=tuple(track), noise=0.1, seed=seed)
        loaded = load_manifest(_write_corpus(tmp_path, [rec]))
        assert loaded == [rec]


class TestNarrationView:
    def _rec(self):
        # 6 ego frames then 2 exo frames inside [0, 2): fps 4, ego until 1.5 s
        return make_record(
            duration_s=4.0,
            track=((0.0, 1.5, ViewKind.EGO), (1.5, 4.0, ViewKind.EXO)),
        )

    def test_majority(self):
        rec = self._rec()
        seg = NarrationSegment("x", 0.0, 1.95)
        label = narration_view(rec, seg)
        assert label.kind == ViewKind.EGO
        assert label.probability == pytest.approx(6 / 8)

    def test_tie_breaks_to_exo(self):
        rec = make_record(
            duration_s=4.0,
            track=((0.0, 1.0, ViewKind.EGO), (1.0, 4.0, ViewKind.EXO)),
        )
        seg = NarrationSegment("x", 0.0, 1.95)  # frames at 0,.25,.5,.75 ego; 1,1.25,1.5,1.75 exo
        label = narration_view(rec, seg)
        assert label.kind == ViewKind.EXO
        assert label.probability == pytest.approx(0.5)

    def test_single_view_interval(self):
        rec = self._rec()
        seg = NarrationSegment("x", 2.0, 3.5)
        assert narration_view(rec, seg).kind == ViewKind.EXO

    def test_empty_interval_errors(self):
        rec = self._rec()
        from viewswitch.errors import EmptyNarrationIntervalError

        seg = NarrationSegment("x", 1.01, 1.05)
        with pytest.raises(EmptyNarrationIntervalError):
            narration_view(rec, seg)


class TestExtractSample:
    def _rec(self):
        return make_record(
            duration_s=40.0,
            track=((0.0, 30.0, ViewKind.EXO), (30.0, 40.0, ViewKind.EGO)),
            narrations=(
                ("early words", 2.0, 4.0),
                ("middle words", 10.0, 12.0),
                ("late words", 21.0, 25.0),
            ),
        )

    def test_next_narration_overlap(self, tiny_window):
        rec = self._rec()
        sample = extract_sample(rec, 20.0, tiny_window)  # narration [21, 25] overlaps (20, 22]
        assert sample.next_text == "late words"

    def test_next_narration_outside_interval_is_empty(self, tiny_window):
        rec = make_record(
            duration_s=40.0,
            narrations=(("too late", 23.0, 25.0),),  # (20, 22] untouched
        )
        sample = extract_sample(rec, 20.0, tiny_window)
        assert sample.next_text == ""

    def test_relative_frame_times(self):
        cfg = WindowConfig(past_frames_s=2.0, past_narrations_s=8.0, delta_s=2.0, frame_rate=4.0)
        rec = make_record(duration_s=120.0, narrations=(("anchor", 100.0, 101.0),))
        sample = extract_sample(rec, 103.52, cfg)
        # Frame grid point 103.27 sits 3.27 s after the narration begin at 100.
        assert sample.past_frame_times[-1] == pytest.approx(3.27, abs=1e-9)

    def test_no_past_frames_rejected(self, tiny_window):
        rec = self._rec()
        with pytest.raises(InsufficientContextError):
            extract_sample(rec, 0.0, tiny_window)

    def test_unlabeled_target_rejected(self, tiny_window):
        rec = make_record(duration_s=40.0)
        rec_no_track = VideoRecord(
            video_id="x",
            duration_s=rec.duration_s,
            fps=rec.fps,
            frame_features=rec.frame_features,
            narrations=[],
            view_track=None,
        )
        with pytest.raises(UnlabeledTargetError):
            extract_sample(rec_no_track, 20.0, tiny_window)

    def test_target_majority_and_switch_flag(self, tiny_window):
        rec = self._rec()
        # (28.75, 30.75]: frames 29.0..29.75 exo, 30.0..30.75 ego -> 4-4 tie -> EXO
        sample = extract_sample(rec, 28.75, tiny_window)
        assert sample.target.kind == ViewKind.EXO
        assert not sample.is_switch
        sample2 = extract_sample(rec, 30.0, tiny_window)  # (30, 32] all ego, past exo
        assert sample2.target.kind == ViewKind.EGO
        assert sample2.is_switch

    def test_is_switch_is_derived(self, tiny_window):
        rec = self._rec()
        sample = extract_sample(rec, 20.0, tiny_window)
        assert sample.is_switch == (sample.target.kind != sample.past_frame_views[-1].kind)

    def test_deterministic(self, tiny_window):
        rec = self._rec()
        a = extract_sample(rec, 20.0, tiny_window)
        b = extract_sample(rec, 20.0, tiny_window)
        assert np.array_equal(a.past_frame_features, b.past_frame_features)
        assert a.past_frame_times == b.past_frame_times
        assert a.next_narration == b.next_narration
        assert a.target == b.target

    @pytest.mark.parametrize("shift_steps", [4, 40, 401])
    def test_translation_invariance(self, tiny_window, shift_steps):
        rec = self._rec()
        c = shift_steps / rec.fps
        shifted = VideoRecord(
            video_id=rec.video_id,
            duration_s=rec.duration_s + c,
            fps=rec.fps,
            frame_features=np.vstack(
                [np.zeros((shift_steps, rec.feature_dim), dtype=np.float32), rec.frame_features]
            ),
            narrations=[
                NarrationSegment(n.text, n.begin_s + c, n.end_s + c) for n in rec.narrations
            ],
            view_track=[ViewSpan(0.0, c, rec.view_track[0].label)]
            + [ViewSpan(s.begin_s + c, s.end_s + c, s.label) for s in rec.view_track],
            scenario=rec.scenario,
        )
        a = extract_sample(rec, 20.0, tiny_window)
        b = extract_sample(shifted, 20.0 + c, tiny_window)
        assert a.past_frame_times == pytest.approx(b.past_frame_times, abs=1e-6)
        assert a.next_narration[1] == pytest.approx(b.next_narration[1], abs=1e-6)
        for (_, va, ta), (_, vb, tb) in zip(a.past_narrations, b.past_narrations):
            assert ta == pytest.approx(tb, abs=1e-6)
            assert va == vb

    def test_prediction_grid(self, tiny_window):
        rec = make_record(duration_s=20.0)
        cfg = WindowConfig(past_frames_s=8.0, past_narrations_s=8.0, delta_s=2.0, frame_rate=4.0)
        assert prediction_grid(rec, cfg, 2.0) == [8.0, 10.0, 12.0, 14.0, 16.0, 18.0]

    def test_straddling_narration_counts_for_both_windows(self):
        cfg = WindowConfig(past_frames_s=2.0, past_narrations_s=8.0, delta_s=2.0, frame_rate=4.0)
        rec = make_record(duration_s=40.0, narrations=(("straddle", 19.0, 20.5),))
        sample = extract_sample(rec, 20.0, cfg)
        assert [seg.text for seg, _, _ in sample.past_narrations] == ["straddle"]
        assert sample.next_text == "straddle"


class TestValidation:
    def test_track_gap_rejected(self):
        with pytest.raises(RecordValidationError):
            make_record(track=((0.0, 5.0, ViewKind.EGO), (6.0, 20.0, ViewKind.EXO)))

    def test_track_must_cover_duration(self):
        with pytest.raises(RecordValidationError):
            make_record(track=((0.0, 15.0, ViewKind.EGO),))

    def test_probability_bounds(self):
        with pytest.raises(RecordValidationError):
            ViewLabel(ViewKind.EGO, 1.5)

    def test_narration_needs_positive_length(self):
        with pytest.raises(RecordValidationError):
            NarrationSegment("x", 3.0, 3.0)
