from dataclasses import replace

import numpy as np
import pytest
import torch

from viewswitch.data import (
    SelectorSample,
    ViewKind,
    WindowConfig,
    build_selector_samples,
)
from viewswitch.detector import (
    AggregatorConfig,
    DetectorTrainConfig,
    HeadConfig,
    TrainSettings,
    ViewPredictor,
    train_detector,
)
from viewswitch.encoders import EncoderBank, EncoderBankConfig, TokenRole
from viewswitch.errors import CheckpointConfigError, RecordValidationError
from viewswitch.selector import (
    JointFinetuneConfig,
    LimitedLabelSet,
    candidate_position_budget,
    finetune_selector,
    fresh_selector,
    init_from_detector,
    joint_loss_terms,
    narration_pseudo_label,
    subsample_labels,
    write_limited_labels,
)


@pytest.fixture(scope="module")
def mv_setup(multiview_corpus):
    records, _ = multiview_corpus
    window = WindowConfig(past_frames_s=4.0, past_narrations_s=8.0, delta_s=2.0, frame_rate=4.0)
    cfg = DetectorTrainConfig(
        window=window,
        aggregator=AggregatorConfig.desk_preset(model_dim=32, max_base_positions=64),
        train=TrainSettings(seed=2, epochs=3, batch_size=16, patience=None),
    )
    result = train_detector(records, cfg)
    samples = build_selector_samples(records, window)
    return records, window, result.model, samples


class TestNarrationPseudoLabel:
    def test_closer_look_is_ego(self):
        assert narration_pseudo_label("now take a closer look at the stitch").kind == ViewKind.EGO

    def test_first_person_is_exo(self):
        assert narration_pseudo_label("I'm going to show you the setup").kind == ViewKind.EXO

    def test_empty_defaults_to_exo(self):
        assert narration_pseudo_label("").kind == ViewKind.EXO

    def test_no_match_defaults_to_exo(self):
        assert narration_pseudo_label("the sauce simmers quietly").kind == ViewKind.EXO

    def test_word_boundaries(self):
        # "inside" must not fire the "i" pronoun rule
        assert narration_pseudo_label("inside the oven chamber").kind == ViewKind.EXO


class TestInitFromDetector:
    def test_shared_tensors_bit_equal(self, mv_setup):
        _, window, detector, _ = mv_setup
        sel = init_from_detector(detector, candidate_position_budget(window), seed=9)
        det_state = detector.state_dict()
        sel_state = sel.state_dict()
        for name, tensor in det_state.items():
            if name == "pos_table.weight":
                assert torch.equal(tensor, sel_state[name][: tensor.shape[0]])
            else:
                assert torch.equal(tensor, sel_state[name]), name

    def test_new_positional_rows_initialized(self, mv_setup):
        _, window, detector, _ = mv_setup
        sel = init_from_detector(detector, candidate_position_budget(window), seed=9)
        extra = sel.pos_table.weight[detector.pos_table.weight.shape[0] :]
        assert extra.shape[0] == candidate_position_budget(window)
        assert not torch.all(extra == 0)

    def test_incompatible_model_dim_rejected(self, mv_setup):
        _, window, detector, _ = mv_setup
        budget = candidate_position_budget(window)
        wanted = replace(
            detector.aggregator_config,
            model_dim=16,
            num_heads=2,
            max_candidate_positions=budget,
        )
        with pytest.raises(CheckpointConfigError):
            init_from_detector(detector, budget, seed=0, aggregator=wanted)

    def test_masked_candidates_reproduce_detector(self, mv_setup):
        _, window, detector, samples = mv_setup
        sel = init_from_detector(detector, candidate_position_budget(window), seed=9)
        # Zero the candidate positional rows and mask the candidate tokens:
        # the selector must reduce exactly to the detector on the base sample.
        with torch.no_grad():
            sel.pos_table.weight[detector.pos_table.weight.shape[0] :] = 0.0
        masked = frozenset({TokenRole.CAND_EGO, TokenRole.CAND_EXO})
        for s in samples[:8]:
            a = detector.predict(s.base)
            b = sel.predict(s, masked_roles=masked)
            assert a.logits[0] == pytest.approx(b.logits[0], abs=1e-6)
            assert a.logits[1] == pytest.approx(b.logits[1], abs=1e-6)

    def test_candidates_change_output_when_unmasked(self, mv_setup):
        _, window, detector, samples = mv_setup
        sel = init_from_detector(detector, candidate_position_budget(window), seed=9)
        diffs = []
        for s in samples[:8]:
            a = detector.predict(s.base)
            b = sel.predict(s)
            diffs.append(abs(a.logits[0] - b.logits[0]))
        assert max(diffs) > 0

    def test_swapping_candidate_blocks_keeps_length(self, mv_setup):
        _, _, detector, samples = mv_setup
        s = samples[0]
        swapped = SelectorSample(
            base=s.base,
            ego_candidate_features=s.exo_candidate_features,
            exo_candidate_features=s.ego_candidate_features,
        )
        assert swapped.ego_candidate_features.shape == s.ego_candidate_features.shape

    def test_missing_candidate_stream_rejected(self, mv_setup):
        _, _, _, samples = mv_setup
        s = samples[0]
        with pytest.raises(RecordValidationError):
            SelectorSample(
                base=s.base,
                ego_candidate_features=np.zeros((0, 16), dtype=np.float32),
                exo_candidate_features=s.exo_candidate_features,
            )


class TestFinetune:
    def test_frozen_encoders_never_mutate(self, mv_setup):
        _, window, detector, samples = mv_setup
        sel = init_from_detector(detector, candidate_position_budget(window), seed=4)
        before = [p.detach().clone() for p in sel.bank.base_encoder_parameters()]
        labels = LimitedLabelSet(samples=list(samples[:64]))
        finetune_selector(
            sel, labels, TrainSettings(seed=4, epochs=2, batch_size=16, patience=None)
        )
        after = sel.bank.base_encoder_parameters()
        for a, b in zip(before, after):
            assert torch.equal(a, b)

    def test_empty_label_set_rejected(self, mv_setup):
        _, window, detector, _ = mv_setup
        sel = init_from_detector(detector, candidate_position_budget(window), seed=4)
        with pytest.raises(ValueError):
            finetune_selector(sel, LimitedLabelSet(samples=[]), TrainSettings(epochs=1))

    def test_joint_loss_decomposes_exactly(self, mv_setup):
        _, window, detector, samples = mv_setup
        sel = init_from_detector(detector, candidate_position_budget(window), seed=4)
        joint = JointFinetuneConfig(alpha=0.3)
        batch = list(samples[:16])
        total, ce_human, ce_pseudo = joint_loss_terms(sel, batch, joint)
        assert total == pytest.approx(ce_human + 0.3 * ce_pseudo, abs=1e-6)

    def test_alpha_zero_reduces_to_plain_loss(self, mv_setup):
        _, window, detector, samples = mv_setup
        sel = init_from_detector(detector, candidate_position_budget(window), seed=4)
        joint = JointFinetuneConfig(alpha=0.0)
        total, ce_human, _ = joint_loss_terms(sel, list(samples[:16]), joint)
        assert total == ce_human

    def test_joint_training_runs(self, mv_setup):
        _, window, detector, samples = mv_setup
        sel = init_from_detector(detector, candidate_position_budget(window), seed=4)
        history = finetune_selector(
            sel,
            LimitedLabelSet(samples=list(samples[:48])),
            TrainSettings(seed=4, epochs=2, batch_size=16, patience=None),
            joint=JointFinetuneConfig(alpha=0.3),
        )
        assert len(history) == 2

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            JointFinetuneConfig(alpha=-0.1)


class TestSubsample:
    def test_deterministic_under_seed(self, mv_setup):
        _, _, _, samples = mv_setup
        labels = LimitedLabelSet(samples=list(samples))
        a = subsample_labels(labels, 20, seed=3)
        b = subsample_labels(labels, 20, seed=3)
        ids_a = [(s.base.video_id, s.base.t) for s in a.samples]
        ids_b = [(s.base.video_id, s.base.t) for s in b.samples]
        assert ids_a == ids_b
        assert len(ids_a) == 20

    def test_stratified_by_switch(self, mv_setup):
        _, _, _, samples = mv_setup
        labels = LimitedLabelSet(samples=list(samples))
        sub = subsample_labels(labels, 20, seed=3)
        n_switch = sum(s.is_switch for s in sub.samples)
        assert 8 <= n_switch <= 12

    def test_oversized_request_returns_all(self, mv_setup):
        _, _, _, samples = mv_setup
        labels = LimitedLabelSet(samples=list(samples[:10]))
        assert subsample_labels(labels, 100, seed=0).count == 10


class TestLimitedLabelFile:
    def test_round_trip(self, tmp_path, mv_setup):
        records, window, _, samples = mv_setup
        path = tmp_path / "labels.jsonl"
        write_limited_labels(samples[:24], path)
        labels = LimitedLabelSet.from_file(path, records, window)
        assert labels.count == 24
        for orig, loaded in zip(samples[:24], labels.samples):
            assert loaded.base.video_id == orig.base.video_id
            assert loaded.base.t == orig.base.t
            assert loaded.base.target.kind == orig.base.target.kind
            assert np.array_equal(loaded.ego_candidate_features, orig.ego_candidate_features)


class TestFreshSelector:
    def test_differs_from_initialized(self, mv_setup):
        _, window, detector, _ = mv_setup
        a = init_from_detector(detector, candidate_position_budget(window), seed=7)
        b = fresh_selector(detector, candidate_position_budget(window), seed=7)
        same = all(
            torch.equal(x, y)
            for (_, x), (_, y) in zip(sorted(a.state_dict().items()), sorted(b.state_dict().items()))
        )
        assert not same
