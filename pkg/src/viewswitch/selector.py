"""View selector: the detector backbone fine-tuned on limited best-view labels.

The selector appends candidate ego/exo frame tokens to the detector's input
sequence.  It is initialized from a pretext-trained detector (shared tensors
copied, fresh positional rows for the candidate tokens), then fine-tuned with
frozen frame/text encoders on a small human-labeled sample set, optionally
jointly with keyword-rule pseudo-labels derived from the next narration.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import (
    SelectorSample,
    VideoRecord,
    ViewKind,
    ViewLabel,
    WindowConfig,
    extract_selector_sample,
)
from .detector import (
    AggregatorConfig,
    TrainSettings,
    ViewPredictor,
    run_training,
)
from .encoders import VIEW_INDEX, EncoderBank, InputMask, prepare_sample
from .errors import CheckpointConfigError


@dataclass(frozen=True)
class NarrationRuleTable:
    """Transparent keyword rules mapping next-narration text to a view."""

    ego_patterns: tuple[str, ...] = (
        "closer",
        "close-up",
        "closeup",
        "zoom",
        "detail",
        "details",
    )
    exo_patterns: tuple[str, ...] = ("i", "we", "my", "our", "i'm", "i'll", "we're")
    default: ViewKind = ViewKind.EXO


DEFAULT_NARRATION_RULES = NarrationRuleTable()


def _any_word(patterns: tuple[str, ...], text: str) -> bool:
    for pat in patterns:
        if re.search(rf"\b{re.escape(pat)}\b", text, flags=re.IGNORECASE):
            return True
    return False


def narration_pseudo_label(
    text: str, rules: NarrationRuleTable = DEFAULT_NARRATION_RULES
) -> ViewLabel:
    """Deterministic view label from the rule table; empty text takes the default."""
    if text.strip():
        if _any_word(rules.ego_patterns, text):
            return ViewLabel(ViewKind.EGO, 1.0)
        if _any_word(rules.exo_patterns, text):
            return ViewLabel(ViewKind.EXO, 1.0)
    return ViewLabel(rules.default, 1.0)


@dataclass(frozen=True)
class JointFinetuneConfig:
    """Adds ``alpha`` * cross-entropy against narration pseudo-labels."""

    alpha: float = 0.3
    labeler: Callable[[str], ViewLabel] = narration_pseudo_label

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass(eq=False)
class LimitedLabelSet:
    """The small human-labeled selector training set."""

    samples: list[SelectorSample]

    @property
    def count(self) -> int:
        return len(self.samples)

    @classmethod
    def from_file(
        cls,
        path: str | Path,
        records: Sequence[VideoRecord],
        window: WindowConfig,
    ) -> "LimitedLabelSet":
        """Join a JSONL label file against manifest records.

        Each line is {"video_id", "t", "target_kind"}; the human label replaces
        the track-derived target of the extracted sample.
        """
        by_id = {r.video_id: r for r in records}
        samples: list[SelectorSample] = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                rec = by_id[obj["video_id"]]
                sel = extract_selector_sample(rec, float(obj["t"]), window)
                base = replace(
                    sel.base,
                    target=ViewLabel(ViewKind(obj["target_kind"]), 1.0),
                )
                samples.append(
                    SelectorSample(
                        base=base,
                        ego_candidate_features=sel.ego_candidate_features,
                        exo_candidate_features=sel.exo_candidate_features,
                    )
                )
        return cls(samples=samples)


def write_limited_labels(samples: Sequence[SelectorSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "video_id": s.base.video_id,
                        "t": s.base.t,
                        "target_kind": s.base.target.kind.value,
                    }
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# Initialization and fine-tuning
# ---------------------------------------------------------------------------


def candidate_position_budget(window: WindowConfig) -> int:
    return 2 * window.candidate_frames


def init_from_detector(
    detector: ViewPredictor,
    max_candidate_positions: int,
    seed: int = 0,
    aggregator: AggregatorConfig | None = None,
) -> ViewPredictor:
    """Build a selector with every shared tensor copied from the detector.

    Only the positional rows serving candidate tokens are new; they are
    freshly initialized under ``seed``.  Passing a target ``aggregator`` that
    differs from the detector's in anything but the candidate-position budget
    raises :class:`CheckpointConfigError`.
    """
    torch.manual_seed(seed)
    sel_cfg = replace(
        detector.aggregator_config, max_candidate_positions=max_candidate_positions
    )
    if aggregator is not None and aggregator != sel_cfg:
        raise CheckpointConfigError(
            "selector architecture incompatible with the detector "
            f"(expected {sel_cfg}, got {aggregator})"
        )
    bank = EncoderBank(detector.bank.config, detector.bank.vocab)
    model = ViewPredictor(bank, sel_cfg, detector.head_config)
    state = {k: v.clone() for k, v in detector.state_dict().items()}
    pos = state.pop("pos_table.weight")
    try:
        missing, unexpected = model.load_state_dict(state, strict=False)
    except RuntimeError as exc:
        raise CheckpointConfigError(f"incompatible detector architecture: {exc}") from exc
    if unexpected or [m for m in missing if m != "pos_table.weight"]:
        raise CheckpointConfigError(
            f"incompatible detector architecture: missing={missing} unexpected={unexpected}"
        )
    if pos.shape[1] != model.pos_table.weight.shape[1]:
        raise CheckpointConfigError("incompatible model_dim between detector and selector")
    with torch.no_grad():
        model.pos_table.weight[: pos.shape[0]] = pos
    return model


def fresh_selector(
    detector_like: ViewPredictor, max_candidate_positions: int, seed: int = 0
) -> ViewPredictor:
    """A selector with the same architecture but all-new parameters."""
    torch.manual_seed(seed)
    sel_cfg = replace(
        detector_like.aggregator_config,
        max_candidate_positions=max_candidate_positions,
    )
    bank = EncoderBank(detector_like.bank.config, detector_like.bank.vocab)
    return ViewPredictor(bank, sel_cfg, detector_like.head_config)


def subsample_labels(
    labels: LimitedLabelSet, n: int, seed: int = 0
) -> LimitedLabelSet:
    """Uniform subsample stratified by is_switch so the subsets stay balanced."""
    if n >= labels.count:
        return labels
    rng = np.random.default_rng(seed)
    switch_idx = [i for i, s in enumerate(labels.samples) if s.is_switch]
    same_idx = [i for i, s in enumerate(labels.samples) if not s.is_switch]
    half = n // 2
    take_switch = min(half, len(switch_idx))
    take_same = min(n - take_switch, len(same_idx))
    take_switch = min(n - take_same, len(switch_idx))
    chosen = list(rng.choice(switch_idx, size=take_switch, replace=False)) + list(
        rng.choice(same_idx, size=take_same, replace=False)
    )
    chosen.sort()
    return LimitedLabelSet(samples=[labels.samples[i] for i in chosen])


def freeze_base_encoders(model: ViewPredictor) -> list[torch.Tensor]:
    """Freeze the frame/text encoder tensors; returns copies for bit-comparison."""
    frozen = model.bank.base_encoder_parameters()
    for p in frozen:
        p.requires_grad_(False)
    return [p.detach().clone() for p in frozen]


def finetune_selector(
    model: ViewPredictor,
    labels: LimitedLabelSet,
    settings: TrainSettings,
    joint: JointFinetuneConfig | None = None,
    val_samples: Sequence[SelectorSample] | None = None,
    subsample_n: int | None = None,
    subsample_seed: int = 0,
    input_mask: InputMask | None = None,
) -> list[dict]:
    """Fine-tune a selector on limited labels with frozen base encoders.

    With ``joint`` the per-batch loss is CE(human) + alpha * CE(pseudo), where
    the pseudo target comes from the narration labeler applied to each
    sample's next narration.  ``subsample_n`` draws a seeded stratified subset
    first (label-budget sweeps).
    """
    if labels.count == 0:
        raise ValueError("empty label set")
    if subsample_n is not None:
        labels = subsample_labels(labels, subsample_n, subsample_seed)
    freeze_base_encoders(model)
    preps = [prepare_sample(s, model.bank) for s in labels.samples]
    val_preps = [prepare_sample(s, model.bank) for s in (val_samples or [])]
    aux_idx = None
    alpha = 0.0
    if joint is not None:
        aux_idx = [
            VIEW_INDEX[joint.labeler(s.base.next_text).kind] for s in labels.samples
        ]
        alpha = joint.alpha
    return run_training(
        model,
        preps,
        val_preps,
        settings,
        input_mask=input_mask,
        aux_target_idx=aux_idx,
        aux_weight=alpha,
    )


def joint_loss_terms(
    model: ViewPredictor,
    samples: Sequence[SelectorSample],
    joint: JointFinetuneConfig,
    input_mask: InputMask | None = None,
) -> tuple[float, float, float]:
    """(total, human CE, pseudo CE) for one batch under the joint objective."""
    preps = [prepare_sample(s, model.bank) for s in samples]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model.forward_prepared(preps, input_mask)
            human = torch.as_tensor([p.target_index for p in preps], dtype=torch.long)
            pseudo = torch.as_tensor(
                [VIEW_INDEX[joint.labeler(s.base.next_text).kind] for s in samples],
                dtype=torch.long,
            )
            ce_human = float(torch.nn.functional.cross_entropy(logits, human))
            ce_pseudo = float(torch.nn.functional.cross_entropy(logits, pseudo))
    finally:
        model.train(was_training)
    return ce_human + joint.alpha * ce_pseudo, ce_human, ce_pseudo
