"""Transformer view predictor: aggregator over assembled tokens plus a CLS head.

The same module serves as the pretext-trained switch detector (no candidate
tokens) and, with candidate positional rows enabled, as the backbone of the
fine-tuned view selector.  Training uses AdamW over the non-frozen parameters,
deterministic under a fixed seed, with early stopping on validation balanced
accuracy.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import (
    Sample,
    SelectorSample,
    VideoRecord,
    ViewKind,
    ViewLabel,
    WindowConfig,
    build_detection_samples,
    extract_sample,
    overlay_view_track,
    prediction_grid,
)
from .encoders import (
    ROLE_CODES,
    EncoderBank,
    EncoderBankConfig,
    InputMask,
    PreparedSample,
    TokenRole,
    TokenSequence,
    build_vocab,
    encode_prepared_batch,
    prepare_sample,
)
from .errors import (
    CheckpointConfigError,
    SequenceTooLongError,
    TrainingDivergedError,
)

CHECKPOINT_FORMAT_VERSION = 1

_KIND_BY_INDEX = (ViewKind.EGO, ViewKind.EXO)


@dataclass(frozen=True)
class AggregatorConfig:
    """Transformer aggregator hyperparameters (paper-scale defaults)."""

    num_layers: int = 8
    num_heads: int = 8
    model_dim: int = 768
    feedforward_dim: int | None = None  # 4 * model_dim when None
    dropout: float = 0.0
    max_base_positions: int = 160
    max_candidate_positions: int = 0

    def __post_init__(self) -> None:
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")

    @classmethod
    def desk_preset(cls, **overrides) -> "AggregatorConfig":
        """Small configuration for CPU-scale experiments and tests."""
        defaults = dict(num_layers=2, num_heads=2, model_dim=64)
        defaults.update(overrides)
        return cls(**defaults)

    @property
    def total_positions(self) -> int:
        return self.max_base_positions + self.max_candidate_positions


@dataclass(frozen=True)
class HeadConfig:
    hidden_dims: tuple[int, ...] = (256, 64)
    num_classes: int = 2

    def __post_init__(self) -> None:
        if self.num_classes != 2:
            raise ValueError("the view head is strictly two-class")


@dataclass(frozen=True)
class Prediction:
    """Two-class logits, softmax probabilities (ego first), and the argmax label."""

    logits: tuple[float, float]
    probs: tuple[float, float]
    predicted: ViewLabel

    @classmethod
    def from_logits(cls, logits: Sequence[float]) -> "Prediction":
        a, b = float(logits[0]), float(logits[1])
        m = max(a, b)
        ea, eb = math.exp(a - m), math.exp(b - m)
        z = ea + eb
        probs = (ea / z, eb / z)
        # Argmax with ties resolving to the exo (wide) default.
        idx = 0 if probs[0] > probs[1] else 1
        return cls(
            logits=(a, b),
            probs=probs,
            predicted=ViewLabel(_KIND_BY_INDEX[idx], probs[idx]),
        )

    @classmethod
    def from_ego_probability(cls, p_ego: float) -> "Prediction":
        p = min(max(float(p_ego), 1e-9), 1.0 - 1e-9)
        return cls.from_logits((math.log(p), math.log(1.0 - p)))


def loss_detector(pred: Prediction, target: ViewLabel) -> float:
    """Two-class cross-entropy of one prediction against a hard label."""
    a, b = pred.logits
    m = max(a, b)
    lse = m + math.log(math.exp(a - m) + math.exp(b - m))
    chosen = a if target.kind == ViewKind.EGO else b
    return lse - chosen


class ViewPredictor(nn.Module):
    """Aggregator + classification head over an :class:`EncoderBank`."""

    def __init__(
        self,
        bank: EncoderBank,
        aggregator: AggregatorConfig,
        head: HeadConfig = HeadConfig(),
    ) -> None:
        super().__init__()
        if aggregator.model_dim != bank.config.model_dim:
            raise CheckpointConfigError(
                f"aggregator model_dim {aggregator.model_dim} != bank {bank.config.model_dim}"
            )
        self.bank = bank
        self.aggregator_config = aggregator
        self.head_config = head
        d = aggregator.model_dim
        self.pos_table = nn.Embedding(aggregator.total_positions, d)
        nn.init.uniform_(
            self.pos_table.weight,
            -bank.config.table_init_scale,
            bank.config.table_init_scale,
        )
        ff = aggregator.feedforward_dim or 4 * d
        layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=aggregator.num_heads,
            dim_feedforward=ff,
            dropout=aggregator.dropout,
            batch_first=True,
        )
        # One consistent kernel path for train and eval (no nested-tensor fast path).
        self.encoder = nn.TransformerEncoder(
            layer, aggregator.num_layers, enable_nested_tensor=False
        )
        dims = [d, *head.hidden_dims]
        layers: list[nn.Module] = []
        for a, b in zip(dims, dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        final = nn.Linear(dims[-1], head.num_classes)
        # Zero-init the final layer: a fresh model is exactly uniform.
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        layers.append(final)
        self.head = nn.Sequential(*layers)

    # -- forward -------------------------------------------------------------

    def _forward_padded(
        self,
        x: torch.Tensor,
        pos: torch.Tensor,
        pad: torch.Tensor,
        cls_idx: torch.Tensor,
        roles: torch.Tensor | None = None,
        masked_roles: frozenset[TokenRole] | None = None,
    ) -> torch.Tensor:
        if int(pos.max()) >= self.aggregator_config.total_positions:
            raise SequenceTooLongError(
                f"position {int(pos.max())} exceeds table of "
                f"{self.aggregator_config.total_positions}"
            )
        if masked_roles:
            if roles is None:
                raise ValueError("masking roles requires role codes")
            for role in masked_roles:
                pad = pad | (roles == ROLE_CODES[role])
        x = x + self.pos_table(pos)
        out = self.encoder(x, src_key_padding_mask=pad)
        cls_out = out[torch.arange(x.shape[0], device=x.device), cls_idx]
        logits = self.head(cls_out)
        if not torch.isfinite(logits).all():
            raise TrainingDivergedError("non-finite activations in forward pass")
        return logits

    def forward_sequences(
        self,
        sequences: Sequence[TokenSequence],
        masked_roles: frozenset[TokenRole] | None = None,
    ) -> torch.Tensor:
        """Batch pre-assembled variable-length token sequences into [B, 2] logits."""
        device = self.pos_table.weight.device
        B = len(sequences)
        L = max(len(s) for s in sequences)
        d = self.aggregator_config.model_dim
        dtype = self.pos_table.weight.dtype
        x = torch.zeros((B, L, d), dtype=dtype, device=device)
        pos = torch.zeros((B, L), dtype=torch.long, device=device)
        pad = torch.ones((B, L), dtype=torch.bool, device=device)
        roles = torch.full((B, L), -1, dtype=torch.long, device=device)
        cls_idx = torch.zeros(B, dtype=torch.long, device=device)
        for i, seq in enumerate(sequences):
            n = len(seq)
            x[i, :n] = seq.vectors
            pos[i, :n] = torch.as_tensor(seq.position_ids, device=device)
            pad[i, :n] = False
            roles[i, :n] = torch.as_tensor(
                [ROLE_CODES[r] for r in seq.roles], device=device
            )
            cls_idx[i] = seq.cls_index
        return self._forward_padded(x, pos, pad, cls_idx, roles, masked_roles)

    def forward_prepared(
        self,
        preps: Sequence[PreparedSample],
        input_mask: InputMask | None = None,
        masked_roles: frozenset[TokenRole] | None = None,
    ) -> torch.Tensor:
        x, pos, pad, cls_idx, roles = encode_prepared_batch(
            preps,
            self.bank,
            input_mask,
            candidate_position_offset=self.aggregator_config.max_base_positions,
        )
        return self._forward_padded(x, pos, pad, cls_idx, roles, masked_roles)

    def predict(
        self,
        sample: Sample | SelectorSample,
        input_mask: InputMask | None = None,
        masked_roles: frozenset[TokenRole] | None = None,
    ) -> Prediction:
        return self.predict_many([sample], input_mask, masked_roles=masked_roles)[0]

    def predict_many(
        self,
        samples: Sequence[Sample | SelectorSample],
        input_mask: InputMask | None = None,
        batch_size: int = 64,
        masked_roles: frozenset[TokenRole] | None = None,
    ) -> list[Prediction]:
        was_training = self.training
        self.eval()
        out: list[Prediction] = []
        try:
            with torch.no_grad():
                for i in range(0, len(samples), batch_size):
                    chunk = samples[i : i + batch_size]
                    preps = [prepare_sample(s, self.bank) for s in chunk]
                    logits = self.forward_prepared(preps, input_mask, masked_roles)
                    out.extend(Prediction.from_logits(row) for row in logits.tolist())
        finally:
            self.train(was_training)
        return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSettings:
    """Optimizer/loop knobs shared by pretext training and fine-tuning."""

    seed: int = 0
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    patience: int | None = 10


@dataclass(frozen=True)
class DetectorTrainConfig:
    window: WindowConfig = WindowConfig()
    bank: EncoderBankConfig = EncoderBankConfig()
    aggregator: AggregatorConfig = AggregatorConfig.desk_preset()
    head: HeadConfig = HeadConfig()
    train: TrainSettings = TrainSettings()
    val_fraction: float = 0.2
    stride_s: float | None = None
    input_mask: InputMask = InputMask()
    vocab_size: int = 4096


@dataclass(eq=False)
class TrainResult:
    model: ViewPredictor
    history: list[dict]
    vocab: dict[str, int]
    val_video_ids: list[str] = field(default_factory=list)


def derive_bank_config(cfg: DetectorTrainConfig, feature_dim: int) -> EncoderBankConfig:
    """Bank config with corpus feature dim and bins covering the narration window."""
    bins = int(math.ceil((cfg.window.past_narrations_s + cfg.window.delta_s) / cfg.bank.time_bin_s)) + 1
    return replace(
        cfg.bank,
        feature_dim=feature_dim,
        model_dim=cfg.aggregator.model_dim,
        max_bins=max(cfg.bank.max_bins, bins),
    )


def _balanced_accuracy(
    pred_idx: np.ndarray, target_idx: np.ndarray, switches: np.ndarray
) -> float:
    """Mean over subsets of mean per-class recall; absent groups are skipped."""
    groups = 2 * switches.astype(int) + target_idx
    correct = (pred_idx == target_idx).astype(float)
    subs = []
    for pair in ((0, 1), (2, 3)):
        recalls = [
            float(correct[groups == g].mean()) for g in pair if (groups == g).any()
        ]
        if recalls:
            subs.append(sum(recalls) / len(recalls))
    return sum(subs) / len(subs)


def run_training(
    model: ViewPredictor,
    train_preps: Sequence[PreparedSample],
    val_preps: Sequence[PreparedSample],
    settings: TrainSettings,
    input_mask: InputMask | None = None,
    aux_target_idx: Sequence[int] | None = None,
    aux_weight: float = 0.0,
    trainable: Iterable[nn.Parameter] | None = None,
) -> list[dict]:
    """Shared deterministic training loop.

    ``aux_target_idx`` adds ``aux_weight`` * cross-entropy against a second
    label stream (joint fine-tuning); the main loss is always cross-entropy
    against each prepared sample's target.  Early stopping tracks validation
    balanced accuracy and restores the best parameters.
    """
    if not train_preps:
        raise ValueError("empty training set")
    rng = np.random.default_rng(settings.seed)
    params = [p for p in (trainable if trainable is not None else model.parameters()) if p.requires_grad]
    optimizer = torch.optim.AdamW(
        params, lr=settings.learning_rate, weight_decay=settings.weight_decay
    )
    targets = torch.as_tensor([p.target_index for p in train_preps], dtype=torch.long)
    aux = (
        torch.as_tensor(list(aux_target_idx), dtype=torch.long)
        if aux_target_idx is not None
        else None
    )

    history: list[dict] = []
    best_acc = -1.0
    best_state: dict | None = None
    stale = 0
    for epoch in range(settings.epochs):
        model.train()
        order = rng.permutation(len(train_preps))
        total_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), settings.batch_size):
            idx = torch.as_tensor(order[start : start + settings.batch_size], dtype=torch.long)
            batch = [train_preps[i] for i in idx.tolist()]
            logits = model.forward_prepared(batch, input_mask)
            loss = F.cross_entropy(logits, targets[idx])
            if aux is not None and aux_weight > 0.0:
                loss = loss + aux_weight * F.cross_entropy(logits, aux[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}, batch {n_batches}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += float(loss.detach())
            n_batches += 1
        row: dict = {"epoch": epoch, "train_loss": total_loss / max(n_batches, 1)}
        if val_preps:
            val_loss, val_acc = evaluate_prepared(model, val_preps, input_mask)
            row["val_loss"] = val_loss
            row["val_balanced_accuracy"] = val_acc
            if val_acc > best_acc + 1e-12:
                best_acc = val_acc
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
        history.append(row)
        if settings.patience is not None and val_preps and stale > settings.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return history


def evaluate_prepared(
    model: ViewPredictor,
    preps: Sequence[PreparedSample],
    input_mask: InputMask | None = None,
    batch_size: int = 128,
) -> tuple[float, float]:
    """(mean loss, balanced accuracy) over prepared samples."""
    was_training = model.training
    model.eval()
    losses = []
    pred_idx = []
    try:
        with torch.no_grad():
            for i in range(0, len(preps), batch_size):
                batch = preps[i : i + batch_size]
                logits = model.forward_prepared(batch, input_mask)
                t = torch.as_tensor([p.target_index for p in batch], dtype=torch.long)
                losses.append(float(F.cross_entropy(logits, t, reduction="sum")))
                pred_idx.extend(logits.argmax(dim=1).tolist())
    finally:
        model.train(was_training)
    target_idx = np.array([p.target_index for p in preps])
    switches = np.array([p.is_switch for p in preps])
    acc = _balanced_accuracy(np.array(pred_idx), target_idx, switches)
    return sum(losses) / len(preps), acc


def train_detector(
    records: Sequence[VideoRecord], cfg: DetectorTrainConfig
) -> TrainResult:
    """Pretext-train a switch detector on records carrying (pseudo) view tracks.

    Deterministic under ``cfg.train.seed``: corpus split, parameter init, batch
    order, and optimizer state all derive from it.
    """
    torch.manual_seed(cfg.train.seed)
    rng = np.random.default_rng(cfg.train.seed)
    vocab = build_vocab(records, cfg.vocab_size)
    bank = EncoderBank(derive_bank_config(cfg, records[0].feature_dim), vocab)
    model = ViewPredictor(bank, cfg.aggregator, cfg.head)

    ids = sorted({r.video_id for r in records})
    perm = rng.permutation(len(ids))
    n_val = int(round(cfg.val_fraction * len(ids))) if len(ids) > 1 else 0
    val_ids = {ids[i] for i in perm[:n_val]}
    train_recs = [r for r in records if r.video_id not in val_ids]
    val_recs = [r for r in records if r.video_id in val_ids]

    train_samples = build_detection_samples(train_recs, cfg.window, cfg.stride_s)
    val_samples = build_detection_samples(val_recs, cfg.window, cfg.stride_s)
    train_preps = [prepare_sample(s, bank) for s in train_samples]
    val_preps = [prepare_sample(s, bank) for s in val_samples]

    # The frozen text-token table is excluded via requires_grad already.
    history = run_training(
        model,
        train_preps,
        val_preps,
        cfg.train,
        input_mask=cfg.input_mask,
    )
    return TrainResult(model=model, history=history, vocab=vocab, val_video_ids=sorted(val_ids))


# ---------------------------------------------------------------------------
# Sequence prediction
# ---------------------------------------------------------------------------


class PredictMode(str, Enum):
    TEACHER_FORCING = "teacher_forcing"
    AUTOREGRESSIVE = "autoregressive"


def predict_sequence(
    model: ViewPredictor,
    record: VideoRecord,
    window: WindowConfig,
    stride_s: float | None = None,
    mode: PredictMode = PredictMode.TEACHER_FORCING,
    input_mask: InputMask | None = None,
) -> list[tuple[float, Prediction]]:
    """One prediction per grid point t = k*stride with sufficient context.

    Teacher forcing reads past views from the record's own track; the
    autoregressive mode overwrites the track with the model's predictions as
    it walks forward.
    """
    stride = stride_s if stride_s is not None else window.delta_s
    working = record
    out: list[tuple[float, Prediction]] = []
    for t in prediction_grid(record, window, stride):
        sample = extract_sample(working, t, window)
        pred = model.predict(sample, input_mask)
        out.append((t, pred))
        if mode == PredictMode.AUTOREGRESSIVE:
            track = overlay_view_track(
                working.view_track, t, t + window.delta_s, pred.predicted
            )
            working = working.with_view_track(track)
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    model: ViewPredictor,
    component: str,
    history: list[dict] | None = None,
    extra_config: dict | None = None,
) -> None:
    """Single-file container: format version, config echo, tensors, history."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "component": component,
        "config": {
            "bank": model.bank.config,
            "aggregator": model.aggregator_config,
            "head": model.head_config,
            "vocab": model.bank.vocab,
            "extra": extra_config or {},
        },
        "state_dict": model.state_dict(),
        "history": history or [],
    }
    torch.save(payload, path)


def load_checkpoint(
    path: str | Path,
    expected_component: str | None = None,
    expected_aggregator: AggregatorConfig | None = None,
) -> tuple[ViewPredictor, dict, list[dict]]:
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointConfigError(
            f"unsupported checkpoint format {payload.get('format_version')}"
        )
    if expected_component is not None and payload["component"] != expected_component:
        raise CheckpointConfigError(
            f"checkpoint holds component {payload['component']!r}, "
            f"expected {expected_component!r}"
        )
    cfg = payload["config"]
    if expected_aggregator is not None and cfg["aggregator"] != expected_aggregator:
        raise CheckpointConfigError("checkpoint aggregator config mismatch")
    bank = EncoderBank(cfg["bank"], cfg["vocab"])
    model = ViewPredictor(bank, cfg["aggregator"], cfg["head"])
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointConfigError(f"checkpoint tensors do not fit config: {exc}") from exc
    return model, cfg, payload.get("history", [])
