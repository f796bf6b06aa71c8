"""Embedding tables and pluggable encoders that turn samples into token sequences.

Every token is an elementwise sum of its declared components: a content
embedding (projected frame feature or mean-pooled text embedding), plus a view
embedding, a temporal-bin embedding, and a modality embedding where
applicable.  The text token table is frozen after construction, standing in
for a pretrained language encoder, while the projection on top of it is
trainable; the frame path mirrors this with a trainable projection over
precomputed (frozen) frame features.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .data import Sample, SelectorSample, ViewKind, ViewLabel
from .errors import RecordValidationError

VIEW_INDEX = {ViewKind.EGO: 0, ViewKind.EXO: 1}


class TokenRole(Enum):
    FRAME = "frame"
    PAST_NARR = "past_narr"
    NEXT_NARR = "next_narr"
    CAND_EGO = "cand_ego"
    CAND_EXO = "cand_exo"
    CLS = "cls"


@dataclass(frozen=True)
class InputMask:
    """Which input groups survive token assembly (ablations omit whole groups)."""

    frames: bool = True
    past_narrations: bool = True
    next_narration: bool = True

    def dropped(self) -> list[str]:
        out = []
        if not self.frames:
            out.append("F")
        if not self.past_narrations:
            out.append("N")
        if not self.next_narration:
            out.append("Nprime")
        return out


@dataclass(frozen=True)
class EncoderBankConfig:
    model_dim: int = 64
    feature_dim: int = 16
    text_embed_dim: int = 32
    max_bins: int = 340
    time_bin_s: float = 0.1
    max_narration_tokens: int = 512
    candidate_view_embedding: bool = False
    candidate_temporal_embedding: bool = False
    table_init_scale: float = 0.02


@dataclass(eq=False)
class TokenSequence:
    """An assembled input sequence; position ids drive the positional table."""

    vectors: torch.Tensor  # [L, model_dim]
    roles: list[TokenRole]
    position_ids: list[int]
    cls_index: int

    def __post_init__(self) -> None:
        if self.roles.count(TokenRole.CLS) != 1 or self.roles[self.cls_index] != TokenRole.CLS:
            raise ValueError("token sequence must contain exactly one CLS token")

    def __len__(self) -> int:
        return len(self.roles)


def build_vocab(records: Iterable, max_size: int = 4096) -> dict[str, int]:
    """Frequency-ranked whitespace-token vocabulary over a corpus' narrations."""
    counts: Counter[str] = Counter()
    for rec in records:
        for seg in rec.narrations:
            counts.update(seg.text.lower().split())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    return {tok: i for i, (tok, _) in enumerate(ranked)}


def save_vocab(vocab: dict[str, int], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(vocab, fh, sort_keys=True)


def load_vocab(path: str | Path) -> dict[str, int]:
    with open(path, "r", encoding="utf-8") as fh:
        return {str(k): int(v) for k, v in json.load(fh).items()}


class EncoderBank(nn.Module):
    """All learnable tables plus the frame and narration encoders.

    The token-embedding table is frozen (pretrained-encoder stand-in); the
    view table is keyed 0 (ego) / 1 (exo); temporal bins are 0.1 s wide with
    out-of-range times clamped; an empty next narration maps to a dedicated
    learned null-text embedding.
    """

    def __init__(self, config: EncoderBankConfig, vocab: dict[str, int]) -> None:
        super().__init__()
        self.config = config
        self.vocab = dict(vocab)
        self.oov_index = len(self.vocab)
        d = config.model_dim
        s = config.table_init_scale

        self.frame_proj = nn.Linear(config.feature_dim, d, bias=False)
        self.token_emb = nn.Embedding(self.oov_index + 1, config.text_embed_dim)
        nn.init.normal_(self.token_emb.weight, mean=0.0, std=1.0)
        self.token_emb.weight.requires_grad_(False)
        self.text_proj = nn.Linear(config.text_embed_dim, d)
        self.null_text = nn.Parameter(torch.empty(d))
        self.view_table = nn.Embedding(2, d)
        self.temporal_table = nn.Embedding(config.max_bins, d)
        self.modality_frame = nn.Parameter(torch.empty(d))
        self.modality_text = nn.Parameter(torch.empty(d))
        self.cls_embedding = nn.Parameter(torch.empty(d))
        for table in (self.view_table.weight, self.temporal_table.weight):
            nn.init.uniform_(table, -s, s)
        for param in (self.null_text, self.modality_frame, self.modality_text, self.cls_embedding):
            nn.init.uniform_(param, -s, s)

    # -- primitive encoders ------------------------------------------------

    def time_bin(self, rel_time_s: float) -> int:
        """floor(rel_time / bin width), negatives clamped to 0, top clamped to max."""
        b = int(math.floor(rel_time_s / self.config.time_bin_s + 1e-9))
        return min(max(b, 0), self.config.max_bins - 1)

    def tokenize(self, text: str) -> list[int]:
        toks = text.lower().split()[: self.config.max_narration_tokens]
        return [self.vocab.get(t, self.oov_index) for t in toks]

    def _device(self) -> torch.device:
        return self.frame_proj.weight.device

    def _dtype(self) -> torch.dtype:
        return self.frame_proj.weight.dtype

    def pooled_text(self, text: str) -> torch.Tensor | None:
        """Mean of the frozen token embeddings; None for empty text."""
        ids = self.tokenize(text)
        if not ids:
            return None
        idx = torch.as_tensor(ids, dtype=torch.long, device=self._device())
        return self.token_emb(idx).mean(dim=0)

    def encode_text(self, text: str) -> torch.Tensor:
        """Projected narration content embedding (null embedding for empty text)."""
        pooled = self.pooled_text(text)
        if pooled is None:
            return self.null_text
        return self.text_proj(pooled)

    def encode_frame_content(self, feature: np.ndarray | torch.Tensor) -> torch.Tensor:
        feat = torch.as_tensor(feature, dtype=self._dtype(), device=self._device())
        if feat.shape[-1] != self.config.feature_dim:
            raise RecordValidationError(
                f"frame feature dim {feat.shape[-1]} != configured {self.config.feature_dim}"
            )
        return self.frame_proj(feat)

    def encode_frame_token(
        self, feature: np.ndarray | torch.Tensor, view: ViewLabel, rel_time_s: float
    ) -> torch.Tensor:
        """Content + view + temporal sum (modality is added at assembly time)."""
        idx = torch.as_tensor(VIEW_INDEX[view.kind], device=self._device())
        bin_idx = torch.as_tensor(self.time_bin(rel_time_s), device=self._device())
        return (
            self.encode_frame_content(feature)
            + self.view_table(idx)
            + self.temporal_table(bin_idx)
        )

    def encode_past_narration_token(
        self, text: str, view: ViewLabel, rel_mean_time_s: float
    ) -> torch.Tensor:
        if not text.strip():
            raise RecordValidationError("past narrations must have non-empty text")
        idx = torch.as_tensor(VIEW_INDEX[view.kind], device=self._device())
        bin_idx = torch.as_tensor(self.time_bin(rel_mean_time_s), device=self._device())
        return self.encode_text(text) + self.view_table(idx) + self.temporal_table(bin_idx)

    def encode_next_narration_token(self, text: str, rel_mean_time_s: float) -> torch.Tensor:
        # No view embedding: the upcoming view is exactly what is being predicted.
        bin_idx = torch.as_tensor(self.time_bin(rel_mean_time_s), device=self._device())
        return self.encode_text(text) + self.temporal_table(bin_idx)

    def pretrained_parameters(self) -> list[nn.Parameter]:
        """Frozen stand-ins for pretrained components (never optimized)."""
        return [self.token_emb.weight]

    def base_encoder_parameters(self) -> list[nn.Parameter]:
        """Frame + text encoder tensors frozen during selector fine-tuning."""
        return [
            self.frame_proj.weight,
            self.token_emb.weight,
            self.text_proj.weight,
            self.text_proj.bias,
            self.null_text,
        ]


# ---------------------------------------------------------------------------
# Prepared samples: tokenized once, encoded every step
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PreparedSample:
    """A sample reduced to index arrays and pooled frozen-text embeddings."""

    frame_features: torch.Tensor  # [Lf, feature_dim]
    frame_view_ids: torch.Tensor  # [Lf] long
    frame_bins: torch.Tensor  # [Lf] long
    narr_pooled: torch.Tensor  # [Ln, text_embed_dim] (Ln may be 0)
    narr_view_ids: torch.Tensor  # [Ln] long
    narr_bins: torch.Tensor  # [Ln] long
    next_pooled: torch.Tensor | None  # [text_embed_dim] or None when empty text
    next_bin: int
    cand_ego: torch.Tensor | None  # [Lc, feature_dim]
    cand_exo: torch.Tensor | None
    cand_bins: torch.Tensor | None  # [Lc] long, only when temporal embedding enabled
    target_index: int
    is_switch: bool
    scenario: str | None


def prepare_sample(sample: Sample | SelectorSample, bank: EncoderBank) -> PreparedSample:
    base = sample.base if isinstance(sample, SelectorSample) else sample
    dtype = bank._dtype()
    with torch.no_grad():
        frame_feats = torch.as_tensor(base.past_frame_features, dtype=dtype)
        frame_views = torch.as_tensor(
            [VIEW_INDEX[v.kind] for v in base.past_frame_views], dtype=torch.long
        )
        frame_bins = torch.as_tensor(
            [bank.time_bin(t) for t in base.past_frame_times], dtype=torch.long
        )
        pooled_list = []
        narr_views = []
        narr_bins = []
        for seg, view, rel_mean in base.past_narrations:
            pooled = bank.pooled_text(seg.text)
            if pooled is None:
                raise RecordValidationError("past narrations must have non-empty text")
            pooled_list.append(pooled)
            narr_views.append(VIEW_INDEX[view.kind])
            narr_bins.append(bank.time_bin(rel_mean))
        narr_pooled = (
            torch.stack(pooled_list)
            if pooled_list
            else torch.zeros((0, bank.config.text_embed_dim), dtype=dtype)
        )
        next_text, next_rel = base.next_narration
        next_pooled = bank.pooled_text(next_text)

        cand_ego = cand_exo = cand_bins = None
        if isinstance(sample, SelectorSample):
            cand_ego = torch.as_tensor(sample.ego_candidate_features, dtype=dtype)
            cand_exo = torch.as_tensor(sample.exo_candidate_features, dtype=dtype)
            if bank.config.candidate_temporal_embedding:
                # Candidate k sits one grid step after the last past frame.
                step = base.delta / cand_ego.shape[0]
                rels = [
                    base.past_frame_times[-1] + (k + 1) * step
                    for k in range(cand_ego.shape[0])
                ]
                cand_bins = torch.as_tensor(
                    [bank.time_bin(r) for r in rels], dtype=torch.long
                )
    return PreparedSample(
        frame_features=frame_feats,
        frame_view_ids=frame_views,
        frame_bins=frame_bins,
        narr_pooled=narr_pooled,
        narr_view_ids=torch.as_tensor(narr_views, dtype=torch.long),
        narr_bins=torch.as_tensor(narr_bins, dtype=torch.long),
        next_pooled=next_pooled,
        next_bin=bank.time_bin(next_rel),
        cand_ego=cand_ego,
        cand_exo=cand_exo,
        cand_bins=cand_bins,
        target_index=VIEW_INDEX[base.target.kind],
        is_switch=base.is_switch,
        scenario=base.scenario,
    )


def encode_prepared(
    prep: PreparedSample,
    bank: EncoderBank,
    input_mask: InputMask | None = None,
    candidate_position_offset: int | None = None,
) -> TokenSequence:
    """Encode a prepared sample into its token sequence.

    Sequence order is [frames, past narrations, next narration, ego
    candidates, exo candidates, CLS].  Base tokens and the CLS token take
    sequential position ids; candidate tokens take rows starting at
    ``candidate_position_offset`` so a selector can keep every base position
    aligned with the detector it was initialized from (sequential when None).
    """
    mask = input_mask or InputMask()
    device = bank._device()
    parts: list[torch.Tensor] = []
    roles: list[TokenRole] = []

    if mask.frames and prep.frame_features.shape[0] > 0:
        frames = (
            bank.frame_proj(prep.frame_features.to(device))
            + bank.view_table(prep.frame_view_ids.to(device))
            + bank.temporal_table(prep.frame_bins.to(device))
            + bank.modality_frame
        )
        parts.append(frames)
        roles.extend([TokenRole.FRAME] * frames.shape[0])
    if mask.past_narrations and prep.narr_pooled.shape[0] > 0:
        narrs = (
            bank.text_proj(prep.narr_pooled.to(device))
            + bank.view_table(prep.narr_view_ids.to(device))
            + bank.temporal_table(prep.narr_bins.to(device))
            + bank.modality_text
        )
        parts.append(narrs)
        roles.extend([TokenRole.PAST_NARR] * narrs.shape[0])
    if mask.next_narration:
        if prep.next_pooled is None:
            content = bank.null_text
        else:
            content = bank.text_proj(prep.next_pooled.to(device))
        bin_idx = torch.as_tensor(prep.next_bin, device=device)
        nxt = content + bank.temporal_table(bin_idx) + bank.modality_text
        parts.append(nxt.unsqueeze(0))
        roles.append(TokenRole.NEXT_NARR)

    n_base_tokens = sum(p.shape[0] for p in parts) + 1  # + CLS
    position_ids = list(range(n_base_tokens - 1))

    if prep.cand_ego is not None:
        for feats, role in ((prep.cand_ego, TokenRole.CAND_EGO), (prep.cand_exo, TokenRole.CAND_EXO)):
            cand = bank.frame_proj(feats.to(device)) + bank.modality_frame
            if bank.config.candidate_view_embedding:
                view_id = 0 if role == TokenRole.CAND_EGO else 1
                cand = cand + bank.view_table(torch.as_tensor(view_id, device=device))
            if bank.config.candidate_temporal_embedding and prep.cand_bins is not None:
                cand = cand + bank.temporal_table(prep.cand_bins.to(device))
            parts.append(cand)
            roles.extend([role] * cand.shape[0])
        n_cand = prep.cand_ego.shape[0] + prep.cand_exo.shape[0]
        offset = candidate_position_offset if candidate_position_offset is not None else n_base_tokens
        cand_positions = list(range(offset, offset + n_cand))
        position_ids = position_ids + cand_positions

    parts.append(bank.cls_embedding.unsqueeze(0))
    roles.append(TokenRole.CLS)
    position_ids.append(n_base_tokens - 1)

    vectors = torch.cat(parts, dim=0)
    return TokenSequence(
        vectors=vectors,
        roles=roles,
        position_ids=position_ids,
        cls_index=len(roles) - 1,
    )


def assemble_tokens(
    sample: Sample | SelectorSample,
    bank: EncoderBank,
    input_mask: InputMask | None = None,
    candidate_position_offset: int | None = None,
) -> TokenSequence:
    """Tokenize and encode a sample in one call (see :func:`encode_prepared`)."""
    prep = prepare_sample(sample, bank)
    return encode_prepared(prep, bank, input_mask, candidate_position_offset)


ROLE_CODES = {
    TokenRole.FRAME: 0,
    TokenRole.PAST_NARR: 1,
    TokenRole.NEXT_NARR: 2,
    TokenRole.CAND_EGO: 3,
    TokenRole.CAND_EXO: 4,
    TokenRole.CLS: 5,
}


def encode_prepared_batch(
    preps: Sequence[PreparedSample],
    bank: EncoderBank,
    input_mask: InputMask | None = None,
    candidate_position_offset: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched equivalent of :func:`encode_prepared` over padded tensors.

    Runs one embedding/projection op per token group instead of one per
    sample.  Returns (vectors [B, L, d], position_ids [B, L], padding mask
    [B, L] with True at padding, cls indices [B], role codes [B, L]).
    """
    mask = input_mask or InputMask()
    device = bank._device()
    dtype = bank._dtype()
    B = len(preps)

    nf = [p.frame_features.shape[0] if mask.frames else 0 for p in preps]
    nn_ = [p.narr_pooled.shape[0] if mask.past_narrations else 0 for p in preps]
    nx = [1 if mask.next_narration else 0 for _ in preps]
    nce = [p.cand_ego.shape[0] if p.cand_ego is not None else 0 for p in preps]
    ncx = [p.cand_exo.shape[0] if p.cand_exo is not None else 0 for p in preps]
    n_base = [a + b + c + 1 for a, b, c in zip(nf, nn_, nx)]
    lengths = [nb + ce + cx for nb, ce, cx in zip(n_base, nce, ncx)]
    L = max(lengths)
    d = bank.config.model_dim

    x = torch.zeros((B, L, d), dtype=dtype, device=device)
    pos = torch.zeros((B, L), dtype=torch.long, device=device)
    pad = torch.ones((B, L), dtype=torch.bool, device=device)
    roles = torch.full((B, L), -1, dtype=torch.long, device=device)
    cls_idx = torch.as_tensor([l - 1 for l in lengths], dtype=torch.long, device=device)

    def scatter(group_out: torch.Tensor, b_idx: list[int], s_idx: list[int], code: int) -> None:
        bi = torch.as_tensor(b_idx, dtype=torch.long, device=device)
        si = torch.as_tensor(s_idx, dtype=torch.long, device=device)
        x[bi, si] = group_out
        roles[bi, si] = code
        pad[bi, si] = False

    # Frames.
    if any(nf):
        feats = torch.cat([p.frame_features for p, n in zip(preps, nf) if n]).to(device)
        views = torch.cat([p.frame_view_ids for p, n in zip(preps, nf) if n]).to(device)
        bins = torch.cat([p.frame_bins for p, n in zip(preps, nf) if n]).to(device)
        out = (
            bank.frame_proj(feats)
            + bank.view_table(views)
            + bank.temporal_table(bins)
            + bank.modality_frame
        )
        b_idx = [i for i, n in enumerate(nf) for _ in range(n)]
        s_idx = [j for i, n in enumerate(nf) for j in range(n)]
        scatter(out, b_idx, s_idx, ROLE_CODES[TokenRole.FRAME])

    # Past narrations.
    if any(nn_):
        pooled = torch.cat([p.narr_pooled for p, n in zip(preps, nn_) if n]).to(device)
        views = torch.cat([p.narr_view_ids for p, n in zip(preps, nn_) if n]).to(device)
        bins = torch.cat([p.narr_bins for p, n in zip(preps, nn_) if n]).to(device)
        out = (
            bank.text_proj(pooled)
            + bank.view_table(views)
            + bank.temporal_table(bins)
            + bank.modality_text
        )
        b_idx = [i for i, n in enumerate(nn_) for _ in range(n)]
        s_idx = [nf[i] + j for i, n in enumerate(nn_) for j in range(n)]
        scatter(out, b_idx, s_idx, ROLE_CODES[TokenRole.PAST_NARR])

    # Next narration (null embedding when the text is empty).
    if mask.next_narration:
        has_text = [i for i, p in enumerate(preps) if p.next_pooled is not None]
        no_text = [i for i, p in enumerate(preps) if p.next_pooled is None]
        content = torch.empty((B, d), dtype=dtype, device=device)
        if has_text:
            pooled = torch.stack([preps[i].next_pooled for i in has_text]).to(device)
            content[torch.as_tensor(has_text, device=device)] = bank.text_proj(pooled)
        if no_text:
            content[torch.as_tensor(no_text, device=device)] = bank.null_text.to(dtype)
        bins = torch.as_tensor([p.next_bin for p in preps], dtype=torch.long, device=device)
        out = content + bank.temporal_table(bins) + bank.modality_text
        b_idx = list(range(B))
        s_idx = [nf[i] + nn_[i] for i in range(B)]
        scatter(out, b_idx, s_idx, ROLE_CODES[TokenRole.NEXT_NARR])

    # Candidate streams.
    for which, counts, code in (
        ("cand_ego", nce, ROLE_CODES[TokenRole.CAND_EGO]),
        ("cand_exo", ncx, ROLE_CODES[TokenRole.CAND_EXO]),
    ):
        if not any(counts):
            continue
        feats = torch.cat(
            [getattr(p, which) for p, n in zip(preps, counts) if n]
        ).to(device)
        out = bank.frame_proj(feats) + bank.modality_frame
        if bank.config.candidate_view_embedding:
            view_id = 0 if which == "cand_ego" else 1
            out = out + bank.view_table(torch.as_tensor(view_id, device=device))
        if bank.config.candidate_temporal_embedding:
            bins = torch.cat([p.cand_bins for p, n in zip(preps, counts) if n]).to(device)
            out = out + bank.temporal_table(bins)
        base_off = [
            nf[i] + nn_[i] + nx[i] + (nce[i] if which == "cand_exo" else 0)
            for i in range(B)
        ]
        b_idx = [i for i, n in enumerate(counts) for _ in range(n)]
        s_idx = [base_off[i] + j for i, n in enumerate(counts) for j in range(n)]
        scatter(out, b_idx, s_idx, code)

    # CLS.
    cls_out = bank.cls_embedding.to(dtype).unsqueeze(0).expand(B, d)
    scatter(cls_out, list(range(B)), [l - 1 for l in lengths], ROLE_CODES[TokenRole.CLS])

    # Position ids: sequential over base tokens with CLS closing the base block;
    # candidate tokens take dedicated rows past the configured offset.
    pos_rows: list[int] = []
    pos_cols: list[int] = []
    pos_vals: list[int] = []
    for i in range(B):
        base_len = n_base[i]
        seq_base = nf[i] + nn_[i] + nx[i]
        pos_rows.extend([i] * base_len)
        pos_cols.extend(list(range(seq_base)) + [lengths[i] - 1])
        pos_vals.extend(range(base_len))
        n_cand = nce[i] + ncx[i]
        if n_cand:
            offset = candidate_position_offset if candidate_position_offset is not None else base_len
            pos_rows.extend([i] * n_cand)
            pos_cols.extend(range(seq_base, seq_base + n_cand))
            pos_vals.extend(range(offset, offset + n_cand))
    pos[
        torch.as_tensor(pos_rows, dtype=torch.long, device=device),
        torch.as_tensor(pos_cols, dtype=torch.long, device=device),
    ] = torch.as_tensor(pos_vals, dtype=torch.long, device=device)
    return x, pos, pad, cls_idx, roles
