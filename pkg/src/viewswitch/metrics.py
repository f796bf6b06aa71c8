"""Balanced evaluation protocol: per-subset metrics, agreement filtering, significance.

Test instances are split into *same-view* and *view-switch* subsets by whether
the target view differs from the most recent past view.  Every metric is
computed separately per subset and the reported "balanced" value is the
arithmetic mean of the two, which makes constant predictors score exactly 50%
regardless of class or subset frequencies.

Within a subset, accuracy is class-balanced (mean per-class recall) and AP is
macro-averaged over treating each class as the positive one, keeping all three
metrics symmetric under an ego/exo relabeling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Sample, SelectorSample, ViewKind
from .errors import DegenerateSubsetError

AGREEMENT_PRESETS: Mapping[str, float] = {"7/9": 7.0 / 9.0, "8/9": 8.0 / 9.0, "9/9": 1.0}


def auc(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """Rank-based area under the ROC curve.

    Equivalent to the fraction of (positive, negative) pairs ranked correctly,
    with tied scores contributing 0.5 per pair.  Raises
    :class:`DegenerateSubsetError` when only one class is present.
    """
    scores = np.asarray(scores, dtype=float)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateSubsetError("degenerate subset: only one class present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # Average 1-based rank over the tie group; exact in binary floats.
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - 0.5 * n_pos * (n_pos + 1)) / (n_pos * n_neg)


def average_precision(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """AP of the precision/recall sweep in descending score order.

    Precision is taken at each positive and averaged.  Ties are broken by the
    stable original order.  Raises :class:`DegenerateSubsetError` when there
    are no positives.
    """
    scores = np.asarray(scores, dtype=float)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise DegenerateSubsetError("degenerate subset: no positive instances")
    order = np.argsort(-scores, kind="stable")
    precisions = []
    tp = 0
    for k, idx in enumerate(order, start=1):
        if pos[idx]:
            tp += 1
            precisions.append(tp / k)
    return math.fsum(precisions) / n_pos


def class_balanced_accuracy(
    predicted: Sequence[ViewKind], actual: Sequence[ViewKind]
) -> float:
    """Mean per-class recall over the classes present in ``actual``."""
    if len(predicted) != len(actual):
        raise ValueError("prediction/label length mismatch")
    if not actual:
        raise DegenerateSubsetError("degenerate subset: empty input")
    recalls = []
    for kind in (ViewKind.EGO, ViewKind.EXO):
        idx = [i for i, a in enumerate(actual) if a == kind]
        if not idx:
            continue
        recalls.append(sum(predicted[i] == kind for i in idx) / len(idx))
    return math.fsum(recalls) / len(recalls)


@dataclass(frozen=True)
class SubsetMetrics:
    """Metrics over one instance subset; fields are None when not computable."""

    n: int
    accuracy: float | None
    auc: float | None
    ap: float | None

    def to_dict(self) -> dict:
        return {"n": self.n, "accuracy": self.accuracy, "auc": self.auc, "ap": self.ap}


@dataclass(frozen=True)
class SignificanceResult:
    p_value: float
    test_name: str
    n_resamples: int

    def to_dict(self) -> dict:
        return {
            "p_value": self.p_value,
            "test_name": self.test_name,
            "n_resamples": self.n_resamples,
        }


@dataclass(frozen=True)
class EvalReport:
    """Balanced same-view/view-switch metrics plus optional breakdowns."""

    same_view: SubsetMetrics | None
    view_switch: SubsetMetrics | None
    balanced_accuracy: float | None
    balanced_auc: float | None
    balanced_ap: float | None
    n_total: int
    per_scenario: dict[str, float] | None = None
    significance: SignificanceResult | None = None
    annotator_agreement: float | None = None

    def to_dict(self) -> dict:
        return {
            "same_view": self.same_view.to_dict() if self.same_view else None,
            "view_switch": self.view_switch.to_dict() if self.view_switch else None,
            "balanced_accuracy": self.balanced_accuracy,
            "balanced_auc": self.balanced_auc,
            "balanced_ap": self.balanced_ap,
            "n_total": self.n_total,
            "per_scenario": self.per_scenario,
            "significance": self.significance.to_dict() if self.significance else None,
            "annotator_agreement": self.annotator_agreement,
        }


def _subset_metrics(ego_scores: list[float], targets: list[ViewKind]) -> SubsetMetrics:
    n = len(targets)
    if n == 0:
        return SubsetMetrics(n=0, accuracy=None, auc=None, ap=None)
    predicted = [ViewKind.EGO if s > 0.5 else ViewKind.EXO for s in ego_scores]
    accuracy = class_balanced_accuracy(predicted, targets)
    pos_ego = [t == ViewKind.EGO for t in targets]
    try:
        auc_val: float | None = auc(ego_scores, pos_ego)
    except DegenerateSubsetError:
        auc_val = None
    try:
        ap_ego = average_precision(ego_scores, pos_ego)
        ap_exo = average_precision([1.0 - s for s in ego_scores], [not p for p in pos_ego])
        ap_val: float | None = 0.5 * (ap_ego + ap_exo)
    except DegenerateSubsetError:
        ap_val = None
    return SubsetMetrics(n=n, accuracy=accuracy, auc=auc_val, ap=ap_val)


def _mean_or_none(a: float | None, b: float | None) -> float | None:
    if a is None or b is None:
        return None
    return 0.5 * (a + b)


def balanced_report(
    predictions: Sequence,
    samples: Sequence[Sample | SelectorSample],
    by_scenario: bool = False,
    min_scenario_instances: int = 10,
) -> EvalReport:
    """Build the balanced evaluation report from aligned predictions and samples.

    ``predictions`` must expose ``probs`` with the ego probability first (see
    :class:`viewswitch.detector.Prediction`).  An empty subset is flagged as
    absent and the balanced means are omitted.
    """
    if len(predictions) != len(samples):
        raise ValueError("predictions and samples must align")
    ego_scores = [float(p.probs[0]) for p in predictions]
    targets = [_target_kind(s) for s in samples]
    switches = [s.is_switch for s in samples]

    def subset(flag: bool) -> SubsetMetrics:
        idx = [i for i, sw in enumerate(switches) if sw == flag]
        return _subset_metrics([ego_scores[i] for i in idx], [targets[i] for i in idx])

    same = subset(False)
    switch = subset(True)
    report = EvalReport(
        same_view=same if same.n else None,
        view_switch=switch if switch.n else None,
        balanced_accuracy=_mean_or_none(same.accuracy, switch.accuracy),
        balanced_auc=_mean_or_none(same.auc, switch.auc),
        balanced_ap=_mean_or_none(same.ap, switch.ap),
        n_total=len(samples),
    )
    if by_scenario:
        per: dict[str, float] = {}
        scenarios = sorted({s.scenario for s in samples if s.scenario is not None})
        for name in scenarios:
            idx = [i for i, s in enumerate(samples) if s.scenario == name]
            if len(idx) < min_scenario_instances:
                continue
            sub_same = _subset_metrics(
                [ego_scores[i] for i in idx if not switches[i]],
                [targets[i] for i in idx if not switches[i]],
            )
            sub_switch = _subset_metrics(
                [ego_scores[i] for i in idx if switches[i]],
                [targets[i] for i in idx if switches[i]],
            )
            bal = _mean_or_none(sub_same.ap, sub_switch.ap)
            if bal is not None:
                per[name] = bal
        report = replace(report, per_scenario=per)
    return report


def _target_kind(sample: Sample | SelectorSample) -> ViewKind:
    base = sample.base if isinstance(sample, SelectorSample) else sample
    return base.target.kind


def scenario_csv(report: EvalReport) -> str:
    """CSV export of the per-scenario balanced-AP rows."""
    lines = ["scenario,balanced_ap"]
    for name, value in (report.per_scenario or {}).items():
        lines.append(f"{name},{value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Inter-annotator agreement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationInstance:
    """One test instance with its annotator votes and (post-filter) accepted label."""

    instance_id: str
    votes: tuple[ViewKind, ...]
    accepted_label: ViewKind | None = None


def cohen_kappa(votes_a: Sequence[ViewKind], votes_b: Sequence[ViewKind]) -> float:
    """Two-rater Cohen's kappa; errors when expected agreement is exactly 1."""
    if len(votes_a) != len(votes_b) or not votes_a:
        raise ValueError("vote vectors must be non-empty and equal length")
    n = len(votes_a)
    observed = sum(a == b for a, b in zip(votes_a, votes_b)) / n
    labels = set(votes_a) | set(votes_b)
    expected = 0.0
    for lab in labels:
        pa = sum(v == lab for v in votes_a) / n
        pb = sum(v == lab for v in votes_b) / n
        expected += pa * pb
    if abs(1.0 - expected) < 1e-12:
        raise DegenerateSubsetError("kappa undefined: expected agreement is 1")
    return (observed - expected) / (1.0 - expected)


def filter_instances(
    instances: Iterable[AnnotationInstance], threshold: float
) -> list[AnnotationInstance]:
    """Keep instances whose majority vote share reaches ``threshold``.

    Accepted instances come back with ``accepted_label`` set to the unique
    majority kind; raising the threshold never adds instances.
    """
    out = []
    for inst in instances:
        counts: dict[ViewKind, int] = {}
        for v in inst.votes:
            counts[v] = counts.get(v, 0) + 1
        best = max(counts.values())
        winners = [k for k, c in counts.items() if c == best]
        share = best / len(inst.votes)
        if len(winners) == 1 and share >= threshold - 1e-9:
            out.append(replace(inst, accepted_label=winners[0]))
    return out


def mean_pairwise_kappa(instances: Sequence[AnnotationInstance]) -> float:
    """Mean Cohen's kappa over all annotator pairs (columns of the vote matrix)."""
    if not instances:
        raise ValueError("no instances")
    n_annot = len(instances[0].votes)
    if any(len(i.votes) != n_annot for i in instances):
        raise ValueError("instances disagree on annotator count")
    kappas = []
    for i in range(n_annot):
        for j in range(i + 1, n_annot):
            col_i = [inst.votes[i] for inst in instances]
            col_j = [inst.votes[j] for inst in instances]
            try:
                kappas.append(cohen_kappa(col_i, col_j))
            except DegenerateSubsetError:
                continue
    if not kappas:
        raise DegenerateSubsetError("kappa undefined for every annotator pair")
    return math.fsum(kappas) / len(kappas)


# ---------------------------------------------------------------------------
# Significance testing
# ---------------------------------------------------------------------------


def significance(
    preds_a: Sequence,
    preds_b: Sequence,
    samples: Sequence[Sample | SelectorSample],
    n_resamples: int = 10_000,
    seed: int = 0,
) -> SignificanceResult:
    """Paired bootstrap over instances on balanced accuracy, two-sided.

    Instances are resampled with replacement (the same draw for both systems);
    the p-value uses the add-one convention, so identical prediction vectors
    give exactly 1.0.  Deterministic under ``seed``.
    """
    if n_resamples < 100:
        raise ValueError("n_resamples must be at least 100")
    if not (len(preds_a) == len(preds_b) == len(samples)):
        raise ValueError("prediction vectors and samples must align")
    n = len(samples)
    targets = np.array([0 if _target_kind(s) == ViewKind.EGO else 1 for s in samples])
    switches = np.array([s.is_switch for s in samples], dtype=bool)
    correct_a = np.array(
        [p.predicted.kind == _target_kind(s) for p, s in zip(preds_a, samples)], dtype=float
    )
    correct_b = np.array(
        [p.predicted.kind == _target_kind(s) for p, s in zip(preds_b, samples)], dtype=float
    )
    # Group = 2*switch + target class; balanced accuracy is the mean over
    # subsets of the mean per-class recall inside each subset.
    groups = 2 * switches.astype(int) + targets

    def stat(correct: np.ndarray, idx: np.ndarray) -> float:
        g = groups[idx]
        c = correct[idx]
        recalls: dict[int, float] = {}
        for grp in range(4):
            mask = g == grp
            if mask.any():
                recalls[grp] = float(c[mask].mean())
        subs = []
        for pair in ((0, 1), (2, 3)):
            present = [recalls[p] for p in pair if p in recalls]
            if present:
                subs.append(sum(present) / len(present))
        return sum(subs) / len(subs)

    rng = np.random.default_rng(seed)
    deltas = np.empty(n_resamples)
    for b in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        deltas[b] = stat(correct_a, idx) - stat(correct_b, idx)
    le = int((deltas <= 0).sum())
    ge = int((deltas >= 0).sum())
    p = min(1.0, 2.0 * (min(le, ge) + 1) / (n_resamples + 1))
    return SignificanceResult(
        p_value=p,
        test_name="paired_bootstrap_balanced_accuracy",
        n_resamples=n_resamples,
    )
