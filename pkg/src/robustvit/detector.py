"""Consistency-based adversarial input detection.

An input is scored by the Frobenius norm of the pairwise KL-divergence
matrix over the ensemble members' output distributions; disagreement between
the intermediate heads and the final classifier pushes the score up, and a
score above the threshold tau flags the input as adversarial.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import ImageBatch
from .ensemble import SelfEnsemble
from .errors import ConfigurationError


@dataclass(frozen=True)
class DetectorConfig:
    tau: float = 0.0
    smoothing_eps: float = 1e-8
    # log base: natural (divergences in nats)

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise ConfigurationError("tau must be >= 0")
        if not 0 < self.smoothing_eps <= 1e-3:
            raise ConfigurationError("smoothing_eps must lie in (0, 1e-3]")


def _validate_distribution(p: np.ndarray, atol: float = 1e-5) -> None:
    if p.ndim != 1:
        raise ValueError("distributions must be 1-D")
    if (p < -atol).any():
        raise ValueError("distribution has negative entries")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"distribution sums to {p.sum():.6f}, not 1")


def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    if eps == 0:
        return p
    return (p + eps) / (1.0 + eps * p.shape[0])


def kl_divergence(p, q, smoothing_eps: float = 0.0) -> float:
    """KL(p || q) in nats, with optional symmetric additive smoothing.

    Without smoothing the divergence is +inf whenever q has a zero where p
    does not; smoothing (add eps, renormalize, applied to both arguments)
    keeps it finite.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    _validate_distribution(p)
    _validate_distribution(q)
    p = _smooth(p, smoothing_eps)
    q = _smooth(q, smoothing_eps)
    support = p > 0
    with np.errstate(divide="ignore"):
        terms = p[support] * (np.log(p[support]) - np.log(q[support]))
    return float(terms.sum())


@dataclass
class KLMatrix:
    """Pairwise divergence matrix over the ensemble distributions.

    Entry (i, j) is KL(d_i || d_j) with the final classifier last; the
    diagonal is exactly zero and the score is the Frobenius norm of the full
    matrix.
    """

    entries: np.ndarray
    frobenius_norm: float


def kl_matrix(distributions, smoothing_eps: float = 0.0) -> KLMatrix:
    """Full pairwise KL matrix over m+1 distributions (final classifier last).

    Rows and columns involving the final classifier are populated in both
    directions so the squared-entry sum is over the complete matrix.
    """
    dists = [np.asarray(d, dtype=np.float64) for d in distributions]
    if len(dists) < 2:
        raise ValueError("need at least two distributions (one head + final classifier)")
    n = len(dists)
    entries = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                entries[i, j] = kl_divergence(dists[i], dists[j], smoothing_eps)
    return KLMatrix(entries, float(np.sqrt((entries**2).sum())))


@dataclass
class DetectionResult:
    scores: np.ndarray  # (B,) Frobenius norms
    is_adversarial: np.ndarray  # (B,) bool, score > tau


def detect(model: SelfEnsemble, batch: ImageBatch, config: DetectorConfig) -> DetectionResult:
    """Score each sample and flag it when the score strictly exceeds tau.

    Detection always uses all configured heads plus the final classifier,
    regardless of the ensemble's fusion strategy.
    """
    if model.num_heads < 1:
        raise ConfigurationError("detection needs at least one intermediate head")
    _, member_probs = model.member_distributions(batch)  # (m+1, B, K)
    scores = np.empty(member_probs.shape[1])
    for sample in range(member_probs.shape[1]):
        scores[sample] = kl_matrix(
            member_probs[:, sample, :], config.smoothing_eps
        ).frobenius_norm
    return DetectionResult(scores, scores > config.tau)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_curve(scores_clean, scores_adv) -> RocCurve:
    """ROC of "score > threshold means adversarial" over a pooled threshold sweep.

    AUC by the trapezoidal rule; tied scores are grouped into one operating
    point, which credits ties with half weight.
    """
    clean = np.asarray(scores_clean, dtype=np.float64)
    adv = np.asarray(scores_adv, dtype=np.float64)
    if clean.size == 0 or adv.size == 0:
        raise ValueError("both score sets must be non-empty")
    scores = np.concatenate([clean, adv])
    labels = np.concatenate([np.zeros(clean.size), np.ones(adv.size)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    distinct = np.where(np.diff(scores))[0]
    idx = np.r_[distinct, scores.size - 1]
    tp = np.cumsum(labels)[idx]
    fp = np.cumsum(1 - labels)[idx]
    tpr = np.r_[0.0, tp / adv.size]
    fpr = np.r_[0.0, fp / clean.size]
    thresholds = np.r_[np.inf, scores[idx]]
    return RocCurve(fpr, tpr, thresholds, float(np.trapezoid(tpr, fpr)))


def calibrate_tau(clean_validation_scores, target_fpr: float) -> float:
    """Empirical (1 - target_fpr) quantile of clean scores (linear interpolation).

    Requires at least 1/target_fpr samples so the requested tail is actually
    represented.
    """
    scores = np.asarray(clean_validation_scores, dtype=np.float64)
    if not 0 < target_fpr < 1:
        raise ValueError("target_fpr must be in (0, 1)")
    if scores.size < 1.0 / target_fpr:
        raise ValueError(
            f"need at least {math_ceil(1.0 / target_fpr)} clean scores for target_fpr={target_fpr}"
        )
    return float(np.quantile(scores, 1.0 - target_fpr, method="linear"))


def math_ceil(x: float) -> int:
    return int(-(-x // 1))


def export_scores_csv(path, rows, header_meta: str | None = None) -> None:
    """Write per-sample detection scores.

    ``rows`` are dicts with keys sample_id, score, label, attack_family,
    epsilon, fooled_vanilla.
    """
    path = Path(path)
    fields = ["sample_id", "score", "label", "attack_family", "epsilon", "fooled_vanilla"]
    with path.open("w", newline="") as handle:
        if header_meta:
            handle.write(f"# {header_meta}\n")
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row[key] for key in fields})
