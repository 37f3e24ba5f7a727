"""Keypoint metrics: best-of-K L2 accuracy and sample diversity.

All inputs are pixel coordinates in the canonical 128 x 128 frame
(range [0, 127]); sample stacks have shape (K, N, J, 2).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = [
    "MetricReport",
    "per_sample_distance",
    "l2_best_of_k",
    "diversity_std",
    "baseline_copy_last",
]


def _as_samples(samples) -> np.ndarray:
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 4 or s.shape[-1] != 2:
        raise ValueError(f"samples must be K x N x J x 2, got {s.shape}")
    return s


def per_sample_distance(samples, truth) -> np.ndarray:
    """Mean Euclidean joint distance over (time, joint) for each sample."""
    s = _as_samples(samples)
    t = np.asarray(truth, dtype=np.float64)
    if t.shape != s.shape[1:]:
        raise ValueError(f"truth shape {t.shape} does not match sample shape {s.shape[1:]}")
    return np.sqrt(((s - t) ** 2).sum(axis=-1)).mean(axis=(1, 2))


def l2_best_of_k(samples, truth, n_keep: int = 10) -> float:
    """Mean of the ``n_keep`` smallest per-sample distances to ``truth``."""
    d = per_sample_distance(samples, truth)
    if not 1 <= n_keep <= d.shape[0]:
        raise ValueError(f"n_keep={n_keep} must lie in [1, K={d.shape[0]}]")
    return float(np.sort(d)[:n_keep].mean())


def diversity_std(samples) -> float:
    """Population std (divisor K) across samples, averaged over every
    (time, joint, axis) coordinate."""
    s = _as_samples(samples)
    if s.shape[0] < 2:
        raise ValueError("diversity needs at least 2 samples")
    # centring on one sample first keeps identical samples at exactly zero
    return float((s - s[0]).std(axis=0).mean())


def baseline_copy_last(seed_pose, n_steps: int) -> np.ndarray:
    """Zero-motion prediction: the seed pose repeated ``n_steps`` times."""
    seed = np.asarray(seed_pose, dtype=np.float64)
    return np.repeat(seed[None], n_steps, axis=0)


@dataclass
class MetricReport:
    l2_best_of_k: float
    diversity_std: float
    K: int
    n_keep: int
    baseline_l2: float | None = None
    per_sequence: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.l2_best_of_k < 0 or self.diversity_std < 0:
            raise ValueError("metrics must be non-negative")
        if self.n_keep > self.K:
            raise ValueError("n_keep cannot exceed K")

    def summary_record(self) -> dict:
        d = asdict(self)
        d.pop("per_sequence")
        d["n_sequences"] = len(self.per_sequence)
        return {"kind": "summary", **d}

    def records(self) -> list[dict]:
        """Line-delimited form: one record per sequence, then the summary."""
        return [{"kind": "sequence", **r} for r in self.per_sequence] + [self.summary_record()]

    def table(self) -> str:
        rows = [("metric", "value"),
                (f"L2 best {self.n_keep} of {self.K} (px)", f"{self.l2_best_of_k:.4f}"),
                ("diversity std (px)", f"{self.diversity_std:.4f}")]
        if self.baseline_l2 is not None:
            rows.append(("copy-last baseline L2 (px)", f"{self.baseline_l2:.4f}"))
        rows.append(("sequences", str(len(self.per_sequence))))
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{w}}  {b}" for a, b in rows)
