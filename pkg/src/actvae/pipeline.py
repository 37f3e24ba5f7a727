"""Sampling and evaluation on top of a trained model."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import Rng
from .data import CANONICAL_SIZE, PoseSequenceRecord, denormalize, normalize, to_canonical
from .metrics import MetricReport, baseline_copy_last, diversity_std, l2_best_of_k
from .model import ACTVAE, one_hot

__all__ = ["sample_sequences", "evaluate"]


def sample_sequences(model: ACTVAE, seed_pose_norm: np.ndarray, label_index: int, k: int,
                     rng: Rng | None, sample: bool = True, n_steps: int | None = None) -> np.ndarray:
    """``k`` rollouts from one normalized seed pose; returns (k, N, J, 2) normalized."""
    if k < 1:
        raise ValueError("k must be >= 1")
    seed = np.broadcast_to(np.asarray(seed_pose_norm), (k,) + np.shape(seed_pose_norm))
    label = one_hot(label_index, model.config.C)
    trace = model.rollout(seed, label, n_steps=n_steps, rng=rng, sample=sample)
    return trace.pose_sequence()


def evaluate(model: ACTVAE, records: Sequence[PoseSequenceRecord], k: int = 100, n_keep: int = 10,
             seed: int = 0, sample: bool = True, start_frame: int = 0,
             label_override: int | None = None) -> MetricReport:
    """Best-of-K L2 and diversity over ``records``.

    Each record contributes one test window starting at ``start_frame``.
    Sequence ``i`` draws from ``Rng(seed).fork(i)``, so results do not
    depend on evaluation order.
    """
    if not records:
        raise ValueError("evaluation needs at least one test sequence")
    N = model.config.n_steps
    root = Rng(seed)
    per_seq, l2s, divs, base = [], [], [], []
    for i, rec in enumerate(records):
        if rec.n_frames < start_frame + N + 1:
            raise ValueError(f"record {rec.id!r} is shorter than start_frame + N + 1")
        seed_px = rec.frames[start_frame]
        truth = to_canonical(rec.frames[start_frame + 1 : start_frame + N + 1], rec.frame_size)
        label = rec.action_index if label_override is None else label_override
        samples = sample_sequences(model, normalize(seed_px, rec.frame_size), label, k,
                                   root.fork(i), sample=sample)
        samples_px = denormalize(samples, CANONICAL_SIZE)
        l2 = l2_best_of_k(samples_px, truth, n_keep)
        div = diversity_std(samples_px) if k >= 2 else 0.0
        copy = baseline_copy_last(to_canonical(seed_px, rec.frame_size), N)
        b = l2_best_of_k(copy[None], truth, 1)
        per_seq.append({"id": rec.id, "action_index": rec.action_index, "label": label,
                        "l2_best_of_k": l2, "diversity_std": div, "baseline_l2": b})
        l2s.append(l2)
        divs.append(div)
        base.append(b)
    return MetricReport(float(np.mean(l2s)), float(np.mean(divs)), k, n_keep,
                        float(np.mean(base)), per_seq)
