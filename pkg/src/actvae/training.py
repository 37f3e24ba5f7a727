"""Training loop, Adam, and the checkpoint file format.

Checkpoint layout (little-endian, single file)::

    ACTVAE-CHECKPOINT <format_version> <manifest_bytes>\\n
    <manifest: UTF-8 JSON, sorted keys>\\n
    <array blob>

The manifest holds the model config, hyper-parameters, counters, the RNG
state and an array table ``[{name, dtype, shape, offset, nbytes}]`` that
indexes the blob.  Arrays are raw ``<f4`` (or ``<f8`` for float64 models).
A SHA-256 of the blob guards against corruption.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import Rng
from .data import PoseSequenceRecord, normalize
from .model import ACTVAE, LAMBDA_DIS, LAMBDA_DIV, PARAM_NAMES, ModelConfig, one_hot

__all__ = [
    "FORMAT_VERSION",
    "CheckpointError",
    "TrainingDiverged",
    "Hyper",
    "OptimizerState",
    "Checkpoint",
    "WindowDataset",
    "adam_step",
    "clip_global_norm",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

FORMAT_VERSION = 1
MAGIC = b"ACTVAE-CHECKPOINT"


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, batch: np.ndarray, detail: str):
        self.step = step
        self.batch = batch
        super().__init__(f"non-finite {detail} at step {step} (batch windows {batch.tolist()})")


@dataclass
class Hyper:
    lambda_dis: float = LAMBDA_DIS
    lambda_div: float = LAMBDA_DIV
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 24
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    clip_norm: float | None = None  # 5.0 when enabled

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyper-parameter keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Bias-corrected Adam update; inputs are left untouched."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError("params, grads and optimizer state must have the same names")
    for k, g in grads.items():
        if g.shape != params[k].shape or state.m[k].shape != params[k].shape:
            raise ValueError(f"{k}: shape mismatch {g.shape} vs {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_p[k] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
        new_m[k] = m.astype(p.dtype, copy=False)
        new_v[k] = v.astype(p.dtype, copy=False)
    return new_p, OptimizerState(new_m, new_v, t, state.lr, b1, b2, state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


class WindowDataset:
    """Every ``(p_t, ..., p_{t+N})`` window of every record, normalized."""

    def __init__(self, records: Sequence[PoseSequenceRecord], n_steps: int, n_categories: int,
                 dtype=np.float32):
        if not records:
            raise ValueError("dataset is empty")
        J = records[0].n_joints
        windows, labels, sources = [], [], []
        for r in records:
            if r.n_joints != J:
                raise ValueError(f"record {r.id!r} has {r.n_joints} joints, expected {J}")
            if r.n_frames < n_steps + 1:
                raise ValueError(f"record {r.id!r} has {r.n_frames} frames; "
                                 f"need at least n_steps + 1 = {n_steps + 1}")
            if not 0 <= r.action_index < n_categories:
                raise ValueError(f"record {r.id!r}: action index {r.action_index} "
                                 f"outside [0, {n_categories})")
            norm = normalize(r.frames, r.frame_size)
            for t in range(r.n_frames - n_steps):
                windows.append(norm[t : t + n_steps + 1])
                labels.append(r.action_index)
                sources.append(r.id)
        self.windows = np.ascontiguousarray(np.stack(windows), dtype=dtype)  # (M, N+1, J, 2)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.onehots = np.stack([one_hot(int(c), n_categories, dtype) for c in labels])
        self.sources = sources
        self.n_joints = J
        self.n_steps = n_steps

    def __len__(self) -> int:
        return self.windows.shape[0]


@dataclass
class Checkpoint:
    config: ModelConfig
    hyper: Hyper
    params: dict[str, np.ndarray]
    optimizer: OptimizerState
    rng_state: dict
    epoch: int = 0
    step_in_epoch: int = 0
    step: int = 0
    history: dict[str, np.ndarray] = field(default_factory=lambda: {
        "dis": np.zeros(0, np.float32), "div": np.zeros(0, np.float32),
        "total": np.zeros(0, np.float32)})
    format_version: int = FORMAT_VERSION

    def model(self) -> ACTVAE:
        return ACTVAE(self.config, {k: v.copy() for k, v in self.params.items()})


def _loss_history_append(history: dict, dis: float, div: float, total: float, dtype) -> dict:
    return {
        "dis": np.append(history["dis"], np.asarray(dis, dtype)),
        "div": np.append(history["div"], np.asarray(div, dtype)),
        "total": np.append(history["total"], np.asarray(total, dtype)),
    }


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Window order for one epoch, derived from (seed, epoch) alone."""
    return Rng(seed).fork(1, epoch).permutation(n)


def train(records_or_dataset, config: ModelConfig, hyper: Hyper,
          resume: Checkpoint | None = None, dtype=np.float32,
          log: Callable[[dict], None] | None = None) -> Checkpoint:
    """Free-running training: every window is rolled out from its first pose
    with sampling on, scored against the remaining ``N`` poses, and the
    batch-mean loss is minimized with Adam.

    ``hyper.epochs`` bounds the number of passes, ``hyper.max_steps`` (if
    set) the total number of optimizer steps.  Passing ``resume`` continues
    from a checkpoint; the result is bitwise identical to an uninterrupted
    run with the same settings.
    """
    if isinstance(records_or_dataset, WindowDataset):
        ds = records_or_dataset
    else:
        ds = WindowDataset(records_or_dataset, config.n_steps, config.C, dtype)
    if ds.n_joints != config.J:
        raise ValueError(f"data has J={ds.n_joints} joints but the model config has J={config.J}")
    if ds.n_steps != config.n_steps:
        raise ValueError(f"dataset windows span {ds.n_steps} steps, config has {config.n_steps}")
    if hyper.batch < 1:
        raise ValueError("batch size must be >= 1")

    if resume is None:
        model = ACTVAE.init(config, Rng(hyper.seed).fork(0), dtype)
        opt = OptimizerState.zeros_like(model.params, lr=hyper.lr, beta1=hyper.beta1,
                                        beta2=hyper.beta2, eps=hyper.eps)
        rng = Rng(hyper.seed).fork(2)
        ckpt = Checkpoint(config, hyper, model.params, opt, rng.get_state())
    else:
        if resume.config != config:
            raise ValueError("resume checkpoint was trained with a different model config")
        ckpt = resume
        ckpt.hyper = hyper
        model = ACTVAE(config, {k: v.copy() for k, v in resume.params.items()})
        rng = Rng.from_state(resume.rng_state)
        opt = resume.optimizer
        opt = OptimizerState(opt.m, opt.v, opt.step, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
    dtype = model.dtype
    epoch, pos, step = ckpt.epoch, ckpt.step_in_epoch, ckpt.step
    history = ckpt.history
    M = len(ds)
    t_last = time.perf_counter()

    while epoch < hyper.epochs and (hyper.max_steps is None or step < hyper.max_steps):
        order = epoch_order(hyper.seed, epoch, M)
        while pos < M and (hyper.max_steps is None or step < hyper.max_steps):
            idx = order[pos : pos + hyper.batch]
            win = ds.windows[idx]
            trace = model.rollout(win[:, 0], ds.onehots[idx], rng=rng, sample=True)
            total, dis, div, grads = model.loss_and_grads(trace, win[:, 1:], hyper.lambda_dis,
                                                          hyper.lambda_div)
            if not math.isfinite(total):
                raise TrainingDiverged(step, idx, "loss")
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            if bad:
                raise TrainingDiverged(step, idx, f"gradient in {bad}")
            if hyper.clip_norm is not None:
                grads, _ = clip_global_norm(grads, hyper.clip_norm)
            new_params, opt = adam_step(model.params, grads, opt)
            model = ACTVAE(config, new_params)
            history = _loss_history_append(history, dis, div, total, np.float32)
            step += 1
            pos += len(idx)
            if log is not None:
                now = time.perf_counter()
                log({"step": step, "dis": dis, "div": div, "total": total,
                     "wall_ms": round(1000.0 * (now - t_last), 3)})
                t_last = now
        if pos >= M:
            epoch += 1
            pos = 0

    return Checkpoint(config, hyper, model.params, opt, rng.get_state(), epoch, pos, step, history)


# -- persistence -----------------------------------------------------------------


def _arrays(c: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", c.params[k]) for k in PARAM_NAMES]
    out += [(f"adam_m/{k}", c.optimizer.m[k]) for k in PARAM_NAMES]
    out += [(f"adam_v/{k}", c.optimizer.v[k]) for k in PARAM_NAMES]
    out += [(f"history/{k}", c.history[k]) for k in ("dis", "div", "total")]
    return out


def _dtype_code(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "<f4"
    if a.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported array dtype {a.dtype}")


def dumps_checkpoint(c: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    for name, arr in _arrays(c):
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(code)).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    opt = c.optimizer
    manifest = {
        "format_version": c.format_version,
        "config": c.config.to_dict(),
        "hyper": c.hyper.to_dict(),
        "optimizer": {"step": opt.step, "lr": opt.lr, "beta1": opt.beta1,
                      "beta2": opt.beta2, "eps": opt.eps},
        "rng_state": {k: (str(v) if k in ("state", "inc") else v) for k, v in c.rng_state.items()},
        "counters": {"epoch": c.epoch, "step_in_epoch": c.step_in_epoch, "step": c.step},
        "arrays": table,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    text = json.dumps(manifest, sort_keys=True, indent=1).encode()
    head = MAGIC + f" {c.format_version} {len(text)}\n".encode()
    return head + text + b"\n" + blob


def save_checkpoint(c: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_checkpoint(c))
    tmp.replace(path)


def loads_checkpoint(data: bytes) -> Checkpoint:
    nl = data.find(b"\n")
    if nl < 0 or not data.startswith(MAGIC + b" "):
        raise CheckpointError("not an ACT-VAE checkpoint (bad magic)")
    try:
        _, ver, mlen = data[:nl].split(b" ")
        ver, mlen = int(ver), int(mlen)
    except ValueError:
        raise CheckpointError("corrupt checkpoint header") from None
    if ver != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {ver} "
                              f"(this build reads version {FORMAT_VERSION})")
    start = nl + 1
    if len(data) < start + mlen + 1:
        raise CheckpointError("checkpoint truncated inside the manifest")
    try:
        manifest = json.loads(data[start : start + mlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError("corrupt checkpoint manifest") from None
    if manifest.get("format_version") != ver:
        raise CheckpointError("manifest and header disagree on format version")
    blob = data[start + mlen + 1 :]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"checkpoint array data is {len(blob)} bytes, "
                              f"manifest says {manifest['blob_bytes']} (truncated or corrupt)")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError("checkpoint array data fails its checksum")
    arrays = {}
    for entry in manifest["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if n != entry["nbytes"] or entry["offset"] + n > len(blob):
            raise CheckpointError(f"array {entry['name']!r} has inconsistent length")
        a = np.frombuffer(blob, dtype=dt, count=n // dt.itemsize, offset=entry["offset"])
        arrays[entry["name"]] = a.reshape(shape).astype(dt.newbyteorder("="))
    config = ModelConfig.from_dict(manifest["config"])
    try:
        params = {k: arrays[f"param/{k}"] for k in PARAM_NAMES}
        m = {k: arrays[f"adam_m/{k}"] for k in PARAM_NAMES}
        v = {k: arrays[f"adam_v/{k}"] for k in PARAM_NAMES}
        history = {k: arrays[f"history/{k}"] for k in ("dis", "div", "total")}
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks array {exc}") from None
    ACTVAE(config, params)  # shape validation
    o = manifest["optimizer"]
    opt = OptimizerState(m, v, o["step"], o["lr"], o["beta1"], o["beta2"], o["eps"])
    rs = dict(manifest["rng_state"])
    rs["state"], rs["inc"] = int(rs["state"]), int(rs["inc"])
    cnt = manifest["counters"]
    return Checkpoint(config, Hyper.from_dict(manifest["hyper"]), params, opt, rs,
                      cnt["epoch"], cnt["step_in_epoch"], cnt["step"], history, ver)


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())
