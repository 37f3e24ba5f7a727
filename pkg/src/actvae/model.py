"""Action-conditional temporal VAE over 2-D keypoint sequences.

The encoder LSTM reads ``[previous pose, label, previous latent]`` and
emits the mean and log-variance of the next latent; the decoder LSTM reads
``[previous pose, label, current latent]`` and emits the next pose.  The
same :meth:`ACTVAE.rollout` serves training and sampling: there is no
separate prior network, latents are always drawn from the encoder's output.

Poses inside the model are in normalized coordinates ([-1, 1] per axis),
flattened to length ``2 * J`` as ``(x0, y0, x1, y1, ...)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .core import DiagonalGaussian, Rng, kl_from_logvar
from .recurrent import (
    CellParams,
    CellState,
    LinearHead,
    init_cell,
    init_head,
    lstm_backward,
    lstm_forward,
)

__all__ = [
    "ModelConfig",
    "ACTVAE",
    "RolloutTrace",
    "one_hot",
    "check_label",
    "vae_loss",
    "elbo_report",
    "PARAM_NAMES",
    "LAMBDA_DIS",
    "LAMBDA_DIV",
]

LAMBDA_DIS = 200.0
LAMBDA_DIV = 0.002

PARAM_NAMES = (
    "enc.W", "enc.b",
    "mu.W", "mu.b",
    "logvar.W", "logvar.b",
    "dec.W", "dec.b",
    "out.W", "out.b",
)

ABLATIONS = {
    "full": dict(use_action_label=True, condition_on_past_latents=True, temporal_coherence=True),
    "wo_a": dict(use_action_label=False, condition_on_past_latents=True, temporal_coherence=True),
    "wo_az": dict(use_action_label=False, condition_on_past_latents=False, temporal_coherence=True),
    "wo_ac": dict(use_action_label=False, condition_on_past_latents=False, temporal_coherence=False),
}


@dataclass(frozen=True)
class ModelConfig:
    J: int
    C: int
    d_z: int = 512
    enc_hidden: int = 1024
    dec_hidden: int | None = None  # defaults to 2 * J
    n_steps: int = 8
    use_action_label: bool = True
    condition_on_past_latents: bool = True
    temporal_coherence: bool = True
    residual: bool = True

    def __post_init__(self):
        if self.dec_hidden is None:
            object.__setattr__(self, "dec_hidden", 2 * self.J)
        for name in ("J", "C", "d_z", "enc_hidden", "dec_hidden", "n_steps"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def pose_dim(self) -> int:
        return 2 * self.J

    @property
    def enc_input_dim(self) -> int:
        return 2 * self.J + self.C + self.d_z

    @property
    def dec_input_dim(self) -> int:
        return 2 * self.J + self.C + self.d_z

    @classmethod
    def ablation(cls, name: str, **kw) -> "ModelConfig":
        """Config for one of ``full``, ``wo_a``, ``wo_az``, ``wo_ac``."""
        try:
            flags = ABLATIONS[name]
        except KeyError:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None
        return cls(**{**kw, **flags})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def one_hot(index: int, C: int, dtype=np.float32) -> np.ndarray:
    if not 0 <= index < C:
        raise ValueError(f"label index {index} out of range for {C} categories")
    v = np.zeros(C, dtype)
    v[index] = 1.0
    return v


def check_label(label: np.ndarray, C: int) -> None:
    label = np.asarray(label)
    if label.shape[-1] != C:
        raise ValueError(f"label length {label.shape[-1]} != C={C}")
    ok = np.isin(label, (0.0, 1.0)).all(axis=-1) & (label.sum(axis=-1) == 1)
    if not np.all(ok):
        raise ValueError("label must be one-hot")


@dataclass
class RolloutTrace:
    """Everything one rollout produced, time-major, batch second.

    ``poses[k]`` is the pose predicted at step ``k + 1``; ``latents[k]`` was
    drawn from ``N(mu[k], exp(0.5 * logvar[k]))``.  The remaining arrays are
    the activations needed to backpropagate through the rollout.
    """

    batched: bool
    seed: np.ndarray  # (B, 2J)
    label: np.ndarray  # (B, C), zeros when labels are disabled
    z_init: np.ndarray  # (B, d_z)
    poses: np.ndarray  # (N, B, 2J)
    latents: np.ndarray  # (N, B, d_z)
    mu: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray
    enc_h: np.ndarray  # (N, B, H_e)
    enc_c: np.ndarray
    dec_h: np.ndarray  # (N, B, H_d)
    dec_c: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_steps(self) -> int:
        return self.poses.shape[0]

    def _out(self, a: np.ndarray, *tail: int) -> np.ndarray:
        a = np.swapaxes(a, 0, 1)
        if tail:
            a = a.reshape(a.shape[:2] + tail)
        return a if self.batched else a[0]

    def pose_sequence(self) -> np.ndarray:
        """Predicted poses, shape (B, N, J, 2) or (N, J, 2) if unbatched."""
        J = self.poses.shape[-1] // 2
        return self._out(self.poses, J, 2)

    def latent_sequence(self) -> np.ndarray:
        return self._out(self.latents)

    @property
    def gaussians(self) -> list[DiagonalGaussian]:
        """Per-step distributions (batched arrays when the trace is batched)."""
        out = []
        for k in range(self.n_steps):
            mu, lv = self.mu[k], self.logvar[k]
            if not self.batched:
                mu, lv = mu[0], lv[0]
            out.append(DiagonalGaussian.from_logvar(mu, lv))
        return out

    def encoder_states(self) -> list[CellState]:
        return [CellState(h if self.batched else h[0], c if self.batched else c[0])
                for h, c in zip(self.enc_h, self.enc_c)]

    def decoder_states(self) -> list[CellState]:
        return [CellState(h if self.batched else h[0], c if self.batched else c[0])
                for h, c in zip(self.dec_h, self.dec_c)]


class ACTVAE:
    """Parameters plus the encoder/decoder recurrences."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        missing = set(PARAM_NAMES) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        self.params = {k: np.ascontiguousarray(params[k]) for k in PARAM_NAMES}
        self._check_shapes()

    @classmethod
    def init(cls, config: ModelConfig, rng: Rng, dtype=np.float32) -> "ACTVAE":
        cfg = config
        enc = init_cell(cfg.enc_input_dim, cfg.enc_hidden, rng, dtype)
        mu = init_head(cfg.enc_hidden, cfg.d_z, rng, dtype)
        lv = init_head(cfg.enc_hidden, cfg.d_z, rng, dtype)
        dec = init_cell(cfg.dec_input_dim, cfg.dec_hidden, rng, dtype)
        out = init_head(cfg.dec_hidden, cfg.pose_dim, rng, dtype)
        params = {
            "enc.W": enc.W, "enc.b": enc.b,
            "mu.W": mu.weight, "mu.b": mu.bias,
            "logvar.W": lv.weight, "logvar.b": lv.bias,
            "dec.W": dec.W, "dec.b": dec.b,
            "out.W": out.weight, "out.b": out.bias,
        }
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=np.float32) -> "ACTVAE":
        return cls(config, {k: np.zeros(s, dtype) for k, s in param_shapes(config).items()})

    def _check_shapes(self) -> None:
        dtypes = {p.dtype for p in self.params.values()}
        if len(dtypes) != 1:
            raise ValueError(f"parameters must share one dtype, got {dtypes}")
        for name, shape in param_shapes(self.config).items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != expected {shape}")

    @property
    def dtype(self):
        return self.params["enc.W"].dtype

    def astype(self, dtype) -> "ACTVAE":
        return ACTVAE(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "ACTVAE":
        return ACTVAE(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def encoder(self) -> CellParams:
        return CellParams(self.params["enc.W"], self.params["enc.b"])

    @property
    def decoder(self) -> CellParams:
        return CellParams(self.params["dec.W"], self.params["dec.b"])

    @property
    def heads(self) -> dict[str, LinearHead]:
        p = self.params
        return {n: LinearHead(p[f"{n}.W"], p[f"{n}.b"]) for n in ("mu", "logvar", "out")}

    # -- input plumbing ------------------------------------------------------

    def _pose_rows(self, pose) -> tuple[np.ndarray, bool]:
        pose = np.asarray(pose, dtype=self.dtype)
        J = self.config.J
        if pose.shape[-2:] != (J, 2):
            raise ValueError(f"pose shape {pose.shape} does not end in ({J}, 2)")
        if not np.all(np.isfinite(pose)):
            raise ValueError("pose coordinates must be finite")
        single = pose.ndim == 2
        return np.ascontiguousarray(pose.reshape(-1, 2 * J)), not single

    def _label_rows(self, label, batch: int) -> np.ndarray:
        label = np.asarray(label, dtype=self.dtype)
        check_label(label, self.config.C)
        rows = np.broadcast_to(np.atleast_2d(label), (batch, self.config.C))
        if not self.config.use_action_label:
            return np.zeros((batch, self.config.C), self.dtype)
        return np.ascontiguousarray(rows)

    def _vec_rows(self, v, dim: int, batch: int, what: str) -> np.ndarray:
        v = np.asarray(v, dtype=self.dtype)
        if v.shape[-1] != dim:
            raise ValueError(f"{what} length {v.shape[-1]} != {dim}")
        return np.ascontiguousarray(np.broadcast_to(np.atleast_2d(v), (batch, dim)))

    def _state_rows(self, state: CellState | None, dim: int, batch: int):
        if state is None:
            z = np.zeros((batch, dim), self.dtype)
            return z, z.copy()
        return (self._vec_rows(state.hidden, dim, batch, "hidden state"),
                self._vec_rows(state.memory, dim, batch, "memory state"))

    # -- single-step forward passes ----------------------------------------

    def _enc_forward(self, pose, label, z_prev, h, c):
        cfg, p = self.config, self.params
        if not cfg.temporal_coherence:
            h = np.zeros_like(h)
            c = np.zeros_like(c)
        if not (cfg.condition_on_past_latents and cfg.temporal_coherence):
            z_prev = np.zeros_like(z_prev)
        xh = np.concatenate([pose, label, z_prev, h], axis=1)
        h1, c1, act = lstm_forward(p["enc.W"], p["enc.b"], xh, c)
        mu = h1 @ p["mu.W"].T + p["mu.b"]
        lv = h1 @ p["logvar.W"].T + p["logvar.b"]
        return mu, lv, h1, c1, (xh, c, act)

    def _dec_forward(self, pose, label, z, h, c):
        p = self.params
        xh = np.concatenate([pose, label, z, h], axis=1)
        h1, c1, act = lstm_forward(p["dec.W"], p["dec.b"], xh, c)
        out = h1 @ p["out.W"].T + p["out.b"]
        new_pose = pose + out if self.config.residual else out
        return new_pose, h1, c1, (xh, c, act)

    def encoder_step(self, prev_pose, prev_latent, enc_state: CellState | None, label):
        """One encoder update.  Returns ``(DiagonalGaussian, CellState)``."""
        pose, batched = self._pose_rows(prev_pose)
        B = pose.shape[0]
        lab = self._label_rows(label, B)
        z = self._vec_rows(prev_latent, self.config.d_z, B, "latent")
        h, c = self._state_rows(enc_state, self.config.enc_hidden, B)
        mu, lv, h1, c1, _ = self._enc_forward(pose, lab, z, h, c)
        if not batched:
            mu, lv, h1, c1 = mu[0], lv[0], h1[0], c1[0]
        return DiagonalGaussian.from_logvar(mu, lv), CellState(h1, c1)

    def decoder_step(self, prev_pose, latent, dec_state: CellState | None, label):
        """One decoder update.  Returns ``(pose, CellState)``; pose is (J, 2)."""
        pose, batched = self._pose_rows(prev_pose)
        B = pose.shape[0]
        lab = self._label_rows(label, B)
        z = self._vec_rows(latent, self.config.d_z, B, "latent")
        h, c = self._state_rows(dec_state, self.config.dec_hidden, B)
        new_pose, h1, c1, _ = self._dec_forward(pose, lab, z, h, c)
        new_pose = new_pose.reshape(B, self.config.J, 2)
        if not batched:
            new_pose, h1, c1 = new_pose[0], h1[0], c1[0]
        return new_pose, CellState(h1, c1)

    # -- rollout -------------------------------------------------------------

    def rollout(self, seed_pose, label, n_steps: int | None = None,
                rng: Rng | None = None, sample: bool = True) -> RolloutTrace:
        """Generate ``n_steps`` poses from one seed pose per row.

        Used unchanged by both training and sampling.  Cell states start at
        zero and the initial latent is drawn from N(0, I) (its mean, zero,
        when ``sample`` is false).  ``seed_pose`` is (J, 2) or (B, J, 2);
        ``label`` a one-hot (C,) or (B, C).
        """
        cfg = self.config
        N = cfg.n_steps if n_steps is None else int(n_steps)
        if N < 1:
            raise ValueError("n_steps must be >= 1")
        if sample and rng is None:
            raise ValueError("sampling rollouts need an Rng")
        seed, batched = self._pose_rows(seed_pose)
        B, dt = seed.shape[0], self.dtype
        lab = self._label_rows(label, B)
        H_e, H_d, d_z, P = cfg.enc_hidden, cfg.dec_hidden, cfg.d_z, cfg.pose_dim

        if sample:
            z_prev = rng.normal((B, d_z), dt)
        else:
            z_prev = np.zeros((B, d_z), dt)
        z_init = z_prev
        he = np.zeros((B, H_e), dt)
        ce = np.zeros((B, H_e), dt)
        hd = np.zeros((B, H_d), dt)
        cd = np.zeros((B, H_d), dt)
        pose = seed

        shapes = dict(poses=P, latents=d_z, mu=d_z, logvar=d_z, eps=d_z,
                      enc_h=H_e, enc_c=H_e, dec_h=H_d, dec_c=H_d)
        buf = {k: np.empty((N, B, w), dt) for k, w in shapes.items()}
        enc_cache, dec_cache = [], []
        for k in range(N):
            mu, lv, he, ce, ecache = self._enc_forward(pose, lab, z_prev, he, ce)
            if sample:
                eps = rng.normal((B, d_z), dt)
                z = mu + np.exp(0.5 * lv) * eps
            else:
                eps = np.zeros((B, d_z), dt)
                z = mu
            pose, hd, cd, dcache = self._dec_forward(pose, lab, z, hd, cd)
            for name, val in (("poses", pose), ("latents", z), ("mu", mu), ("logvar", lv),
                              ("eps", eps), ("enc_h", he), ("enc_c", ce),
                              ("dec_h", hd), ("dec_c", cd)):
                buf[name][k] = val
            enc_cache.append(ecache)
            dec_cache.append(dcache)
            z_prev = z
        return RolloutTrace(batched=batched, seed=seed, label=lab, z_init=z_init,
                            cache={"enc": enc_cache, "dec": dec_cache}, **buf)

    # -- gradients -------------------------------------------------------------

    def loss_and_grads(self, trace: RolloutTrace, targets, lambda_dis: float = LAMBDA_DIS,
                       lambda_div: float = LAMBDA_DIV):
        """Batch-mean :func:`vae_loss` and its gradient w.r.t. every parameter.

        Backpropagates through the whole rollout, including the
        reparameterized latent draws and the fed-back predictions.
        Returns ``(total, dis, div, grads)``.
        """
        cfg, p = self.config, self.params
        tgt = _targets_rows(trace, targets, cfg.J)
        total, dis, div = vae_loss(trace, targets, lambda_dis, lambda_div)
        N, B = trace.poses.shape[:2]
        P, C, d_z = cfg.pose_dim, cfg.C, cfg.d_z
        dt = self.dtype
        g = {k: np.zeros_like(v) for k, v in p.items()}
        s_dis = dt.type(lambda_dis / B)
        s_div = dt.type(lambda_div / B)
        feed_latent = cfg.condition_on_past_latents and cfg.temporal_coherence

        d_pose_next = np.zeros((B, P), dt)
        dz_next = np.zeros((B, d_z), dt)
        dhe = np.zeros((B, cfg.enc_hidden), dt)
        dce = np.zeros_like(dhe)
        dhd = np.zeros((B, cfg.dec_hidden), dt)
        dcd = np.zeros_like(dhd)
        I_d = cfg.dec_input_dim
        I_e = cfg.enc_input_dim
        z_lo, z_hi = P + C, P + C + d_z

        for k in range(N - 1, -1, -1):
            gp = s_dis * np.sign(trace.poses[k] - tgt[k]) + d_pose_next
            hd_k = trace.dec_h[k]
            g["out.W"] += gp.T @ hd_k
            g["out.b"] += gp.sum(axis=0)
            xh, c_prev, act = trace.cache["dec"][k]
            dh = np.ascontiguousarray(dhd + gp @ p["out.W"])
            dxh, dcd = lstm_backward(p["dec.W"], xh, c_prev, trace.dec_c[k], act,
                                     dh, np.ascontiguousarray(dcd), g["dec.W"], g["dec.b"])
            d_pose_prev = dxh[:, :P] + gp if cfg.residual else dxh[:, :P].copy()
            dz = dxh[:, z_lo:z_hi] + dz_next
            dhd = dxh[:, I_d:]

            mu, lv, eps = trace.mu[k], trace.logvar[k], trace.eps[k]
            sig = np.exp(0.5 * lv)
            dmu = dz + s_div * mu
            dlv = dz * eps * (0.5 * sig) + s_div * 0.5 * (sig * sig - 1.0)
            he_k = trace.enc_h[k]
            g["mu.W"] += dmu.T @ he_k
            g["mu.b"] += dmu.sum(axis=0)
            g["logvar.W"] += dlv.T @ he_k
            g["logvar.b"] += dlv.sum(axis=0)
            dh = np.ascontiguousarray(dhe + dmu @ p["mu.W"] + dlv @ p["logvar.W"])
            xh, c_prev, act = trace.cache["enc"][k]
            dxh, dc_prev = lstm_backward(p["enc.W"], xh, c_prev, trace.enc_c[k], act,
                                         dh, np.ascontiguousarray(dce), g["enc.W"], g["enc.b"])
            d_pose_prev += dxh[:, :P]
            if feed_latent:
                dz_next = dxh[:, z_lo:z_hi]
            if cfg.temporal_coherence:
                dhe, dce = dxh[:, I_e:], dc_prev
            d_pose_next = d_pose_prev
        return total, dis, div, g


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    He, Hd = cfg.enc_hidden, cfg.dec_hidden
    return {
        "enc.W": (4 * He, cfg.enc_input_dim + He), "enc.b": (4 * He,),
        "mu.W": (cfg.d_z, He), "mu.b": (cfg.d_z,),
        "logvar.W": (cfg.d_z, He), "logvar.b": (cfg.d_z,),
        "dec.W": (4 * Hd, cfg.dec_input_dim + Hd), "dec.b": (4 * Hd,),
        "out.W": (cfg.pose_dim, Hd), "out.b": (cfg.pose_dim,),
    }


def _targets_rows(trace: RolloutTrace, targets, J: int) -> np.ndarray:
    t = np.asarray(targets, dtype=trace.poses.dtype)
    N, B = trace.poses.shape[:2]
    if not trace.batched:
        t = t[None]
    if t.shape != (B, N, J, 2):
        raise ValueError(f"targets shape {np.shape(targets)} does not match trace "
                         f"({'B, ' if trace.batched else ''}N={N}, J={J}, 2)")
    return np.ascontiguousarray(np.swapaxes(t.reshape(B, N, 2 * J), 0, 1))


def vae_loss(trace: RolloutTrace, targets, lambda_dis: float = LAMBDA_DIS,
             lambda_div: float = LAMBDA_DIV) -> tuple[float, float, float]:
    """``(total, dis, div)`` with ``total = lambda_dis * dis + lambda_div * div``.

    ``dis`` is the L1 distance summed over time, joints and axes; ``div``
    the per-step KL to N(0, I) summed over time.  Batched traces report the
    mean over sequences.
    """
    J = trace.poses.shape[-1] // 2
    tgt = _targets_rows(trace, targets, J)
    dis = float(np.abs(trace.poses - tgt).sum(axis=(0, 2)).mean())
    div = float(kl_from_logvar(trace.mu, trace.logvar).sum(axis=0).mean())
    return lambda_dis * dis + lambda_div * div, dis, div


def elbo_report(trace: RolloutTrace, targets, scale: float = 0.05) -> float:
    """Evidence lower bound estimate with a Laplace(scale) pose likelihood.

    ``sum_t [log p(target_t | pred_t) - KL_t]``; monitoring only.
    """
    if scale <= 0:
        raise ValueError("Laplace scale must be positive")
    J = trace.poses.shape[-1] // 2
    tgt = _targets_rows(trace, targets, J)
    err = np.abs(trace.poses.astype(np.float64) - tgt)
    loglik = (-np.log(2.0 * scale) - err / scale).sum(axis=(0, 2))
    kl = kl_from_logvar(trace.mu.astype(np.float64), trace.logvar.astype(np.float64)).sum(axis=0)
    return float((loglik - kl).mean())


def with_flags(config: ModelConfig, **flags) -> ModelConfig:
    return replace(config, **flags)
