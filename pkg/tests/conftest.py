import time
from pathlib import Path

import numpy as np
import pytest

from actvae import recurrent
from actvae.core import Rng
from actvae.data import default_synthetic_spec, generate_synthetic
from actvae.model import ACTVAE, ModelConfig, one_hot, vae_loss
from actvae.training import Hyper, WindowDataset, train

DATA_DIR = Path(__file__).parent / "data"

# Desk-scale setup shared by the acceptance experiments.
DESK = dict(J=4, C=2, d_z=16, enc_hidden=64, dec_hidden=8, n_steps=8)
TRAIN_STEPS = 5000
SEEDS = (0, 1, 2)
N_TRAIN, N_TEST, T_FRAMES = 2000, 200, 16

# criterion number -> (passed, detail); filled in by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(params=recurrent.available_backends())
def kernel_backend(request):
    """Run a test once per available kernel backend."""
    prev = recurrent.backend()
    recurrent.set_backend(request.param)
    yield request.param
    recurrent.set_backend(prev)


def tiny_config(**kw) -> ModelConfig:
    base = dict(J=2, C=2, d_z=3, enc_hidden=6, dec_hidden=4, n_steps=3)
    base.update(kw)
    return ModelConfig(**base)


def finite_difference_check(model: ACTVAE, seed, label, targets, rng_seed=7, h=1e-5,
                            floor=1e-6, lambdas=(200.0, 0.002)) -> tuple[float, str]:
    """Worst relative error of ``loss_and_grads`` against central differences.

    The error for one entry is |fd - an| / max(|fd|, |an|, floor).
    """
    def loss():
        tr = model.rollout(seed, label, rng=Rng(rng_seed), sample=True)
        return vae_loss(tr, targets, *lambdas)[0]

    trace = model.rollout(seed, label, rng=Rng(rng_seed), sample=True)
    _, _, _, grads = model.loss_and_grads(trace, targets, *lambdas)
    worst, where = 0.0, ""
    for name, p in model.params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = loss()
            p[idx] = old - h
            lm = loss()
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            err = abs(fd - an) / max(abs(fd), abs(an), floor)
            if err > worst:
                worst, where = err, f"{name}{list(idx)}"
    return worst, where


def tiny_batch(cfg: ModelConfig, B=3, seed=0):
    r = np.random.default_rng(seed)
    poses = r.uniform(-0.9, 0.9, (B, cfg.J, 2))
    labels = np.stack([one_hot(i % cfg.C, cfg.C, np.float64) for i in range(B)])
    targets = r.uniform(-0.9, 0.9, (B, cfg.n_steps, cfg.J, 2))
    return poses, labels, targets


# -- shared synthetic experiment --------------------------------------------------


@pytest.fixture(scope="session")
def synthetic_data():
    spec = default_synthetic_spec()
    train_recs, _ = generate_synthetic(spec, N_TRAIN, T_FRAMES, Rng(100))
    test_recs, _ = generate_synthetic(spec, N_TEST, T_FRAMES, Rng(200), id_prefix="test")
    return spec, train_recs, test_recs


@pytest.fixture(scope="session")
def window_dataset(synthetic_data):
    return WindowDataset(synthetic_data[1], DESK["n_steps"], DESK["C"])


class TrainedModels:
    """Lazily trains and caches one desk-scale model per (variant, seed)."""

    VARIANTS = {
        "full": {},
        "no_temporal_coherence": {"temporal_coherence": False},
        "wo_ac": None,  # the ablation preset
    }

    def __init__(self, dataset):
        self.dataset = dataset
        self.cache = {}
        self.seconds = {}

    def config(self, variant: str) -> ModelConfig:
        if variant == "wo_ac":
            return ModelConfig.ablation("wo_ac", **DESK)
        return ModelConfig(**DESK, **self.VARIANTS[variant])

    def get(self, variant: str, seed: int):
        key = (variant, seed)
        if key not in self.cache:
            t0 = time.perf_counter()
            hyper = Hyper(lr=1e-4, batch=24, epochs=100, max_steps=TRAIN_STEPS, seed=seed)
            self.cache[key] = train(self.dataset, self.config(variant), hyper)
            self.seconds[key] = time.perf_counter() - t0
        return self.cache[key]


@pytest.fixture(scope="session")
def trained(window_dataset):
    return TrainedModels(window_dataset)
