"""Compare the compiled and numpy LSTM kernel backends.

Times the raw forward/backward kernels at desk and full-size shapes,
then one full training step (rollout + gradients + Adam) on each backend.

    python benchmarks/bench_kernels.py [--quick]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from actvae import _kernels_py, recurrent
from actvae.core import Rng
from actvae.model import ACTVAE, ModelConfig, one_hot
from actvae.training import Hyper, OptimizerState, adam_step

# (label, batch, input width, hidden)
SHAPES = [
    ("desk decoder", 24, 26, 8),
    ("desk encoder", 24, 26, 64),
    ("large decoder", 24, 547, 26),
    ("large encoder", 24, 547, 1024),
]


def _best(fn, number: int, repeat: int = 3) -> float:
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_kernels(dtype, quick: bool) -> list[tuple]:
    from actvae import _kernels as ext

    rng = np.random.default_rng(0)
    rows = []
    for label, B, I, H in SHAPES:
        W = rng.normal(0, 0.1, (4 * H, I + H)).astype(dtype)
        b = rng.normal(0, 0.1, 4 * H).astype(dtype)
        xh = rng.normal(size=(B, I + H)).astype(dtype)
        cp = rng.normal(size=(B, H)).astype(dtype)
        n = 3 if H >= 1000 else (50 if quick else 300)
        times = {}
        for name, mod in (("cython", ext), ("python", _kernels_py)):
            h, c, act = mod.lstm_forward(W, b, xh, cp)
            dW, db = np.zeros_like(W), np.zeros_like(b)
            f = _best(lambda: mod.lstm_forward(W, b, xh, cp), n)
            g = _best(lambda: mod.lstm_backward(W, xh, cp, c, act, h, c, dW, db), n)
            times[name] = (f, g)
        rows.append((label, B, I, H, times))
    return rows


def bench_train_step(config: ModelConfig, steps: int) -> dict[str, float]:
    out = {}
    win = np.random.default_rng(1).uniform(-0.8, 0.8, (24, config.n_steps + 1, config.J, 2))
    win = win.astype(np.float32)
    labels = np.stack([one_hot(i % config.C, config.C) for i in range(24)])
    for name in recurrent.available_backends():
        recurrent.set_backend(name)
        model = ACTVAE.init(config, Rng(0))
        opt = OptimizerState.zeros_like(model.params, **{k: v for k, v in Hyper().to_dict().items()
                                                       if k in ("lr", "beta1", "beta2", "eps")})
        rng = Rng(1)

        def step():
            nonlocal model, opt
            trace = model.rollout(win[:, 0], labels, rng=rng)
            _, _, _, grads = model.loss_and_grads(trace, win[:, 1:])
            params, opt = adam_step(model.params, grads, opt)
            model = ACTVAE(config, params)

        out[name] = _best(step, steps, repeat=2)
    recurrent.set_backend("auto")
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--quick", action="store_true", help="fewer repetitions, skip the large training step")
    args = ap.parse_args()
    if "cython" not in recurrent.available_backends():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    for dtype in (np.float32, np.float64):
        print(f"\nLSTM kernels, {np.dtype(dtype).name} (microseconds per call)")
        print(f"{'shape':<15} {'B':>3} {'in':>5} {'H':>5} {'fwd cy':>9} {'fwd np':>9} "
              f"{'bwd cy':>9} {'bwd np':>9} {'speedup':>8}")
        for label, B, I, H, t in bench_kernels(dtype, args.quick):
            cy, py = t["cython"], t["python"]
            speed = (py[0] + py[1]) / (cy[0] + cy[1])
            print(f"{label:<15} {B:>3} {I:>5} {H:>5} {cy[0] * 1e6:>9.1f} {py[0] * 1e6:>9.1f} "
                  f"{cy[1] * 1e6:>9.1f} {py[1] * 1e6:>9.1f} {speed:>7.2f}x")

    configs = [("desk", ModelConfig(J=4, C=2, d_z=16, enc_hidden=64), 20 if args.quick else 100)]
    if not args.quick:
        configs.append(("large", ModelConfig(J=13, C=9), 2))
    print("\nfull training step, batch 24, float32 (ms per step)")
    for label, cfg, steps in configs:
        t = bench_train_step(cfg, steps)
        print(f"{label:<6} cython {t['cython'] * 1e3:8.2f}   python {t['python'] * 1e3:8.2f}   "
              f"speedup {t['python'] / t['cython']:.2f}x")


if __name__ == "__main__":
    main()
