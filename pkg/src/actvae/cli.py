"""``actvae`` command line: gen, train, sample, eval, plot.

Every command writes ``<artifact>.manifest.json`` next to its output (for
``plot``, ``manifest.json`` inside the output directory).  The manifest
records a fully explicit argv, the effective configuration, the seed,
input/output SHA-256 hashes and wall time, so a run can be repeated from
the manifest alone.  ``complete: false`` marks an aborted run.

Configuration precedence for ``train``: command-line flags, then the
``--config`` file (or preset name), then built-in defaults.  The default
seed comes from ``$ACTVAE_SEED`` when set, else 0.

Exit codes: 0 success, 2 invalid input or configuration, 3 training
diverged.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .core import Rng
from .data import (PoseFormatError, PoseSequenceRecord, SyntheticSpec, default_synthetic_spec,
                   denormalize, generate_synthetic, load_sequences, normalize, read_header,
                   save_sequences)
from .model import ABLATIONS, ModelConfig
from .pipeline import evaluate, sample_sequences
from .plot import default_skeleton, load_skeleton, render_sequence
from .training import (CheckpointError, Hyper, TrainingDiverged, load_checkpoint,
                       save_checkpoint, train)

__all__ = ["main", "build_parser", "SEED_ENV"]

SEED_ENV = "ACTVAE_SEED"
EXIT_INVALID = 2
EXIT_DIVERGED = 3


class CliError(Exception):
    """Validation failure reported to the user with exit code 2."""


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"${SEED_ENV} must be an integer, got {raw!r}") from None


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def manifest_path(artifact) -> Path:
    p = Path(artifact)
    return p / "manifest.json" if p.is_dir() else p.with_name(p.name + ".manifest.json")


class Run:
    """Collects manifest fields for one command invocation."""

    def __init__(self, command: str, argv: list[str], seed: int | None):
        self.command = command
        self.argv = argv
        self.seed = seed
        self.config: dict = {}
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()

    def write(self, artifact, complete: bool = True, error: str | None = None) -> Path:
        def entry(p: Path) -> dict:
            d = {"path": str(p)}
            if p.is_file():
                d.update(sha256=_sha256(p), bytes=p.stat().st_size)
            return d

        m = {
            "tool": "actvae",
            "version": __version__,
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seed": self.seed,
            "inputs": [entry(p) for p in self.inputs],
            "outputs": [entry(p) for p in self.outputs],
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
            "complete": complete,
        }
        if error is not None:
            m["error"] = error
        path = manifest_path(artifact)
        _atomic_write_text(path, json.dumps(m, indent=1, sort_keys=True) + "\n")
        return path


def _load_records(path) -> list[PoseSequenceRecord]:
    try:
        return load_sequences(path)
    except FileNotFoundError:
        raise CliError(f"no such file: {path}") from None
    except PoseFormatError as exc:
        raise CliError(f"{path}: {exc}") from None


def _category_names(path) -> list[str] | None:
    try:
        meta = read_header(path).get("meta", {})
    except (OSError, json.JSONDecodeError):
        return None
    names = meta.get("category_names")
    return list(names) if isinstance(names, list) else None


# -- gen ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    seed = _default_seed() if args.seed is None else args.seed
    if args.spec == "default":
        spec = default_synthetic_spec()
    else:
        try:
            spec = SyntheticSpec.load(args.spec)
        except FileNotFoundError:
            raise CliError(f"no such spec file: {args.spec}") from None
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(f"bad synthetic spec {args.spec}: {exc}") from None
    if args.n < 0:
        raise CliError("--n must be >= 0")
    if args.frames < 2:
        raise CliError("--frames must be >= 2")
    out = Path(args.out)
    run = Run("gen", ["gen", args.spec, str(out), "--seed", str(seed), "--n", str(args.n),
                      "--frames", str(args.frames)], seed)
    if args.spec != "default":
        run.inputs.append(Path(args.spec))
    run.config = {"spec": spec.to_dict(), "n": args.n, "frames": args.frames}
    records, _ = generate_synthetic(spec, args.n, args.frames, Rng(seed), id_prefix=args.id_prefix)
    meta = {"n_categories": spec.n_categories,
            "category_names": [c.name for c in spec.categories]}
    save_sequences(out, records, meta)
    run.outputs.append(out)
    run.write(out)
    print(f"wrote {len(records)} sequences to {out}")
    return 0


# -- train --------------------------------------------------------------------

MODEL_FLAGS = ("d_z", "enc_hidden", "dec_hidden", "n_steps")
HYPER_FLAGS = ("lr", "batch", "epochs", "max_steps", "lambda_dis", "lambda_div", "clip_norm")


def _read_config(ref: str | None) -> dict:
    if ref is None:
        ref = "desk"
    if ref in ("desk", "large"):
        text = resources.files("actvae").joinpath("configs", f"{ref}.json").read_text()
    else:
        try:
            text = Path(ref).read_text()
        except FileNotFoundError:
            raise CliError(f"no such config file: {ref}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"config {ref} is not valid JSON: {exc}") from None
    unknown = set(cfg) - {"model", "hyper"}
    if not isinstance(cfg, dict) or unknown:
        raise CliError(f"config {ref}: expected keys 'model' and 'hyper', got {sorted(cfg)}")
    return cfg


def _data_shape(records, path) -> tuple[int, int]:
    if not records:
        raise CliError(f"{path}: dataset has no sequences")
    J = records[0].n_joints
    header_c = None
    try:
        header_c = read_header(path).get("meta", {}).get("n_categories")
    except (OSError, json.JSONDecodeError):
        pass
    C = int(header_c) if header_c else max(r.action_index for r in records) + 1
    return J, C


def cmd_train(args) -> int:
    data = Path(args.data)
    records = _load_records(data)
    J, C = _data_shape(records, data)
    cfg_file = _read_config(args.config)
    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except FileNotFoundError:
            raise CliError(f"no such checkpoint: {args.resume}") from None
        except CheckpointError as exc:
            raise CliError(f"{args.resume}: {exc}") from None

    # model: defaults <- (checkpoint) <- config file <- flags
    model_d = resume.config.to_dict() if resume else {"J": J, "C": C}
    model_d.update(cfg_file.get("model", {}))
    if args.ablation:
        model_d.update(ABLATIONS[args.ablation])
    for k in MODEL_FLAGS:
        if getattr(args, k) is not None:
            model_d[k] = getattr(args, k)
    try:
        config = ModelConfig.from_dict(model_d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid model config: {exc}") from None
    if config.J != J:
        raise CliError(f"config/data mismatch: model has J={config.J} joints, "
                       f"{data} has J={J}")
    if config.C < C:
        raise CliError(f"config/data mismatch: model has C={config.C} categories, "
                       f"{data} needs at least {C}")

    hyper_d = resume.hyper.to_dict() if resume else Hyper(seed=_default_seed()).to_dict()
    hyper_d.update(cfg_file.get("hyper", {}))
    for k in HYPER_FLAGS:
        if getattr(args, k) is not None:
            hyper_d[k] = getattr(args, k)
    if args.seed is not None:
        hyper_d["seed"] = args.seed
    try:
        hyper = Hyper.from_dict(hyper_d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid hyper-parameters: {exc}") from None

    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.jsonl")
    dtype = np.float64 if args.dtype == "float64" else np.float32
    argv = ["train", str(data), "--out", str(out), "--metrics", str(metrics_path),
            "--dtype", args.dtype, "--seed", str(hyper.seed)]
    if args.resume:
        argv += ["--resume", str(args.resume)]
    for k in MODEL_FLAGS:
        argv += [f"--{k.replace('_', '-')}", str(getattr(config, k))]
    for k in HYPER_FLAGS:
        v = getattr(hyper, k)
        if v is not None:
            argv += [f"--{k.replace('_', '-')}", repr(v)]
    if args.config:
        argv += ["--config", args.config]
    if args.ablation:
        argv += ["--ablation", args.ablation]
    run = Run("train", argv, hyper.seed)
    run.inputs.append(data)
    if args.resume:
        run.inputs.append(Path(args.resume))
    run.config = {"model": config.to_dict(), "hyper": hyper.to_dict(), "dtype": args.dtype}

    metrics_tmp = metrics_path.with_name(metrics_path.name + ".tmp")
    with open(metrics_tmp, "w") as log_fh:
        def log(rec):
            log_fh.write(json.dumps(rec) + "\n")
        try:
            ckpt = train(records, config, hyper, resume=resume, dtype=dtype, log=log)
        except TrainingDiverged as exc:
            log_fh.close()
            metrics_tmp.replace(metrics_path)
            run.outputs.append(metrics_path)
            run.write(out, complete=False, error=str(exc))
            print(f"actvae train: training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except ValueError as exc:
            raise CliError(str(exc)) from None
    metrics_tmp.replace(metrics_path)
    save_checkpoint(ckpt, out)
    run.outputs += [out, metrics_path]
    run.write(out)
    tail = ckpt.history["total"][-100:]
    last = f", mean loss over last {len(tail)} steps {float(np.mean(tail)):.4f}" if len(tail) else ""
    print(f"trained {ckpt.step} steps ({ckpt.epoch} epochs){last}; checkpoint {out}")
    return 0


# -- sample -------------------------------------------------------------------


def _pick_record(records, ref: str) -> PoseSequenceRecord:
    for r in records:
        if r.id == ref:
            return r
    try:
        i = int(ref)
    except ValueError:
        raise CliError(f"no record with id {ref!r}") from None
    if not 0 <= i < len(records):
        raise CliError(f"record index {i} out of range (file has {len(records)})")
    return records[i]


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"no such checkpoint: {path}") from None
    except CheckpointError as exc:
        raise CliError(f"{path}: {exc}") from None


def cmd_sample(args) -> int:
    seed = _default_seed() if args.seed is None else args.seed
    ckpt = _checkpoint(args.ckpt)
    cfg = ckpt.config
    records = _load_records(args.pose)
    if not records:
        raise CliError(f"{args.pose}: no sequences to take a seed pose from")
    rec = _pick_record(records, args.record)
    if rec.n_joints != cfg.J:
        raise CliError(f"checkpoint/pose mismatch: model has J={cfg.J}, seed pose has "
                       f"J={rec.n_joints}")
    if not 0 <= args.frame < rec.n_frames:
        raise CliError(f"--frame {args.frame} out of range for record {rec.id!r}")
    label = rec.action_index if args.label is None else args.label
    if not 0 <= label < cfg.C:
        raise CliError(f"invalid label {label}: model has C={cfg.C} categories")
    if args.k < 1:
        raise CliError("--k must be >= 1")
    n_steps = cfg.n_steps if args.n_steps is None else args.n_steps
    if n_steps < 1:
        raise CliError("--n-steps must be >= 1")

    out = Path(args.out)
    argv = ["sample", str(args.ckpt), "--pose", str(args.pose), "--record", rec.id,
            "--frame", str(args.frame), "--label", str(label), "--n-steps", str(n_steps),
            "--k", str(args.k), "--seed", str(seed), "--out", str(out)]
    if args.deterministic:
        argv.append("--deterministic")
    run = Run("sample", argv, seed)
    run.inputs += [Path(args.ckpt), Path(args.pose)]
    run.config = {"model": cfg.to_dict(), "record": rec.id, "frame": args.frame, "label": label,
                  "n_steps": n_steps, "k": args.k, "sample": not args.deterministic}

    seed_px = rec.frames[args.frame]
    samples = sample_sequences(ckpt.model(), normalize(seed_px, rec.frame_size), label, args.k,
                               Rng(seed), sample=not args.deterministic, n_steps=n_steps)
    px = denormalize(samples, rec.frame_size, clip=True)
    names = _category_names(args.pose)
    name = names[label] if names and label < len(names) else f"label{label}"
    width = max(3, len(str(args.k - 1)))
    out_records = [PoseSequenceRecord(f"sample-{i:0{width}d}", name, label,
                                      np.concatenate([seed_px[None], px[i]]), rec.frame_size)
                   for i in range(args.k)]
    meta = {"source": {"path": str(args.pose), "record": rec.id, "frame": args.frame},
            "label": label, "seed": seed}
    if names:
        meta.update(n_categories=len(names), category_names=names)
    save_sequences(out, out_records, meta)
    run.outputs.append(out)
    run.write(out)
    print(f"wrote {args.k} sampled sequences (label {label}, {n_steps} steps) to {out}")
    return 0


# -- eval ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    seed = _default_seed() if args.seed is None else args.seed
    ckpt = _checkpoint(args.ckpt)
    records = _load_records(args.data)
    if args.limit is not None:
        records = records[: args.limit]
    if not records:
        raise CliError("empty test set")
    if records[0].n_joints != ckpt.config.J:
        raise CliError(f"checkpoint/data mismatch: model has J={ckpt.config.J}, data has "
                       f"J={records[0].n_joints}")
    if args.k < 1 or not 1 <= args.keep <= args.k:
        raise CliError("need --k >= 1 and 1 <= --keep <= --k")
    if not args.deterministic and args.k < 2:
        raise CliError("diversity needs --k >= 2 (or pass --deterministic)")
    out = Path(args.out)
    argv = ["eval", str(args.ckpt), str(args.data), "--k", str(args.k), "--keep", str(args.keep),
            "--seed", str(seed), "--start-frame", str(args.start_frame), "--out", str(out)]
    if args.limit is not None:
        argv += ["--limit", str(args.limit)]
    if args.deterministic:
        argv.append("--deterministic")
    run = Run("eval", argv, seed)
    run.inputs += [Path(args.ckpt), Path(args.data)]
    run.config = {"model": ckpt.config.to_dict(), "k": args.k, "keep": args.keep,
                  "start_frame": args.start_frame, "n_sequences": len(records),
                  "sample": not args.deterministic}
    try:
        report = evaluate(ckpt.model(), records, k=args.k, n_keep=args.keep, seed=seed,
                          sample=not args.deterministic, start_frame=args.start_frame)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    _atomic_write_text(out, "".join(json.dumps(r) + "\n" for r in report.records()))
    table = out.with_name(out.name + ".txt")
    _atomic_write_text(table, report.table() + "\n")
    run.outputs += [out, table]
    run.write(out)
    print(report.table())
    return 0


# -- plot ---------------------------------------------------------------------


def cmd_plot(args) -> int:
    src = Path(args.sequences)
    records = _load_records(src)
    if args.record is not None:
        records = [_pick_record(records, args.record)]
    elif args.limit is not None:
        records = records[: args.limit]
    if not records:
        raise CliError(f"{src}: nothing to plot")
    J = records[0].n_joints
    try:
        skeleton = load_skeleton(args.skeleton) if args.skeleton else default_skeleton(J)
    except FileNotFoundError:
        raise CliError(f"no such skeleton file: {args.skeleton}") from None
    except (ValueError, KeyError) as exc:
        raise CliError(f"{exc}") from None
    if skeleton.n_joints != J:
        raise CliError(f"skeleton {skeleton.name!r} has {skeleton.n_joints} joints, data has {J}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    argv = ["plot", str(src), "--out", str(out), "--scale", str(args.scale)]
    for flag in ("skeleton", "record", "limit", "max_frames"):
        v = getattr(args, flag)
        if v is not None:
            argv += [f"--{flag.replace('_', '-')}", str(v)]
    run = Run("plot", argv, None)
    run.inputs.append(src)
    if args.skeleton:
        run.inputs.append(Path(args.skeleton))
    run.config = {"skeleton": skeleton.name, "edges": [list(e) for e in skeleton.edges],
                  "scale": args.scale, "records": [r.id for r in records],
                  "max_frames": args.max_frames}
    for r in records:
        frames = r.frames if args.max_frames is None else r.frames[: args.max_frames]
        if len(frames) == 0:
            raise CliError("--max-frames must be >= 1")
        run.outputs += render_sequence(frames, r.frame_size, skeleton, out / r.id, args.scale)
    run.write(out)
    print(f"rendered {len(records)} sequence(s) into {out}")
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actvae", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"actvae {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic pose-sequence dataset")
    g.add_argument("spec", help="synthetic spec JSON, or 'default'")
    g.add_argument("out", help="output sequence file (.jsonl)")
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int, default=2000, help="number of sequences")
    g.add_argument("--frames", type=int, default=16, help="frames per sequence")
    g.add_argument("--id-prefix", default="syn")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a sequence file")
    t.add_argument("data")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="JSON config file or preset name (desk, large)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--metrics", help="per-step JSONL log (default <out>.metrics.jsonl)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--lambda-dis", type=float)
    t.add_argument("--lambda-div", type=float)
    t.add_argument("--clip-norm", type=float)
    t.add_argument("--d-z", type=int)
    t.add_argument("--enc-hidden", type=int)
    t.add_argument("--dec-hidden", type=int)
    t.add_argument("--n-steps", type=int)
    t.add_argument("--ablation", choices=sorted(ABLATIONS))
    t.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample sequences from a seed pose")
    s.add_argument("ckpt")
    s.add_argument("--pose", required=True, help="sequence file holding the seed pose")
    s.add_argument("--record", default="0", help="record id or index (default 0)")
    s.add_argument("--frame", type=int, default=0, help="frame used as the seed pose")
    s.add_argument("--label", type=int, help="action index (default: the record's own)")
    s.add_argument("--n-steps", type=int)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--seed", type=int)
    s.add_argument("--deterministic", action="store_true", help="use the latent means")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="best-of-K L2 and diversity on a test set")
    e.add_argument("ckpt")
    e.add_argument("data")
    e.add_argument("--k", type=int, default=100)
    e.add_argument("--keep", type=int, default=10)
    e.add_argument("--seed", type=int)
    e.add_argument("--start-frame", type=int, default=0)
    e.add_argument("--limit", type=int, help="evaluate only the first LIMIT sequences")
    e.add_argument("--deterministic", action="store_true")
    e.add_argument("--out", required=True, help="report path (.jsonl)")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="render stick-figure PNGs and a filmstrip")
    pl.add_argument("sequences")
    pl.add_argument("--out", required=True, help="output directory")
    pl.add_argument("--skeleton", help="skeleton JSON (required when J has no built-in)")
    pl.add_argument("--record", help="plot one record (id or index)")
    pl.add_argument("--limit", type=int, help="plot only the first LIMIT records")
    pl.add_argument("--max-frames", type=int)
    pl.add_argument("--scale", type=int, default=2)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"actvae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (PoseFormatError, CheckpointError, ValueError, OSError) as exc:
        print(f"actvae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
