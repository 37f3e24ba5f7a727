"""Pose-sequence records: file format, normalization, splits, synthetic data.

Interchange format (``.jsonl``): the first line is a header object

    {"format": "actvae-pose-sequences", "version": 1, "units": "pixels", ...}

followed by one record per line with fields, in this order,

    id          string
    action      {"name": string, "index": int}
    frame_size  [W, H] in pixels
    frames      T x J x 2 nested lists of (x, y) pixel coordinates

Coordinates lie in [0, W-1] x [0, H-1]; every frame has the same J.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Rng

__all__ = [
    "FORMAT_NAME",
    "FORMAT_VERSION",
    "CANONICAL_SIZE",
    "PoseFormatError",
    "PoseSequenceRecord",
    "SyntheticCategory",
    "SyntheticSpec",
    "SyntheticOracle",
    "save_sequences",
    "load_sequences",
    "dumps_sequences",
    "normalize",
    "denormalize",
    "to_canonical",
    "generate_synthetic",
    "default_synthetic_spec",
    "split",
    "zero_crossing_frequency",
    "classify_by_frequency",
]

FORMAT_NAME = "actvae-pose-sequences"
FORMAT_VERSION = 1
CANONICAL_SIZE = (128, 128)


class PoseFormatError(ValueError):
    """Schema or range violation in a pose-sequence file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class PoseSequenceRecord:
    id: str
    action_name: str
    action_index: int
    frames: np.ndarray  # (T, J, 2), pixels
    frame_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.frame_size = (int(self.frame_size[0]), int(self.frame_size[1]))
        self.validate()

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]

    def validate(self) -> None:
        f = self.frames
        if f.ndim != 3 or f.shape[2] != 2:
            raise PoseFormatError(f"record {self.id!r}: frames must be T x J x 2, got {f.shape}")
        if f.shape[0] < 2:
            raise PoseFormatError(f"record {self.id!r}: needs at least 2 frames, got {f.shape[0]}")
        if f.shape[1] < 1:
            raise PoseFormatError(f"record {self.id!r}: no joints")
        W, H = self.frame_size
        if W < 2 or H < 2:
            raise PoseFormatError(f"record {self.id!r}: bad frame size {self.frame_size}")
        if self.action_index < 0:
            raise PoseFormatError(f"record {self.id!r}: negative action index")
        if not np.all(np.isfinite(f)):
            raise PoseFormatError(f"record {self.id!r}: non-finite coordinates")
        bad = (f[..., 0] < 0) | (f[..., 0] > W - 1) | (f[..., 1] < 0) | (f[..., 1] > H - 1)
        if bad.any():
            t, j = np.argwhere(bad)[0]
            raise PoseFormatError(
                f"record {self.id!r}: frame {t} joint {j} at {tuple(f[t, j])} "
                f"outside [0, {W - 1}] x [0, {H - 1}]")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "action": {"name": self.action_name, "index": int(self.action_index)},
            "frame_size": [self.frame_size[0], self.frame_size[1]],
            "frames": self.frames.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PoseSequenceRecord":
        if not isinstance(obj, dict):
            raise PoseFormatError("record must be a JSON object")
        expected = ["id", "action", "frame_size", "frames"]
        if sorted(obj) != sorted(expected):
            raise PoseFormatError(f"record fields {sorted(obj)} != {expected}")
        action = obj["action"]
        if not isinstance(action, dict) or set(action) != {"name", "index"}:
            raise PoseFormatError("action must be {'name': str, 'index': int}")
        if not isinstance(action["index"], int) or isinstance(action["index"], bool):
            raise PoseFormatError("action index must be an integer")
        if not isinstance(obj["id"], str) or not isinstance(action["name"], str):
            raise PoseFormatError("id and action name must be strings")
        fs = obj["frame_size"]
        if not (isinstance(fs, list) and len(fs) == 2 and all(isinstance(v, int) for v in fs)):
            raise PoseFormatError("frame_size must be [W, H] integers")
        frames = obj["frames"]
        if not isinstance(frames, list) or not frames:
            raise PoseFormatError("frames must be a non-empty list")
        J = None
        for t, fr in enumerate(frames):
            if not isinstance(fr, list):
                raise PoseFormatError(f"frame {t} is not a list of joints")
            if J is None:
                J = len(fr)
            elif len(fr) != J:
                raise PoseFormatError(f"frame {t} has {len(fr)} joints, expected {J}")
            for j, xy in enumerate(fr):
                if not (isinstance(xy, list) and len(xy) == 2
                        and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in xy)):
                    raise PoseFormatError(f"frame {t} joint {j} is not an [x, y] pair")
        return cls(obj["id"], action["name"], action["index"], np.array(frames, dtype=np.float64),
                   (fs[0], fs[1]))


def _header(extra: dict | None = None) -> dict:
    h = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "units": "pixels",
         "fields": ["id", "action", "frame_size", "frames"]}
    if extra:
        h["meta"] = extra
    return h


def dumps_sequences(records: Iterable[PoseSequenceRecord], meta: dict | None = None) -> str:
    lines = [json.dumps(_header(meta))]
    lines += [json.dumps(r.to_json()) for r in records]
    return "\n".join(lines) + "\n"


def save_sequences(path, records: Iterable[PoseSequenceRecord], meta: dict | None = None) -> None:
    """Write records atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_sequences(records, meta))
    tmp.replace(path)


def load_sequences(path) -> list[PoseSequenceRecord]:
    records = []
    with open(path) as fh:
        first = fh.readline()
        if not first.strip():
            raise PoseFormatError("missing header", line=1)
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise PoseFormatError(f"header is not JSON ({exc})", line=1) from None
        if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
            raise PoseFormatError(f"not an {FORMAT_NAME} file", line=1)
        if header.get("version") != FORMAT_VERSION:
            raise PoseFormatError(f"unsupported version {header.get('version')!r}", line=1)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(PoseSequenceRecord.from_json(obj))
            except json.JSONDecodeError as exc:
                raise PoseFormatError(f"invalid JSON ({exc})", line=lineno) from None
            except PoseFormatError as exc:
                raise PoseFormatError(str(exc), line=lineno) from None
    return records


def read_header(path) -> dict:
    with open(path) as fh:
        return json.loads(fh.readline())


# -- coordinates -------------------------------------------------------------


def normalize(pose: np.ndarray, frame_size: Sequence[int]) -> np.ndarray:
    """Map pixel coordinates [0, W-1] x [0, H-1] linearly onto [-1, 1]^2."""
    pose = np.asarray(pose, dtype=np.float64)
    W, H = frame_size
    hi = np.array([W - 1, H - 1], dtype=np.float64)
    if not np.all(np.isfinite(pose)) or np.any(pose < 0) or np.any(pose > hi):
        raise ValueError(f"pose outside the {W}x{H} frame")
    return 2.0 * pose / hi - 1.0


def denormalize(pose: np.ndarray, frame_size: Sequence[int], clip: bool = False) -> np.ndarray:
    """Inverse of :func:`normalize`.  Values outside [-1, 1] map outside the
    frame unless ``clip`` is set."""
    pose = np.asarray(pose, dtype=np.float64)
    W, H = frame_size
    hi = np.array([W - 1, H - 1], dtype=np.float64)
    out = (pose + 1.0) * 0.5 * hi
    if clip:
        out = np.clip(out, 0.0, hi)
    return out


def to_canonical(pose_px: np.ndarray, frame_size: Sequence[int]) -> np.ndarray:
    """Rescale pixel coordinates into the 128 x 128 metric frame ([0, 127])."""
    W, H = frame_size
    cw, ch = CANONICAL_SIZE
    scale = np.array([(cw - 1) / (W - 1), (ch - 1) / (H - 1)])
    return np.asarray(pose_px, dtype=np.float64) * scale


def canonical_from_normalized(pose: np.ndarray) -> np.ndarray:
    return denormalize(pose, CANONICAL_SIZE)


# -- synthetic data -------------------------------------------------------------


@dataclass
class SyntheticCategory:
    name: str
    omega: float  # radians / frame
    base: np.ndarray  # (J, 2) pixels
    amplitude: np.ndarray  # (J, 2) pixels
    phase: np.ndarray  # (J, 2) radians

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if not (self.base.shape == self.amplitude.shape == self.phase.shape) or self.base.ndim != 2 \
                or self.base.shape[1] != 2:
            raise ValueError(f"category {self.name!r}: base/amplitude/phase must all be J x 2")


@dataclass
class SyntheticSpec:
    """Parametric sinusoidal motion per (category, joint, axis).

    Coordinate ``k`` of joint ``j`` in a sequence of category ``c`` at frame
    ``t`` is ``base + A * (1 + a) * sin(omega_c * t + phase + delta) + noise``
    with per-sequence ``a ~ U(-amplitude_jitter, amplitude_jitter)``,
    ``delta ~ U(-phase_jitter, phase_jitter)`` and i.i.d. Gaussian
    observation noise of std ``obs_noise`` truncated at 4 std.
    """

    categories: list[SyntheticCategory]
    frame_size: tuple[int, int] = CANONICAL_SIZE
    phase_jitter: float = math.pi
    amplitude_jitter: float = 0.2
    obs_noise: float = 0.5

    NOISE_CLIP = 4.0

    def __post_init__(self):
        self.categories = [c if isinstance(c, SyntheticCategory) else SyntheticCategory(**c)
                           for c in self.categories]
        self.frame_size = (int(self.frame_size[0]), int(self.frame_size[1]))
        self.validate()

    @property
    def n_joints(self) -> int:
        return self.categories[0].base.shape[0]

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def validate(self) -> None:
        if not self.categories:
            raise ValueError("synthetic spec needs at least one category")
        J = self.n_joints
        for c in self.categories:
            if c.base.shape[0] != J:
                raise ValueError(f"category {c.name!r} has {c.base.shape[0]} joints, expected {J}")
        omegas = [c.omega for c in self.categories]
        if len(set(omegas)) != len(omegas):
            raise ValueError(f"category frequencies must be distinct, got {omegas}")
        if self.amplitude_jitter < 0 or self.phase_jitter < 0 or self.obs_noise < 0:
            raise ValueError("jitter and noise parameters must be non-negative")
        W, H = self.frame_size
        hi = np.array([W - 1, H - 1], dtype=np.float64)
        for c in self.categories:
            reach = np.abs(c.amplitude) * (1 + self.amplitude_jitter) + self.NOISE_CLIP * self.obs_noise
            if np.any(c.base - reach < 0) or np.any(c.base + reach > hi):
                raise ValueError(f"category {c.name!r} can leave the {W}x{H} frame")

    def to_dict(self) -> dict:
        return {
            "frame_size": list(self.frame_size),
            "phase_jitter": self.phase_jitter,
            "amplitude_jitter": self.amplitude_jitter,
            "obs_noise": self.obs_noise,
            "categories": [
                {"name": c.name, "omega": c.omega, "base": c.base.tolist(),
                 "amplitude": c.amplitude.tolist(), "phase": c.phase.tolist()}
                for c in self.categories
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        allowed = {"frame_size", "phase_jitter", "amplitude_jitter", "obs_noise", "categories"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        if "categories" not in d:
            raise ValueError("synthetic spec needs 'categories'")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_synthetic_spec() -> SyntheticSpec:
    """Two categories, four joints, 128 x 128 frame.

    Every joint traces an ellipse about a shared rest pose with a shared
    phase pattern; the categories differ only in angular frequency, so a
    single frame does not reveal the category.
    """
    base = [[64.0, 32.0], [40.0, 64.0], [88.0, 64.0], [64.0, 96.0]]
    amp = [[4.0, 4.0], [14.0, 10.0], [14.0, 10.0], [8.0, 4.0]]
    half = math.pi / 2
    phase = [[0.0, half], [0.0, half], [math.pi, half], [half, 0.0]]
    return SyntheticSpec([
        SyntheticCategory("slow", 0.2, base, amp, phase),
        SyntheticCategory("fast", 0.8, base, amp, phase),
    ])


@dataclass
class SyntheticOracle:
    """Noise-free trajectories of the generated sequences."""

    spec: SyntheticSpec
    categories: np.ndarray  # (n,)
    amp_scale: np.ndarray  # (n,) the (1 + a) factors
    phase_shift: np.ndarray  # (n,) the delta values
    n_frames: int
    _cache: dict = field(default_factory=dict, repr=False)

    def mean_trajectory(self, i: int, t0: int = 0, n_frames: int | None = None) -> np.ndarray:
        """Noise-free frames ``t0 .. t0 + n_frames - 1`` of sequence ``i`` (pixels)."""
        n = self.n_frames - t0 if n_frames is None else n_frames
        c = self.spec.categories[self.categories[i]]
        t = np.arange(t0, t0 + n, dtype=np.float64)[:, None, None]
        return c.base + c.amplitude * self.amp_scale[i] * np.sin(
            c.omega * t + c.phase + self.phase_shift[i])

    def all_mean_trajectories(self) -> np.ndarray:
        return np.stack([self.mean_trajectory(i) for i in range(len(self.categories))]) \
            if len(self.categories) else np.zeros((0, self.n_frames, self.spec.n_joints, 2))


def generate_synthetic(spec: SyntheticSpec, n_sequences: int, n_frames: int, rng: Rng,
                       id_prefix: str = "syn") -> tuple[list[PoseSequenceRecord], SyntheticOracle]:
    """Sample ``n_sequences`` records; category of sequence ``i`` is ``i % C``."""
    if n_sequences < 0:
        raise ValueError("n_sequences must be >= 0")
    if n_frames < 2:
        raise ValueError("sequences need at least 2 frames")
    spec.validate()
    C, J = spec.n_categories, spec.n_joints
    cats = np.arange(n_sequences) % C
    a = rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter, n_sequences)
    delta = rng.uniform(-spec.phase_jitter, spec.phase_jitter, n_sequences)
    oracle = SyntheticOracle(spec, cats, 1.0 + a, delta, n_frames)
    records = []
    clip = spec.NOISE_CLIP
    width = max(3, len(str(max(n_sequences - 1, 0))))
    for i in range(n_sequences):
        mean = oracle.mean_trajectory(i)
        noise = np.clip(rng.normal((n_frames, J, 2)), -clip, clip) * spec.obs_noise
        frames = mean + noise
        cat = spec.categories[cats[i]]
        records.append(PoseSequenceRecord(f"{id_prefix}-{i:0{width}d}", cat.name, int(cats[i]),
                                          frames, spec.frame_size))
    return records, oracle


def zero_crossing_frequency(frames: np.ndarray, base: np.ndarray, amplitude: np.ndarray | None = None,
                            min_amplitude: float = 1.0) -> float:
    """Angular frequency (rad/frame) estimated from sign changes about ``base``.

    A sinusoid crosses its centre ``omega / pi`` times per frame; the count
    is averaged over every joint axis whose ``amplitude`` exceeds
    ``min_amplitude`` (all axes when ``amplitude`` is None).
    """
    frames = np.asarray(frames, dtype=np.float64)
    d = frames - np.asarray(base)
    s = np.sign(d)
    crossings = (s[1:] * s[:-1] < 0).sum(axis=0).astype(np.float64)
    if amplitude is not None:
        mask = np.abs(np.asarray(amplitude)) > min_amplitude
        crossings = crossings[mask]
    return float(np.pi * crossings.mean() / (frames.shape[0] - 1))


def classify_by_frequency(frames: np.ndarray, spec: SyntheticSpec) -> int:
    """Category whose frequency is closest to the zero-crossing estimate."""
    best, best_err = 0, math.inf
    for k, c in enumerate(spec.categories):
        est = zero_crossing_frequency(frames, c.base, c.amplitude)
        err = abs(est - c.omega)
        if err < best_err:
            best, best_err = k, err
    return best


# -- splitting -------------------------------------------------------------------


def split(records: Sequence[PoseSequenceRecord], ratios: Sequence[float], seed: int):
    """Stratified, deterministic (train, val, test) split.

    Within each category the records are shuffled with a seed-derived
    stream and cut at the rounded cumulative ratios.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0,
                                                                         abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    by_cat: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_cat.setdefault(r.action_index, []).append(i)
    parts: list[list[int]] = [[], [], []]
    root = Rng(seed)
    for cat in sorted(by_cat):
        idx = by_cat[cat]
        perm = [idx[p] for p in root.fork(cat).permutation(len(idx))]
        n = len(perm)
        c1 = round(n * ratios[0])
        c2 = round(n * (ratios[0] + ratios[1]))
        for k, (lo, hi) in enumerate(((0, c1), (c1, c2), (c2, n))):
            parts[k].extend(perm[lo:hi])
    return tuple([records[i] for i in sorted(p)] for p in parts)
