"""Stick-figure rendering of pose sequences (Pillow, file output only).

Joint connectivity comes from JSON skeleton files::

    {"name": str, "n_joints": J, "joint_names": [...], "edges": [[a, b], ...]}

Built-ins cover the 4-joint synthetic figure, 13-joint Penn-action and
17-joint Human3.6M layouts.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

__all__ = ["Skeleton", "load_skeleton", "default_skeleton", "render_frame", "render_sequence",
           "JOINT_COLOR", "EDGE_COLOR"]

JOINT_COLOR = (220, 30, 30)
EDGE_COLOR = (60, 60, 160)
BACKGROUND = (255, 255, 255)

_BUILTIN = {4: "synthetic4", 13: "penn13", 17: "h36m17"}


@dataclass(frozen=True)
class Skeleton:
    name: str
    n_joints: int
    edges: tuple[tuple[int, int], ...]
    joint_names: tuple[str, ...] = ()

    def __post_init__(self):
        for a, b in self.edges:
            if not (0 <= a < self.n_joints and 0 <= b < self.n_joints):
                raise ValueError(f"skeleton {self.name!r}: edge ({a}, {b}) out of range")

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(d["name"], int(d["n_joints"]), tuple(tuple(e) for e in d["edges"]),
                   tuple(d.get("joint_names", ())))


def load_skeleton(path) -> Skeleton:
    return Skeleton.from_dict(json.loads(Path(path).read_text()))


def default_skeleton(n_joints: int) -> Skeleton:
    """Built-in skeleton for ``n_joints``; other sizes need an explicit file."""
    try:
        name = _BUILTIN[n_joints]
    except KeyError:
        raise ValueError(f"no built-in skeleton for J={n_joints}; "
                         "pass an explicit skeleton file") from None
    text = resources.files("actvae").joinpath("skeletons", f"{name}.json").read_text()
    return Skeleton.from_dict(json.loads(text))


def render_frame(pose: np.ndarray, frame_size: Sequence[int], skeleton: Skeleton,
                 scale: int = 1, joint_radius: int = 2) -> Image.Image:
    """One frame; joint (x, y) lands on pixel (round(x * scale), round(y * scale))."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (skeleton.n_joints, 2):
        raise ValueError(f"pose shape {pose.shape} does not match skeleton "
                         f"{skeleton.name!r} with {skeleton.n_joints} joints")
    W, H = frame_size
    if np.any(pose < 0) or np.any(pose[:, 0] > W - 1) or np.any(pose[:, 1] > H - 1):
        raise ValueError("pose lies outside the frame")
    img = Image.new("RGB", (W * scale, H * scale), BACKGROUND)
    draw = ImageDraw.Draw(img)
    px = np.rint(pose * scale).astype(int)
    for a, b in skeleton.edges:
        draw.line([tuple(px[a]), tuple(px[b])], fill=EDGE_COLOR, width=max(1, scale))
    r = joint_radius * scale
    for x, y in px:
        draw.ellipse([x - r, y - r, x + r, y + r], fill=JOINT_COLOR)
    return img


def render_sequence(frames: np.ndarray, frame_size: Sequence[int], skeleton: Skeleton,
                    out_dir, scale: int = 1, prefix: str = "frame") -> list[Path]:
    """Write one PNG per frame plus ``filmstrip.png``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = [render_frame(f, frame_size, skeleton, scale) for f in frames]
    paths = []
    for t, img in enumerate(images):
        p = out_dir / f"{prefix}_{t:03d}.png"
        img.save(p)
        paths.append(p)
    w, h = images[0].size
    strip = Image.new("RGB", (w * len(images) + (len(images) - 1), h), (0, 0, 0))
    for t, img in enumerate(images):
        strip.paste(img, (t * (w + 1), 0))
    p = out_dir / "filmstrip.png"
    strip.save(p)
    paths.append(p)
    return paths
