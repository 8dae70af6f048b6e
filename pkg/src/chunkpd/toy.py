"""Procedural circle/meander/spiral drawings for desk-scale experiments.

Every toy image is a pure function of ``(seed, subject_id, label, drawing_type,
index)``, which is also what its ``toy://`` source path encodes, so toy
manifests never need to hold pixels.

Each subject gets a persistent drawing style (size, offset, stroke width,
slant). PD subjects additionally get a tremor: a high-frequency displacement
of the pen path along its normal, plus a small random-walk jitter.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np
from PIL import Image, ImageDraw

TOY_SIDE = 384
TOY_SCHEME = "toy://"


def _rng(*parts: object) -> np.random.Generator:
    digest = hashlib.sha256("|".join(map(str, parts)).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def subject_style(seed: int, subject_id: str, label: str) -> dict:
    rng = _rng("style", seed, subject_id)
    style = {
        "scale": rng.uniform(0.72, 0.9),
        "dx": rng.uniform(-12, 12),
        "dy": rng.uniform(-12, 12),
        "width": int(rng.integers(2, 5)),
        "slant": rng.uniform(-0.08, 0.08),
        "phase": rng.uniform(0, 2 * np.pi),
        "tremor_amp": 0.0,
        "tremor_freq": 0.0,
        "jitter": 0.25,
    }
    if label == "PD":
        style["tremor_amp"] = rng.uniform(2.5, 4.5)
        style["tremor_freq"] = rng.uniform(0.16, 0.3)  # cycles per pixel of arc length
        style["jitter"] = rng.uniform(0.6, 1.0)
    return style


def _template(drawing_type: str, n: int, turns: float) -> np.ndarray:
    """Unit-scale path in [-1, 1]^2."""
    if drawing_type == "circle":
        t = np.linspace(0, 2 * np.pi, n)
        return np.stack([np.cos(t), np.sin(t)], axis=1) * 0.85
    if drawing_type == "spiral":
        t = np.linspace(0, 2 * np.pi * turns, n)
        r = 0.08 + 0.9 * t / t[-1]
        return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    if drawing_type == "meander":
        # square spiral traced outwards from the centre
        pts = [(0.0, 0.0)]
        step, x, y = 0.11, 0.0, 0.0
        dirs = [(1, 0), (0, 1), (-1, 0), (0, -1)]
        for k in range(int(2 * turns * 2)):
            length = step * (k // 2 + 1)
            ux, uy = dirs[k % 4]
            x, y = x + ux * length, y + uy * length
            pts.append((x, y))
        corners = np.asarray(pts)
        corners /= np.abs(corners).max()
        seg = np.linspace(0, 1, max(2, n // len(corners)))[:-1]
        path = [a + (b - a) * s for a, b in zip(corners[:-1], corners[1:]) for s in seg]
        path.append(corners[-1])
        return np.asarray(path) * 0.9
    raise ValueError(f"unknown drawing type {drawing_type!r}")


def _perturb(path: np.ndarray, style: dict, rng: np.random.Generator) -> np.ndarray:
    d = np.gradient(path, axis=0)
    seglen = np.linalg.norm(d, axis=1)
    normal = np.stack([-d[:, 1], d[:, 0]], axis=1) / np.maximum(seglen, 1e-9)[:, None]
    arc = np.cumsum(seglen)
    disp = style["tremor_amp"] * np.sin(2 * np.pi * style["tremor_freq"] * arc + style["phase"])
    walk = np.cumsum(rng.normal(0, style["jitter"], size=len(path)))
    walk -= np.convolve(walk, np.ones(25) / 25, mode="same")  # keep only the high-frequency part
    wobble = rng.uniform(-3, 3) * np.sin(2 * np.pi * arc / max(arc[-1], 1.0) + rng.uniform(0, 6.3))
    return path + normal * (disp + walk + wobble)[:, None]


@lru_cache(maxsize=64)
def _render_cached(seed: int, subject_id: str, label: str, drawing_type: str, index: int, side: int) -> bytes:
    style = subject_style(seed, subject_id, label)
    rng = _rng("draw", seed, subject_id, drawing_type, index)
    turns = 3.0 + rng.uniform(-0.2, 0.2)
    path = _template(drawing_type, 1600, turns)
    half = side / 2.0
    scale = style["scale"] * half * rng.uniform(0.97, 1.03)
    xy = path * scale
    xy[:, 0] += xy[:, 1] * style["slant"]
    # resample to ~1px arc spacing so tremor frequency is in pixel units
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.arange(0.0, arc[-1], 1.0)
    xy = np.stack([np.interp(s, arc, xy[:, 0]), np.interp(s, arc, xy[:, 1])], axis=1)
    xy = _perturb(xy, style, rng)
    xy[:, 0] += half + style["dx"] + rng.uniform(-4, 4)
    xy[:, 1] += half + style["dy"] + rng.uniform(-4, 4)

    canvas = Image.new("L", (side, side), color=255)
    ImageDraw.Draw(canvas).line([tuple(p) for p in xy.tolist()], fill=30, width=style["width"], joint="curve")
    return canvas.tobytes()


def render_toy_drawing(
    seed: int, subject_id: str, label: str, drawing_type: str, index: int, side: int = TOY_SIDE
) -> np.ndarray:
    """Render one toy drawing as a side x side grayscale uint8 array."""
    raw = _render_cached(int(seed), subject_id, label, drawing_type, int(index), int(side))
    return np.frombuffer(raw, dtype=np.uint8).reshape(side, side).copy()


def toy_path(seed: int, label: str, subject_id: str, drawing_type: str, index: int) -> str:
    return f"{TOY_SCHEME}{seed}/{label}/{subject_id}/{drawing_type}_{index}.png"


def parse_toy_path(path: str) -> tuple[int, str, str, str, int]:
    body = path[len(TOY_SCHEME):]
    seed, label, subject_id, fname = body.split("/")
    drawing_type, index = fname.rsplit(".", 1)[0].rsplit("_", 1)
    return int(seed), label, subject_id, drawing_type, int(index)
