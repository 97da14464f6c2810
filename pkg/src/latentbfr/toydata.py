"""Procedural face-like images for desk-scale training and evaluation.

Every identity is a fixed parameter vector (face shape, skin, eye layout, iris and
hair colour, mouth width, ...). Images of one identity differ by a small shift,
lighting, and background. Five landmarks are returned per image: eye centres,
nose tip, and mouth corners, in (x, y) pixel coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class ToyCorpus:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    identities: np.ndarray  # (N,) int
    landmarks: np.ndarray  # (N, 5, 2) float


def sample_identity(rng: np.random.Generator) -> dict[str, np.ndarray | float]:
    return {
        "skin": rng.uniform(0.4, 0.95) * np.array([1.0, rng.uniform(0.68, 0.86), rng.uniform(0.5, 0.75)]),
        "hair": rng.uniform(0.02, 0.7, size=3),
        "iris": rng.uniform(0.0, 0.8, size=3),
        "lips": rng.uniform([0.5, 0.1, 0.1], [0.9, 0.45, 0.45]),
        "face_a": rng.uniform(0.50, 0.68),
        "face_b": rng.uniform(0.62, 0.80),
        "eye_dx": rng.uniform(0.20, 0.34),
        "eye_y": rng.uniform(-0.22, -0.06),
        "eye_r": rng.uniform(0.07, 0.12),
        "iris_r": rng.uniform(0.45, 0.8),
        "brow_t": rng.uniform(0.015, 0.05),
        "nose_len": rng.uniform(0.10, 0.22),
        "mouth_w": rng.uniform(0.14, 0.30),
        "mouth_y": rng.uniform(0.28, 0.42),
        "mouth_h": rng.uniform(0.03, 0.08),
        "hair_h": rng.uniform(0.10, 0.35),
    }


def _soft(sd: np.ndarray, edge: float) -> np.ndarray:
    # sd < 0 inside; smooth step over roughly one pixel
    return 0.5 * (1.0 - np.tanh(sd / edge))


def _ellipse(u, v, cx, cy, a, b):
    r = np.sqrt(((u - cx) / a) ** 2 + ((v - cy) / b) ** 2)
    return (r - 1.0) * min(a, b)


def render_face(ident: dict, rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Render one (3, size, size) image and its (5, 2) landmarks."""
    lin = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(lin, lin, indexing="ij")
    edge = 1.2 / size
    ox, oy = rng.uniform(-0.06, 0.06, size=2)
    light = rng.uniform(0.85, 1.1)
    tilt = rng.uniform(-0.15, 0.15)
    bg = rng.uniform(0.1, 0.9, size=3)

    img = np.empty((3, size, size))
    img[:] = bg[:, None, None] * (1.0 + 0.15 * v)[None]

    def paint(mask, color):
        img[:] = img * (1.0 - mask)[None] + mask[None] * np.asarray(color)[:, None, None]

    a, b = ident["face_a"], ident["face_b"]
    hair = _soft(_ellipse(u, v, ox, oy - ident["hair_h"] * 0.5, a * 1.08, b * 0.95 + ident["hair_h"] * 0.5), edge)
    paint(hair, ident["hair"])
    shade = (1.0 + tilt * u)[None]
    face = _soft(_ellipse(u, v, ox, oy + 0.05, a, b), edge)
    img[:] = img * (1.0 - face)[None] + face[None] * ident["skin"][:, None, None] * shade

    eye_y = oy + ident["eye_y"]
    eyes = []
    for side in (-1.0, 1.0):
        ex = ox + side * ident["eye_dx"]
        r = ident["eye_r"]
        paint(_soft(_ellipse(u, v, ex, eye_y, r * 1.4, r), edge), (0.95, 0.95, 0.95))
        paint(_soft(_ellipse(u, v, ex, eye_y, r * ident["iris_r"], r * ident["iris_r"]), edge), ident["iris"])
        paint(_soft(_ellipse(u, v, ex, eye_y, r * 0.25, r * 0.25), edge), (0.02, 0.02, 0.02))
        brow = _soft(_ellipse(u, v, ex, eye_y - r * 1.6, r * 1.5, ident["brow_t"]), edge)
        paint(brow, ident["hair"] * 0.7)
        eyes.append((ex, eye_y))

    nose_top = eye_y + ident["eye_r"]
    nose_tip = nose_top + ident["nose_len"]
    nose = _soft(_ellipse(u, v, ox, (nose_top + nose_tip) / 2, 0.04, ident["nose_len"] / 2), edge)
    paint(nose, ident["skin"] * 0.75)

    my = oy + ident["mouth_y"]
    mw = ident["mouth_w"]
    paint(_soft(_ellipse(u, v, ox, my, mw, ident["mouth_h"]), edge), ident["lips"])

    img = np.clip(img * light, 0.0, 1.0).astype(np.float32)
    pts = np.array([eyes[0], eyes[1], (ox, nose_tip), (ox - mw, my), (ox + mw, my)])
    landmarks = (pts + 1.0) / 2.0 * size - 0.5
    return img, landmarks


def make_corpus(n_identities: int, per_identity: int, size: int = 64, seed: int = 0) -> ToyCorpus:
    rng = np.random.default_rng(seed)
    idents = [sample_identity(rng) for _ in range(n_identities)]
    images, labels, marks = [], [], []
    for k in range(per_identity):
        for i, ident in enumerate(idents):
            img, lm = render_face(ident, rng, size)
            images.append(img)
            labels.append(i)
            marks.append(lm)
    return ToyCorpus(np.stack(images), np.asarray(labels), np.stack(marks))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    return (np.clip(img, 0.0, 1.0).transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def write_corpus(corpus: ToyCorpus, out_dir: str | Path) -> list[str]:
    """Write PNGs plus identities.json and landmarks.json keyed by file name."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(corpus.images):
        name = f"face_{i:05d}.png"
        Image.fromarray(to_uint8(img)).save(out / name)
        names.append(name)
    (out / "identities.json").write_text(
        json.dumps({n: int(c) for n, c in zip(names, corpus.identities)}, indent=1))
    (out / "landmarks.json").write_text(
        json.dumps({n: lm.round(4).tolist() for n, lm in zip(names, corpus.landmarks)}, indent=1))
    return names
