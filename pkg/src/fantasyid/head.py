"""Procedural toy head: a deformed icosphere with a nose, fixed landmark vertices and
seeded per-identity albedo.

Head frame: x to the image right, y down, z away from the camera. The face looks
toward -z, so the nose tip has the smallest z.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mesh3d import TriangleMesh, icosphere, morph_identity

LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")
_LANDMARK_DIRS = {
    "left_eye": (-0.38, -0.25, -0.89),
    "right_eye": (0.38, -0.25, -0.89),
    "nose": (0.0, 0.0, -1.0),
    "mouth_left": (-0.30, 0.45, -0.84),
    "mouth_right": (0.30, 0.45, -0.84),
}
SUBDIVISIONS = 3
_AXES = np.array([0.80, 1.05, 0.90])


@dataclass(frozen=True)
class IdentityParams:
    width_scale: float = 1.0
    jaw_sharpness: float = 1.0
    albedo_seed: int = 0

    @property
    def key(self) -> str:
        return f"w{self.width_scale:.3f}_j{self.jaw_sharpness:.3f}_a{self.albedo_seed}"


@lru_cache(maxsize=None)
def _sphere() -> TriangleMesh:
    return icosphere(SUBDIVISIONS)


@lru_cache(maxsize=None)
def landmark_indices() -> tuple[int, ...]:
    """Vertex ids of the five landmarks, in LANDMARK_NAMES order."""
    v = _sphere().vertices
    out = []
    for name in LANDMARK_NAMES:
        d = np.asarray(_LANDMARK_DIRS[name], float)
        out.append(int(np.argmax(v @ (d / np.linalg.norm(d)))))
    return tuple(out)


@lru_cache(maxsize=None)
def _template_arrays() -> tuple[np.ndarray, np.ndarray]:
    sphere = _sphere()
    d = sphere.vertices
    p = d * _AXES
    nose_dir = np.array([0.0, 0.0, -1.0])
    ang = np.arccos(np.clip(d @ nose_dir, -1, 1))
    p[:, 2] -= 0.30 * np.exp(-(ang / 0.20) ** 2)
    # chin: extend the lower front downward a little
    chin = np.clip(d[:, 1] - 0.55, 0, None) * np.clip(-d[:, 2], 0, None)
    p[:, 1] += 0.35 * chin
    p -= p.mean(0)
    return p, sphere.faces


def template_head() -> TriangleMesh:
    """Canonical neutral head (642 vertices, 1280 faces)."""
    v, f = _template_arrays()
    return TriangleMesh(v.copy(), f.copy())


def canonical_landmarks_3d() -> np.ndarray:
    """5 x 3 canonical landmark model used by pose estimation."""
    v, _ = _template_arrays()
    return v[list(landmark_indices())].copy()


def identity_mesh(identity: IdentityParams) -> TriangleMesh:
    return morph_identity(template_head(), identity.width_scale, identity.jaw_sharpness)


def face_albedo(identity: IdentityParams) -> np.ndarray:
    """Per-face RGB albedo in [0, 1], a pure function of ``albedo_seed``.

    The seed picks a stripe orientation (seed % 4, in 45 degree steps), a skin
    tone (bit 2) and a hair tone (bit 3); the remaining details are drawn from a
    Philox stream keyed by the seed. Eyes and mouth are shared dark features.
    """
    s = identity.albedo_seed
    rng = np.random.default_rng(np.random.Philox(s))
    v, f = _template_arrays()
    c = v[f].mean(1)
    cn = c / np.linalg.norm(c, axis=1, keepdims=True)
    skin = (0.45 + 0.35 * ((s // 4) % 2)) * np.array([1.0, 0.82, 0.70])
    theta = (s % 4) * np.pi / 4 + rng.uniform(-0.1, 0.1)
    direction = np.array([np.cos(theta), np.sin(theta), 0.0])
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * 1.1 * (c @ direction) + rng.uniform(0, 2 * np.pi))
    amp = 0.75
    col = skin[None] * (1 - amp + amp * 1.6 * stripes[:, None])
    hair_lum = (0.1, 0.85)[(s // 8) % 2]
    hairline = rng.uniform(-0.75, -0.5)
    hair = (cn[:, 1] < hairline) | (cn[:, 2] > 0.35)
    col[hair] = hair_lum * np.array([1.0, 0.85, 0.6])
    lm = v[list(landmark_indices())]
    for k in (0, 1):
        col[np.linalg.norm(c - lm[k], axis=1) < 0.13] = (0.05, 0.05, 0.1)
    mouth = (lm[3] + lm[4]) / 2
    mouth_mask = (np.abs(c[:, 0] - mouth[0]) < 0.22) & (np.abs(c[:, 1] - mouth[1]) < 0.07) & (c[:, 2] < 0)
    col[mouth_mask] = (0.55, 0.12, 0.12)
    return np.clip(col, 0.0, 1.0)
