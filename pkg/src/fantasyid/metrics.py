"""Evaluation metrics: reference similarity, inter-frame similarity, Frechet
distance over face embeddings, and face motion from dense optical flow.

The embedder is a fixed handcrafted stand-in, so metric values are only
comparable within this package.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .facepipe import LandmarkSet, crop_box, crop_face

SCHEMA_VERSION = 1
REPORT_NOTE = ("Face features come from a fixed handcrafted embedder, not ArcFace/Inception; "
               "FID/RS/IFS/FM values are only comparable across runs of this package.")

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "note", "config_hash", "aggregates", "videos"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "note": {"type": "string"},
        "config_hash": {"type": "string"},
        "aggregates": {
            "type": "object",
            "required": ["FID", "RS", "IFS", "FM"],
            "properties": {
                "FID": {"type": "number", "minimum": 0},
                "RS": {"type": "number", "minimum": -1, "maximum": 1},
                "IFS": {"type": "number", "minimum": -1, "maximum": 1},
                "FM": {"type": "number", "minimum": 0},
            },
        },
        "videos": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "RS", "IFS", "FM", "frames"],
                "properties": {
                    "name": {"type": "string"},
                    "RS": {"type": "number"},
                    "IFS": {"type": "number"},
                    "FM": {"type": "number"},
                    "frames": {"type": "integer"},
                },
            },
        },
    },
}


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    FID: float
    RS: float
    IFS: float
    FM: float
    videos: list[dict] = field(default_factory=list)
    config_hash: str = ""

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "note": REPORT_NOTE,
            "config_hash": self.config_hash,
            "aggregates": {"FID": self.FID, "RS": self.RS, "IFS": self.IFS, "FM": self.FM},
            "videos": self.videos,
        }

    def write(self, path: str | Path, csv_twin: bool = True) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        if csv_twin:
            with open(path.with_suffix(".csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["name", "RS", "IFS", "FM", "frames"])
                for row in self.videos:
                    w.writerow([row["name"], row["RS"], row["IFS"], row["FM"], row["frames"]])
                w.writerow(["ALL", self.RS, self.IFS, self.FM, ""])


# --------------------------------------------------------------------------- embedding


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img @ np.array([0.299, 0.587, 0.114])
    return img / 255.0 if np.asarray(image).dtype == np.uint8 else img


@lru_cache(maxsize=4)
def _projection(d_in: int, d_out: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(20240207))
    return rng.standard_normal((d_in, d_out)) / np.sqrt(d_out)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 1e-12 else x


def toy_face_embed(crop: np.ndarray, dim: int = 64, grid: int = 8, bins: int = 8) -> np.ndarray:
    """Grayscale -> 32x32 -> per-cell mean intensity and magnitude-weighted 8-bin
    orientation histograms on an 8x8 cell grid; each block mean-centred and
    normalised, then a fixed Gaussian projection to ``dim`` and L2 normalisation."""
    g = to_gray(crop)
    size = 4 * grid
    g = ndimage.zoom(g, (size / g.shape[0], size / g.shape[1]), order=1, grid_mode=True, mode="nearest")
    cell = size // grid
    inten = g.reshape(grid, cell, grid, cell).mean(axis=(1, 3)).ravel()
    gy, gx = np.gradient(g)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    b = np.minimum((ang / (2 * np.pi) * bins).astype(int), bins - 1)
    hist = np.zeros((grid, grid, bins))
    rows = np.arange(size)[:, None] // cell
    cols = np.arange(size)[None, :] // cell
    np.add.at(hist, (np.broadcast_to(rows, b.shape), np.broadcast_to(cols, b.shape), b), mag)
    hist = hist.ravel()
    feat = np.concatenate([_unit(inten - inten.mean()), _unit(hist - hist.mean())])
    return _unit(feat @ _projection(feat.size, dim))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(np.dot(_unit(a), _unit(b)), -1.0, 1.0))


def reference_similarity(ref_crop: np.ndarray, frame_crops: list[np.ndarray]) -> float:
    if len(frame_crops) == 0:
        raise MetricError("reference similarity needs at least one frame")
    r = toy_face_embed(ref_crop)
    return float(np.mean([cosine(r, toy_face_embed(f)) for f in frame_crops]))


def inter_frame_similarity(frame_crops: list[np.ndarray]) -> float:
    if len(frame_crops) < 2:
        raise MetricError("inter-frame similarity needs at least two frames")
    e = [toy_face_embed(f) for f in frame_crops]
    return float(np.mean([cosine(a, b) for a, b in zip(e[:-1], e[1:])]))


# --------------------------------------------------------------------------- Frechet distance


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, shrink: float = 1e-6) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    a = np.asarray(feats_a, np.float64)
    b = np.asarray(feats_b, np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    d = a.shape[1]

    def stats(x):
        mu = x.mean(0)
        cov = np.cov(x, rowvar=False).reshape(d, d) if len(x) > 1 else np.zeros((d, d))
        if len(x) < d + 1:
            cov = cov + shrink * np.eye(d)
        return mu, cov

    mu_a, s_a = stats(a)
    mu_b, s_b = stats(b)
    ra = _sqrt_psd(s_a)
    w = np.linalg.eigvalsh(ra @ s_b @ ra)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    fd = float(np.sum((mu_a - mu_b) ** 2) + np.trace(s_a) + np.trace(s_b) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


# --------------------------------------------------------------------------- optical flow


def _downsample(img: np.ndarray) -> np.ndarray:
    g = ndimage.gaussian_filter(img, 1.0, mode="nearest")
    h, w = g.shape
    g = np.pad(g, ((0, h % 2), (0, w % 2)), mode="edge")
    return g.reshape(g.shape[0] // 2, 2, g.shape[1] // 2, 2).mean(axis=(1, 3))


def _upsample_flow(f: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    ys = (np.arange(shape[0]) + 0.5) / 2 - 0.5
    xs = (np.arange(shape[1]) + 0.5) / 2 - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return 2.0 * np.stack([ndimage.map_coordinates(f[..., k], [yy, xx], order=1, mode="nearest")
                           for k in range(2)], axis=-1)


def dense_flow(frame_a: np.ndarray, frame_b: np.ndarray, levels: int = 3, window: int = 7,
               iters: int = 5) -> np.ndarray:
    """Pyramidal local least-squares flow; returns (H, W, 2) displacement (dx, dy)
    such that frame_b(x + d) ~ frame_a(x)."""
    a0, b0 = to_gray(frame_a), to_gray(frame_b)
    if a0.shape != b0.shape:
        raise MetricError(f"frame sizes differ: {a0.shape} vs {b0.shape}")
    pa, pb = [a0], [b0]
    for _ in range(levels - 1):
        if min(pa[-1].shape) < 2 * window:
            break
        pa.append(_downsample(pa[-1]))
        pb.append(_downsample(pb[-1]))
    flow = np.zeros(pa[-1].shape + (2,))
    for lvl in range(len(pa) - 1, -1, -1):
        a, b = pa[lvl], pb[lvl]
        if flow.shape[:2] != a.shape:
            flow = _upsample_flow(flow, a.shape)
        gy, gx = np.gradient(a)
        sxx = ndimage.uniform_filter(gx * gx, window, mode="nearest")
        syy = ndimage.uniform_filter(gy * gy, window, mode="nearest")
        sxy = ndimage.uniform_filter(gx * gy, window, mode="nearest")
        det = sxx * syy - sxy ** 2
        ok = det > 1e-9
        safe = np.where(ok, det, 1.0)
        yy, xx = np.mgrid[0:a.shape[0], 0:a.shape[1]].astype(np.float64)
        for _ in range(iters):
            warped = ndimage.map_coordinates(b, [yy + flow[..., 1], xx + flow[..., 0]], order=1, mode="nearest")
            it = warped - a
            bx = ndimage.uniform_filter(gx * it, window, mode="nearest")
            by = ndimage.uniform_filter(gy * it, window, mode="nearest")
            du = np.where(ok, -(syy * bx - sxy * by) / safe, 0.0)
            dv = np.where(ok, -(sxx * by - sxy * bx) / safe, 0.0)
            flow[..., 0] += du
            flow[..., 1] += dv
    return flow


def face_motion(frames: list[np.ndarray], face_boxes) -> float:
    """Mean flow magnitude inside the face box over consecutive pairs, divided by
    the box diagonal. ``face_boxes`` is one (x0, y0, x1, y1) box or one per frame."""
    if len(frames) < 2:
        raise MetricError("face motion needs at least two frames")
    boxes = face_boxes if isinstance(face_boxes, (list, tuple)) and len(face_boxes) == len(frames) \
        and np.ndim(face_boxes[0]) == 1 else [face_boxes] * len(frames)
    vals = []
    for i in range(len(frames) - 1):
        x0, y0, x1, y1 = [float(v) for v in boxes[i]]
        flow = dense_flow(frames[i], frames[i + 1])
        h, w = flow.shape[:2]
        r0, r1 = int(np.clip(np.floor(y0), 0, h - 1)), int(np.clip(np.ceil(y1), 1, h))
        c0, c1 = int(np.clip(np.floor(x0), 0, w - 1)), int(np.clip(np.ceil(x1), 1, w))
        mag = np.hypot(flow[r0:r1, c0:c1, 0], flow[r0:r1, c0:c1, 1])
        vals.append(mag.mean() / np.hypot(x1 - x0, y1 - y0))
    return float(np.mean(vals))


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvalVideo:
    name: str
    frames: list[np.ndarray]
    landmarks: list[LandmarkSet]
    reference: np.ndarray  # reference face crop


def evaluate(videos: list[EvalVideo], real_crops: list[np.ndarray], config_hash: str = "",
             margin: float = 2.2, face_res: int = 64) -> MetricReport:
    """Crop faces per frame, score every video, then aggregate. Videos are processed
    in name order, so input order does not affect the result."""
    if not videos:
        raise MetricError("no videos to evaluate")
    rows, gen_feats = [], []
    for v in sorted(videos, key=lambda v: v.name):
        crops = [crop_face(f, lm, margin, face_res) for f, lm in zip(v.frames, v.landmarks)]
        boxes = []
        for f, lm in zip(v.frames, v.landmarks):
            x0, y0, side = crop_box(lm, f.shape, margin)
            boxes.append((x0, y0, x0 + side, y0 + side))
        rows.append({
            "name": v.name,
            "RS": reference_similarity(v.reference, crops),
            "IFS": inter_frame_similarity(crops),
            "FM": face_motion(v.frames, boxes),
            "frames": len(v.frames),
        })
        gen_feats += [toy_face_embed(c) for c in crops]
    real_feats = np.array([toy_face_embed(c) for c in real_crops])
    fid = frechet_distance(np.array(gen_feats), real_feats)
    return MetricReport(
        FID=fid,
        RS=float(np.mean([r["RS"] for r in rows])),
        IFS=float(np.mean([r["IFS"] for r in rows])),
        FM=float(np.mean([r["FM"] for r in rows])),
        videos=rows,
        config_hash=config_hash,
    )
