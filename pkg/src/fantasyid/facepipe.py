"""Multi-view face collection: toy head renderer, landmark pose estimation,
max-min view selection and face cropping."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .head import (IdentityParams, LANDMARK_NAMES, canonical_landmarks_3d, face_albedo,
                   identity_mesh, landmark_indices)
from .mesh3d import TriangleMesh
from .numerics import Rng


class PoseError(ValueError):
    pass


class SelectionError(ValueError):
    pass


BACKGROUND = np.array([0.10, 0.10, 0.12])
LIGHT = np.array([0.3, -0.4, -1.0]) / np.linalg.norm([0.3, -0.4, -1.0])
HEAD_SCALE = 0.36  # head-frame units -> fraction of the frame size


@dataclass(frozen=True)
class PoseAngles:
    yaw: float
    pitch: float
    roll: float

    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.yaw, self.pitch, self.roll)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray  # (5, 2) pixel coords in LANDMARK_NAMES order

    def validate(self, height: int, width: int) -> "LandmarkSet":
        p = np.asarray(self.points)
        if p.shape != (5, 2) or not np.isfinite(p).all():
            raise PoseError("landmark set must be 5 finite 2D points")
        if (p[:, 0] < 0).any() or (p[:, 0] > width).any() or (p[:, 1] < 0).any() or (p[:, 1] > height).any():
            raise PoseError("landmark outside the frame")
        if np.allclose(p[0], p[1]):
            raise PoseError("eye landmarks coincide")
        return self


@dataclass
class FaceCollection:
    identity: str
    crops: list[np.ndarray]
    poses: list[PoseAngles]
    frame_indices: list[int]

    def __len__(self) -> int:
        return len(self.crops)


# --------------------------------------------------------------------------- rotations


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = R_y(yaw) @ R_x(pitch) @ R_z(roll), angles in degrees."""
    a, b, c = np.radians([yaw, pitch, roll])
    ry = np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])
    rx = np.array([[1, 0, 0], [0, np.cos(b), -np.sin(b)], [0, np.sin(b), np.cos(b)]])
    rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return ry @ rx @ rz


def matrix_to_angles(r: np.ndarray) -> PoseAngles:
    pitch = math.degrees(math.asin(float(np.clip(-r[1, 2], -1.0, 1.0))))
    if abs(r[1, 2]) < 1 - 1e-9:
        yaw = math.degrees(math.atan2(r[0, 2], r[2, 2]))
        roll = math.degrees(math.atan2(r[1, 0], r[1, 1]))
    else:  # gimbal lock: fold everything into yaw
        yaw = math.degrees(math.atan2(-r[2, 0], r[0, 0]))
        roll = 0.0
    wrap = lambda x: 180.0 if x <= -180.0 else x  # noqa: E731
    return PoseAngles(wrap(yaw), pitch, wrap(roll))


def pose_distance(a: PoseAngles, b: PoseAngles) -> float:
    """Geodesic angle between the two rotations, in degrees.

    Uses ``2 asin(|R_a - R_b|_F / sqrt 8)``, which equals
    ``arccos((tr(R_a^T R_b) - 1) / 2)`` but keeps precision near zero.
    """
    diff = np.linalg.norm(a.matrix() - b.matrix())
    return math.degrees(2.0 * math.asin(min(1.0, diff / math.sqrt(8.0))))


# --------------------------------------------------------------------------- rendering


def _rasterize(uv: np.ndarray, z: np.ndarray, faces: np.ndarray, colours: np.ndarray,
               height: int, width: int, chunk: int = 128) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5
    depth = np.full(px.shape, np.inf)
    image = np.tile(BACKGROUND, (px.size, 1))
    for s in range(0, len(faces), chunk):
        f = faces[s:s + chunk]
        a, b, c = uv[f[:, 0]], uv[f[:, 1]], uv[f[:, 2]]
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        ok = np.abs(area) > 1e-12
        if not ok.any():
            continue
        f, a, b, c, area = f[ok], a[ok], b[ok], c[ok], area[ok]
        col = colours[s:s + chunk][ok]
        w0 = ((b[:, None, 0] - px) * (c[:, None, 1] - py) - (b[:, None, 1] - py) * (c[:, None, 0] - px)) / area[:, None]
        w1 = ((c[:, None, 0] - px) * (a[:, None, 1] - py) - (c[:, None, 1] - py) * (a[:, None, 0] - px)) / area[:, None]
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        zf = w0 * z[f[:, 0], None] + w1 * z[f[:, 1], None] + w2 * z[f[:, 2], None]
        zf = np.where(inside, zf, np.inf)
        best = np.argmin(zf, axis=0)
        zbest = zf[best, np.arange(px.size)]
        closer = zbest < depth
        depth[closer] = zbest[closer]
        image[closer] = col[best[closer]]
    return image.reshape(height, width, 3)


def head_projection(resolution: int) -> tuple[float, np.ndarray]:
    return HEAD_SCALE * resolution, np.array([resolution / 2.0, resolution / 2.0])


def synth_head_render(identity: IdentityParams, pose: PoseAngles, resolution: int = 64
                      ) -> tuple[np.ndarray, LandmarkSet, TriangleMesh]:
    """Flat-shaded orthographic render of the posed identity head.

    Returns the uint8 frame, the exact projected landmarks and the posed mesh.
    """
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    mesh = identity_mesh(identity)
    posed = mesh.vertices @ pose.matrix().T
    scale, centre = head_projection(resolution)
    uv = scale * posed[:, :2] + centre
    f = mesh.faces
    normals = np.cross(posed[f[:, 1]] - posed[f[:, 0]], posed[f[:, 2]] - posed[f[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    front = normals[:, 2] < 0
    shade = 0.35 + 0.65 * np.clip(normals @ LIGHT, 0.0, None)
    colours = face_albedo(identity) * shade[:, None]
    img = _rasterize(uv, posed[:, 2], f[front], colours[front], resolution, resolution)
    frame = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    landmarks = LandmarkSet(uv[list(landmark_indices())].copy())
    return frame, landmarks, TriangleMesh(posed, f)


def head_landmarks(identity: IdentityParams, pose: PoseAngles, resolution: int = 64) -> LandmarkSet:
    """The landmarks ``synth_head_render`` would return, without rasterizing."""
    posed = identity_mesh(identity).vertices[list(landmark_indices())] @ pose.matrix().T
    scale, centre = head_projection(resolution)
    return LandmarkSet(scale * posed[:, :2] + centre)


# --------------------------------------------------------------------------- pose estimation


def estimate_pose(landmarks: LandmarkSet, canonical: np.ndarray | None = None) -> PoseAngles:
    """Weak-perspective fit of a 2x3 linear map, projected to the nearest rotation."""
    X = canonical_landmarks_3d() if canonical is None else np.asarray(canonical, float)
    x = np.asarray(landmarks.points, float)
    xc = x - x.mean(0)
    Xc = X - X.mean(0)
    sv = np.linalg.svd(xc, compute_uv=False)
    if sv[0] < 1e-9 or sv[1] / sv[0] < 1e-3:
        raise PoseError("landmarks are collinear; pose is undetermined")
    if np.linalg.matrix_rank(Xc, tol=1e-9) < 3:
        raise PoseError("canonical model is planar; pose is undetermined")
    M, *_ = np.linalg.lstsq(Xc, xc, rcond=None)  # Xc @ M ~ xc, M: 3x2
    M = M.T
    u, _, vt = np.linalg.svd(M, full_matrices=False)
    r12 = u @ vt
    r = np.vstack([r12, np.cross(r12[0], r12[1])])
    return matrix_to_angles(r)


# --------------------------------------------------------------------------- selection


def select_views(poses: list[PoseAngles], k: int = 6) -> list[int]:
    """Greedy max-min dispersion over geodesic pose distance.

    Seeds with the farthest pair, then adds the pose whose distance to the chosen
    set is largest; ties go to the lower index.
    """
    n = len(poses)
    if k > n:
        raise SelectionError(f"cannot select {k} views from {n}")
    if k == n:
        return list(range(n))
    if k <= 0:
        return []
    if k == 1:
        return [0]
    d = np.array([[pose_distance(a, b) for b in poses] for a in poses])
    best, seed = -1.0, (0, 1)
    for i in range(n):
        for j in range(i + 1, n):
            if d[i, j] > best:
                best, seed = d[i, j], (i, j)
    chosen = list(seed)
    mind = np.minimum(d[seed[0]], d[seed[1]])
    while len(chosen) < k:
        cand = np.where(np.isin(np.arange(n), chosen), -np.inf, mind)
        nxt = int(np.argmax(cand))  # argmax returns the first maximum
        chosen.append(nxt)
        mind = np.minimum(mind, d[nxt])
    return sorted(chosen)


def min_pairwise(poses: list[PoseAngles], idx) -> float:
    return min(pose_distance(poses[i], poses[j]) for i, j in itertools.combinations(idx, 2))


# --------------------------------------------------------------------------- cropping


def crop_box(landmarks: LandmarkSet, frame_shape: tuple[int, int], margin: float = 2.2
             ) -> tuple[float, float, float]:
    """Square (x0, y0, side) around the landmark centroid, clamped to the frame."""
    h, w = frame_shape[:2]
    p = np.asarray(landmarks.points, float)
    centre = p.mean(0)
    spread = float(max(np.ptp(p[:, 0]), np.ptp(p[:, 1])))
    side = min(margin * spread, float(h), float(w))
    x0 = float(np.clip(centre[0] - side / 2, 0.0, w - side))
    y0 = float(np.clip(centre[1] - side / 2, 0.0, h - side))
    return x0, y0, side


def crop_face(frame: np.ndarray, landmarks: LandmarkSet, margin: float = 2.2, out_res: int = 64) -> np.ndarray:
    x0, y0, side = crop_box(landmarks, frame.shape, margin)
    step = side / out_res
    t = (np.arange(out_res) + 0.5) * step - 0.5
    yy, xx = np.meshgrid(y0 + t, x0 + t, indexing="ij")
    src = frame.astype(np.float64)
    out = np.stack([ndimage.map_coordinates(src[..., ch], [yy, xx], order=1, mode="nearest")
                    for ch in range(src.shape[2])], axis=-1)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def build_face_collection(frames: list[np.ndarray], landmarks: list[LandmarkSet], k: int = 6,
                          margin: float = 2.2, out_res: int = 64, stride: int = 1,
                          identity: str = "") -> FaceCollection:
    candidates = list(range(0, len(frames), stride))
    poses = [estimate_pose(landmarks[i]) for i in candidates]
    picked = select_views(poses, min(k, len(candidates)))
    idx = [candidates[i] for i in picked]
    return FaceCollection(
        identity=identity,
        crops=[crop_face(frames[i], landmarks[i], margin, out_res) for i in idx],
        poses=[poses[i] for i in picked],
        frame_indices=idx,
    )


def sample_reference(collection: FaceCollection, rng: Rng) -> tuple[np.ndarray, int]:
    """Uniform draw; returns the crop and its source frame index."""
    i = rng.integers(0, len(collection))
    return collection.crops[i], collection.frame_indices[i]


# --------------------------------------------------------------------------- image io


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255): ASCII header ``P6\\n<W> <H>\\n255\\n`` then RGB rows."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end].decode())
        pos = end
    if parts[0] != "P6" or parts[3] != "255":
        raise ValueError(f"{path}: unsupported image header")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(data[pos + 1: pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()
