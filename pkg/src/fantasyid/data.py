"""Synthetic clip dataset: procedurally rendered heads following pose trajectories.

Layout of a dataset directory::

    dataset.json                 index: config, identities, clip manifests, content hash
    identities/<id>/mesh.txt     neutral identity mesh (fantasyid-mesh text format)
    clips/<clip>/manifest.json   identity, prompt, frame files, landmarks, poses, selected views
    clips/<clip>/frame_000.ppm   binary PPM frames
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .facepipe import (FaceCollection, LandmarkSet, PoseAngles, build_face_collection, crop_face,
                       read_ppm, synth_head_render, write_ppm)
from .head import IdentityParams, identity_mesh
from .mesh3d import load_mesh, save_mesh
from .numerics import Rng


class DataError(ValueError):
    pass


# prompt, (yaw, pitch, roll) as a function of u in [0, 1]
TRAJECTORIES = [
    ("a person turns to the right", lambda u: (-40 + 80 * u, 0.0, 0.0)),
    ("a person turns to the left", lambda u: (40 - 80 * u, 5 * math.sin(2 * math.pi * u), 0.0)),
    ("a person nods slowly", lambda u: (10 * math.sin(2 * math.pi * u), -20 + 40 * u, 0.0)),
    ("a person tilts the head", lambda u: (15 * math.sin(2 * math.pi * u), 0.0, -15 + 30 * u)),
]


@dataclass
class Clip:
    name: str
    identity: IdentityParams
    prompt: str
    frames: list[np.ndarray]
    landmarks: list[LandmarkSet]
    poses: list[PoseAngles]
    mesh_vertices: np.ndarray
    collection: FaceCollection | None = None
    first_crop: np.ndarray | None = None

    @property
    def identity_id(self) -> str:
        return f"id{self.identity.albedo_seed}"


def _atomic_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    os.replace(tmp, path)


def make_identities(cfg: RunConfig) -> list[IdentityParams]:
    rng = Rng(cfg.seed).spawn("identities")
    out = []
    for i in range(cfg.identities):
        w = round(float(rng.uniform((1,), 0.85, 1.2)[0]), 4)
        j = round(float(rng.uniform((1,), 0.8, 1.4)[0]), 4)
        out.append(IdentityParams(w, j, i))
    return out


def trajectory(kind: int, n: int, rng: Rng) -> tuple[str, list[PoseAngles]]:
    prompt, fn = TRAJECTORIES[kind % len(TRAJECTORIES)]
    amp = float(rng.uniform((1,), 0.85, 1.15)[0])
    offset = float(rng.uniform((1,), -5.0, 5.0)[0])
    poses = []
    for k in range(n):
        y, p, r = fn(k / max(n - 1, 1))
        poses.append(PoseAngles(amp * y + offset, amp * p, amp * r))
    return prompt, poses


def gen_data(cfg: RunConfig, out: str | Path) -> dict:
    """Render ``identities x clips_per_identity`` clips and write their manifests."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    clips_index, id_index = [], []
    digest = hashlib.sha256()
    for ident in make_identities(cfg):
        iid = f"id{ident.albedo_seed}"
        mesh_rel = f"identities/{iid}/mesh.txt"
        (out / mesh_rel).parent.mkdir(parents=True, exist_ok=True)
        save_mesh(identity_mesh(ident), out / mesh_rel)
        id_index.append({"id": iid, "width_scale": ident.width_scale, "jaw_sharpness": ident.jaw_sharpness,
                         "albedo_seed": ident.albedo_seed, "mesh": mesh_rel})
        for c in range(cfg.clips_per_identity):
            name = f"{iid}_c{c}"
            rng = Rng(cfg.seed).spawn(f"clip:{name}")
            prompt, poses = trajectory(c, cfg.frames_per_clip, rng)
            cdir = out / "clips" / name
            cdir.mkdir(parents=True, exist_ok=True)
            frames, lms, files = [], [], []
            for k, pose in enumerate(poses):
                frame, lm, _ = synth_head_render(ident, pose, cfg.frame_res)
                fname = f"frame_{k:03d}.ppm"
                write_ppm(cdir / fname, frame)
                frames.append(frame)
                lms.append(lm)
                files.append(fname)
                digest.update(frame.tobytes())
                digest.update(np.asarray(lm.points, np.float64).tobytes())
            coll = build_face_collection(frames, lms, cfg.n_views, cfg.crop_margin, cfg.face_res,
                                         cfg.view_stride, iid)
            manifest = {
                "clip": name,
                "identity": id_index[-1],
                "prompt": prompt,
                "frames": files,
                "landmarks": [np.asarray(lm.points).tolist() for lm in lms],
                "poses": [[p.yaw, p.pitch, p.roll] for p in poses],
                "selected_views": coll.frame_indices,
                "mesh": mesh_rel,
                "config_hash": cfg.hash(),
            }
            _atomic_json(cdir / "manifest.json", manifest)
            clips_index.append(f"clips/{name}/manifest.json")
    index = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "identities": id_index,
        "clips": clips_index,
        "content_hash": digest.hexdigest(),
    }
    _atomic_json(out / "dataset.json", index)
    return index


def load_dataset(root: str | Path, cfg: RunConfig) -> list[Clip]:
    """Read every clip and rebuild its multi-view face collection."""
    root = Path(root)
    try:
        index = json.loads((root / "dataset.json").read_text())
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read dataset index under {root}: {e}") from e
    if index["config"].get("frame_res") != cfg.frame_res:
        raise DataError(f"dataset frame_res {index['config'].get('frame_res')} != config {cfg.frame_res}")
    clips = []
    for rel in index["clips"]:
        m = json.loads((root / rel).read_text())
        cdir = (root / rel).parent
        frames = [read_ppm(cdir / f) for f in m["frames"]]
        if len(frames) < cfg.video_frames or len(frames) % cfg.video_frames:
            raise DataError(f"{m['clip']}: {len(frames)} frames do not tile {cfg.video_frames} video frames")
        lms = [LandmarkSet(np.asarray(p, float)) for p in m["landmarks"]]
        ident = IdentityParams(m["identity"]["width_scale"], m["identity"]["jaw_sharpness"],
                               m["identity"]["albedo_seed"])
        mesh = load_mesh(root / m["mesh"])
        clip = Clip(m["clip"], ident, m["prompt"], frames, lms,
                    [PoseAngles(*p) for p in m["poses"]], mesh.vertices)
        clip.collection = build_face_collection(frames, lms, cfg.n_views, cfg.crop_margin, cfg.face_res,
                                                cfg.view_stride, clip.identity_id)
        clip.first_crop = crop_face(frames[0], lms[0], cfg.crop_margin, cfg.face_res)
        clips.append(clip)
    if not clips:
        raise DataError(f"dataset under {root} has no clips")
    return clips


# --------------------------------------------------------------------------- video space


def video_indices(cfg: RunConfig, n_frames: int) -> list[int]:
    return list(range(0, n_frames, n_frames // cfg.video_frames))[: cfg.video_frames]


def to_video_res(frame: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsample of a uint8 frame."""
    if factor == 1:
        return frame
    h, w, c = frame.shape
    x = frame.astype(np.float64).reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))
    return np.clip(np.round(x), 0, 255).astype(np.uint8)


def scale_landmarks(lm: LandmarkSet, factor: int) -> LandmarkSet:
    """Pixel-centre-consistent landmark mapping for a block-mean downsample."""
    return LandmarkSet((np.asarray(lm.points, float) + 0.5) / factor - 0.5)


def clip_latent(clip: Clip, cfg: RunConfig) -> torch.Tensor:
    """(F, H, W, 3) standardized video latent: every k-th frame, block-mean downsampled."""
    factor = cfg.frame_res // cfg.video_res
    frames = [to_video_res(clip.frames[i], factor) for i in video_indices(cfg, len(clip.frames))]
    x = np.stack(frames).astype(np.float64) / 127.5 - 1.0
    return torch.from_numpy((x - cfg.latent_shift) / cfg.latent_scale).to(cfg.dtype)


def latent_to_frames(x: torch.Tensor, cfg: RunConfig) -> np.ndarray:
    """(F, H, W, 3) latent -> uint8 frames."""
    px = x.detach().cpu().double().numpy() * cfg.latent_scale + cfg.latent_shift
    return np.clip(np.round((px + 1.0) * 127.5), 0, 255).astype(np.uint8)
