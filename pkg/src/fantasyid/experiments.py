"""Sampling, morphing, evaluation and the ablation grid on top of a trained model."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ABLATION_LABELS, ABLATIONS, RunConfig
from .data import Clip, latent_to_frames, load_dataset, scale_landmarks, to_video_res, video_indices
from .diffusion import make_schedule, sample
from .dit import null_tokens, tokenize
from .facepipe import crop_face, pose_distance, PoseAngles
from .metrics import EvalVideo, MetricReport, evaluate, reference_similarity
from .mesh3d import TriangleMesh, morph_identity
from .numerics import Rng
from .train import FantasyModel, Trainer


@torch.no_grad()
def generate(model: FantasyModel, reference: np.ndarray, vertices: np.ndarray, prompt: str, seed: int,
             steps: int | None = None, guidance: float | None = None,
             v_f: torch.Tensor | None = None) -> tuple[np.ndarray, torch.Tensor]:
    """Sample one video; returns (uint8 frames (F, H, W, 3), descriptor (1, N', C))."""
    cfg = model.cfg
    sc = cfg.sampler()
    if steps is not None or guidance is not None:
        sc = type(sc)(steps=steps or sc.steps, guidance=sc.guidance if guidance is None else guidance, eta=sc.eta)
    if v_f is None:
        v_f = model.descriptor([reference], [vertices])
    d = model.cfg.denoiser()
    text = torch.as_tensor([tokenize(prompt, cfg.n_txt, cfg.vocab)], dtype=torch.long)
    null = torch.as_tensor([null_tokens(cfg.n_txt)], dtype=torch.long)
    x = sample(model.denoiser, (1, d.frames, d.height, d.width, d.channels), text, v_f,
               make_schedule(cfg.T, cfg.schedule), sc, Rng(seed).spawn("sample"), null_text=null,
               dtype=cfg.dtype)
    return latent_to_frames(x[0], cfg), v_f


# --------------------------------------------------------------------------- evaluation set


@dataclass
class EvalItem:
    clip: Clip
    frame: int  # reference frame index
    crop: np.ndarray  # encoder input, face_res crop of the full-resolution frame
    video_crop: np.ndarray  # the same face cropped from the video-resolution frame
    video_landmarks: list  # landmarks of the sampled video frames, video resolution


def eval_items(clips: list[Clip], cfg: RunConfig) -> list[EvalItem]:
    """One reference per clip: the collection view closest to frontal."""
    factor = cfg.frame_res // cfg.video_res
    frontal = PoseAngles(0.0, 0.0, 0.0)
    items = []
    for c in clips:
        coll = c.collection
        j = int(np.argmin([pose_distance(p, frontal) for p in coll.poses]))
        f = coll.frame_indices[j]
        vid_frame = to_video_res(c.frames[f], factor)
        vid_lm = scale_landmarks(c.landmarks[f], factor)
        items.append(EvalItem(
            c, f, coll.crops[j], crop_face(vid_frame, vid_lm, cfg.crop_margin, cfg.face_res),
            [scale_landmarks(c.landmarks[i], factor) for i in video_indices(cfg, len(c.frames))]))
    return items


def generated_crops(frames: np.ndarray, landmarks, cfg: RunConfig) -> list[np.ndarray]:
    return [crop_face(f, lm, cfg.crop_margin, cfg.face_res) for f, lm in zip(frames, landmarks)]


def real_crops(items: list[EvalItem], cfg: RunConfig) -> list[np.ndarray]:
    factor = cfg.frame_res // cfg.video_res
    out = []
    for it in items:
        for i, lm in zip(video_indices(cfg, len(it.clip.frames)), it.video_landmarks):
            out.append(crop_face(to_video_res(it.clip.frames[i], factor), lm, cfg.crop_margin, cfg.face_res))
    return out


def identity_margins(items: list[EvalItem], videos: dict[str, np.ndarray], cfg: RunConfig) -> dict:
    """Per identity: mean over its clips of RS(own reference) - max RS(other identities' references).

    Every identity's reference is its first clip's evaluation crop at video resolution.
    """
    refs: dict[str, np.ndarray] = {}
    for it in items:
        refs.setdefault(it.clip.identity_id, it.video_crop)
    per_clip, rs_table = {}, {}
    for it in items:
        crops = generated_crops(videos[it.clip.name], it.video_landmarks, cfg)
        rs = {iid: reference_similarity(r, crops) for iid, r in refs.items()}
        own = rs[it.clip.identity_id]
        others = [v for k, v in rs.items() if k != it.clip.identity_id]
        per_clip[it.clip.name] = own - max(others) if others else 0.0
        rs_table[it.clip.name] = rs
    per_id: dict[str, list[float]] = {}
    for it in items:
        per_id.setdefault(it.clip.identity_id, []).append(per_clip[it.clip.name])
    margins = {k: float(np.mean(v)) for k, v in sorted(per_id.items())}
    return {"per_identity": margins, "per_clip": per_clip, "rs": rs_table,
            "positive": sum(m > 0 for m in margins.values()), "mean": float(np.mean(list(margins.values())))}


def run_eval(model: FantasyModel, clips: list[Clip], seed: int, config_hash: str = "",
             steps: int | None = None, guidance: float | None = None) -> tuple[MetricReport, dict, dict]:
    """Sample one video per clip reference, score it, and measure identity margins."""
    cfg = model.cfg
    items = eval_items(clips, cfg)
    videos, eval_videos = {}, []
    for k, it in enumerate(items):
        frames, _ = generate(model, it.crop, it.clip.mesh_vertices, it.clip.prompt, seed + k, steps, guidance)
        videos[it.clip.name] = frames
        eval_videos.append(EvalVideo(it.clip.name, list(frames), it.video_landmarks, it.video_crop))
    report = evaluate(eval_videos, real_crops(items, cfg), config_hash or cfg.hash(), cfg.crop_margin,
                      cfg.face_res)
    return report, identity_margins(items, videos, cfg), videos


# --------------------------------------------------------------------------- morphing


def morph_sweep(model: FantasyModel, reference: np.ndarray, mesh: TriangleMesh, prompt: str,
                settings: list[tuple[float, float]], seed: int, steps: int | None = None,
                guidance: float | None = None) -> list[dict]:
    """Descriptor distance and frame change relative to the unmorphed mesh, per setting."""
    base_frames, base_vf = generate(model, reference, mesh.vertices, prompt, seed, steps, guidance)
    rows = []
    for w, j in settings:
        morphed = morph_identity(mesh, w, j)
        frames, vf = generate(model, reference, morphed.vertices, prompt, seed, steps, guidance)
        rows.append({
            "width_scale": w,
            "jaw_sharpness": j,
            "descriptor_l2": float(torch.linalg.vector_norm(vf - base_vf)),
            "frame_mad": float(np.mean(np.abs(frames.astype(np.float64) - base_frames.astype(np.float64)))),
            "frames": frames,
        })
    return rows


def frame_grid(rows: list[np.ndarray]) -> np.ndarray:
    """Stack videos as rows of side-by-side frames."""
    return np.concatenate([np.concatenate(list(v), axis=1) for v in rows], axis=0)


# --------------------------------------------------------------------------- ablation grid


def run_ablation(cfg: RunConfig, data_dir: str | Path, out: str | Path, variants: list[str] | None = None,
                 log=None) -> list[dict]:
    """Train and evaluate each variant at the same seed and step budget; writes ablation.csv/json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in variants or list(ABLATIONS):
        vcfg = cfg.replace(**ABLATIONS[name])
        clips = load_dataset(data_dir, vcfg)
        trainer = Trainer(vcfg, clips)
        trainer.run(vcfg.train_steps, out / name, log=log)
        report, margins, _ = run_eval(trainer.model, clips, vcfg.seed)
        report.write(out / name / "report.json")
        rows.append({"variant": name, "label": ABLATION_LABELS[name], "FID": report.FID, "RS": report.RS,
                     "IFS": report.IFS, "FM": report.FM, "id_margin": margins["mean"],
                     "final_loss": trainer.state.loss_trace[-1]})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Method", "FID", "RS", "IFS", "FM"])
        for r in rows:
            w.writerow([r["label"], f"{r['FID']:.4f}", f"{r['RS']:.4f}", f"{r['IFS']:.4f}", f"{r['FM']:.4f}"])
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))
    return rows
