"""Model assembly, the training loop, and checkpoint save/load/resume."""
from __future__ import annotations

import json
import os
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .conditioning import IdEncoder, image_to_tensor
from .config import RunConfig, from_dict
from .data import Clip, clip_latent
from .diffusion import TrainBatch, drop_condition, make_schedule, training_loss
from .dit import Denoiser, null_tokens, tokenize
from .facepipe import sample_reference
from .head import landmark_indices, template_head
from .mesh3d import ConfigError, MeshHierarchy
from .numerics import (AdamW, NumericError, Rng, cosine_restarts_lr, init_parameters, named_parameters,
                       read_tensor_file, write_tensor_file)

CHECKPOINT_FORMAT = "fantasyid-checkpoint-1"
# keys that may differ between a checkpoint and the run resuming it
_RESUMABLE_KEYS = {"train_steps", "checkpoint_every"}


def set_threads() -> None:
    n = os.environ.get("FANTASYID_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


_HIERARCHY: dict = {}


def mesh_hierarchy(cfg: RunConfig) -> MeshHierarchy:
    key = (cfg.n_coarse, cfg.spiral_len)
    if key not in _HIERARCHY:
        _HIERARCHY[key] = MeshHierarchy.build(template_head(), [cfg.n_coarse], cfg.spiral_len)
    return _HIERARCHY[key]


class FantasyModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = IdEncoder(cfg.fusion(), mesh_hierarchy(cfg), eye_idx=landmark_indices()[:2],
                                 drop_3d=cfg.drop_3d, use_query_resampler=cfg.use_query_resampler)
        self.denoiser = Denoiser(cfg.denoiser())

    def descriptor(self, crops: list[np.ndarray], vertices: list[np.ndarray]) -> torch.Tensor:
        dtype = self.cfg.dtype
        img = image_to_tensor(np.stack(crops)).to(dtype)
        verts = None if self.cfg.drop_3d else torch.as_tensor(np.stack(vertices), dtype=dtype)
        return self.encoder(img, verts)


def build_model(cfg: RunConfig) -> FantasyModel:
    model = FantasyModel(cfg)
    init_parameters(model, Rng(cfg.seed).spawn("init"))
    return model.to(cfg.dtype)


# --------------------------------------------------------------------------- rng state <-> json


def _to_json(x):
    if isinstance(x, dict):
        return {k: _to_json(v) for k, v in x.items()}
    if isinstance(x, np.ndarray):
        return {"__ndarray__": x.tolist(), "dtype": str(x.dtype)}
    if isinstance(x, np.integer):
        return int(x)
    return x


def _from_json(x):
    if isinstance(x, dict):
        if "__ndarray__" in x:
            return np.array(x["__ndarray__"], dtype=x["dtype"])
        return {k: _from_json(v) for k, v in x.items()}
    return x


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# --------------------------------------------------------------------------- training


@dataclass
class TrainState:
    step: int = 0
    loss_trace: list[float] = field(default_factory=list)
    null_log: list[bool] = field(default_factory=list)
    ref_log: list[list] = field(default_factory=list)


class Trainer:
    """One training run. Data order, noise and dropout decisions all come from a
    single ``data`` stream, so every ablation variant sees the same batches."""

    def __init__(self, cfg: RunConfig, clips: list[Clip], model: FantasyModel | None = None):
        self.cfg = cfg
        self.clips = clips
        self.model = model if model is not None else build_model(cfg)
        self.params = named_parameters(self.model)
        self.opt = AdamW(self.params, cfg.betas, cfg.weight_decay)
        self.schedule = make_schedule(cfg.T, cfg.schedule)
        self.rng = Rng(cfg.seed).spawn("data")
        self.state = TrainState()
        self.latents = [clip_latent(c, cfg) for c in clips]
        self.text = [tokenize(c.prompt, cfg.n_txt, cfg.vocab) for c in clips]
        self.null = null_tokens(cfg.n_txt)

    def next_batch(self) -> tuple[TrainBatch, list[np.ndarray], list[np.ndarray]]:
        cfg, rng = self.cfg, self.rng
        n = len(self.clips)
        idx = rng.choice(n, size=cfg.batch_size, replace=cfg.batch_size > n)
        crops, verts, text, nulls, refs = [], [], [], [], []
        for i in idx:
            clip = self.clips[int(i)]
            crop, frame = sample_reference(clip.collection, rng)
            if cfg.single_reference:  # the draw above still happens so data order is shared
                crop, frame = clip.first_crop, 0
            tokens, dropped = drop_condition(self.text[int(i)], self.null, rng, cfg.null_text_ratio)
            crops.append(crop)
            verts.append(clip.mesh_vertices)
            text.append(tokens)
            nulls.append(dropped)
            refs.append([clip.name, int(frame)])
        t = torch.as_tensor(rng.integers(1, cfg.T + 1, size=cfg.batch_size), dtype=torch.long)
        z = torch.stack([self.latents[int(i)] for i in idx])
        noise = rng.normal(tuple(z.shape), cfg.dtype)
        batch = TrainBatch(z, torch.as_tensor(text, dtype=torch.long), None, t, noise, nulls)
        self.state.ref_log.append(refs)
        return batch, crops, verts

    def lr(self, step: int) -> float:
        return cosine_restarts_lr(step, self.cfg.lr, self.cfg.lr_cycle_len, self.cfg.lr_num_cycles)

    def step(self) -> float:
        batch, crops, verts = self.next_batch()
        self.opt.zero_grad()
        batch.v_f = self.model.descriptor(crops, verts)
        loss = training_loss(batch, self.model.denoiser, self.schedule)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {self.state.step + 1}; "
                               f"references {self.state.ref_log[-1]}")
        loss.backward()
        lr = self.lr(self.state.step)
        if lr > 0:
            self.opt.step(lr)
        self.state.step += 1
        self.state.loss_trace.append(value)
        self.state.null_log.extend(batch.null_mask)
        return value

    def run(self, steps: int, out: str | Path | None = None, log=None) -> TrainState:
        """Train until ``state.step == steps``, checkpointing every ``checkpoint_every`` steps."""
        while self.state.step < steps:
            value = self.step()
            if log is not None:
                log(self.state.step, value)
            if out is not None and (self.state.step % self.cfg.checkpoint_every == 0 or self.state.step == steps):
                self.save(Path(out) / f"ckpt_{self.state.step:06d}.fid")
        return self.state

    # ----------------------------------------------------------------- checkpoints

    def save(self, path: str | Path) -> None:
        tensors = {f"model.{k}": p for k, p in self.params.items()}
        tensors.update(self.opt.state_tensors())
        header = {
            "format": CHECKPOINT_FORMAT,
            "precision": self.cfg.precision,
            "seed": self.cfg.seed,
            "step": self.state.step,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "injection": self.cfg.injection,
            "rng_state": _to_json(self.rng.state),
            "loss_trace": self.state.loss_trace,
            "null_log": self.state.null_log,
            "ref_log": self.state.ref_log,
        }
        write_tensor_file(path, tensors, header)

    @classmethod
    def resume(cls, path: str | Path, cfg: RunConfig, clips: list[Clip]) -> "Trainer":
        tensors, header = read_tensor_file(path)
        saved = from_dict(header["config"])
        a = {k: v for k, v in saved.to_dict().items() if k not in _RESUMABLE_KEYS}
        b = {k: v for k, v in cfg.to_dict().items() if k not in _RESUMABLE_KEYS}
        if a != b:
            diff = sorted(k for k in a if a[k] != b.get(k))
            raise ConfigError(f"checkpoint config differs from run config in {diff}")
        trainer = cls(cfg, clips)
        load_model_tensors(trainer.model, tensors)
        trainer.opt.load_state_tensors(tensors, header["step"])
        trainer.rng.state = _from_json(header["rng_state"])
        trainer.state = TrainState(header["step"], list(header["loss_trace"]), list(header["null_log"]),
                                   [list(r) for r in header["ref_log"]])
        return trainer


def load_model_tensors(model: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    params = named_parameters(model)
    missing = sorted(set(params) - {k[len("model."):] for k in tensors if k.startswith("model.")})
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {missing[:5]}")
    with torch.no_grad():
        for k, p in params.items():
            src = tensors[f"model.{k}"]
            if src.shape != p.shape:
                raise ConfigError(f"{k}: checkpoint shape {tuple(src.shape)} != model {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))


def load_checkpoint(path: str | Path) -> tuple[FantasyModel, dict]:
    tensors, header = read_tensor_file(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a model checkpoint")
    cfg = from_dict(header["config"])
    model = FantasyModel(cfg).to(cfg.dtype)
    load_model_tensors(model, tensors)
    model.eval()
    return model, header


def write_manifest(path: str | Path, cfg: RunConfig, state: TrainState, started: float,
                   outputs: dict) -> dict:
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "git": git_describe(),
        "started": started,
        "finished": time.time(),
        "outputs": outputs,
        "steps": state.step,
        "loss_trace": state.loss_trace,
        "null_text_rate": float(np.mean(state.null_log)) if state.null_log else 0.0,
    }
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return manifest
