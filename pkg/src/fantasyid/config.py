"""Flat run configuration shared by every CLI verb."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .conditioning import FusionConfig
from .diffusion import SamplerConfig
from .dit import INJECTION_MODES, DenoiserConfig
from .mesh3d import ConfigError


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # diffusion
    T: int = 1000
    schedule: str = "linear"
    sample_steps: int = 50
    guidance: float = 1.5
    eta: float = 0.0
    null_text_ratio: float = 0.1
    # optimisation
    lr: float = 3e-6
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 1e-4
    lr_cycle_len: int = 500
    lr_num_cycles: int = 4
    train_steps: int = 2000
    batch_size: int = 4
    checkpoint_every: int = 500
    precision: str = "float32"
    # id descriptor
    fusion_layers: int = 6
    fusion_heads: int = 4
    res_blocks: int = 4
    abstractor_factor: int = 4
    n_coarse: int = 314
    spiral_len: int = 9
    c_vert: int = 32
    c_vis: int = 32
    face_res: int = 64
    crop_margin: float = 2.2
    n_views: int = 6
    view_stride: int = 1
    # denoiser
    dit_blocks: int = 4
    hidden: int = 64
    heads: int = 4
    patch: tuple[int, int, int] = (1, 4, 4)
    video_frames: int = 8
    video_res: int = 32
    # pixel latent x in [-1, 1] is stored as (x - shift) / scale; toy frames are mostly dark background
    latent_shift: float = -0.72
    latent_scale: float = 0.18
    n_txt: int = 8
    vocab: int = 256
    injection: str = "layer_aware"
    # ablation flags
    drop_3d: bool = False
    use_query_resampler: bool = False
    single_reference: bool = False
    # synthetic data
    identities: int = 4
    clips_per_identity: int = 2
    frames_per_clip: int = 24
    frame_res: int = 64

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        if self.injection not in INJECTION_MODES:
            raise ConfigError(f"injection must be one of {INJECTION_MODES}, got {self.injection!r}")
        if self.schedule not in ("linear", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0.0 <= self.null_text_ratio <= 1.0:
            raise ConfigError("null_text_ratio must lie in [0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.latent_scale <= 0:
            raise ConfigError("latent_scale must be positive")
        if not 1 <= self.sample_steps <= self.T:
            raise ConfigError("sample_steps must lie in [1, T]")
        if self.frames_per_clip % self.video_frames:
            raise ConfigError("frames_per_clip must be a multiple of video_frames")
        if self.frame_res % self.video_res:
            raise ConfigError("frame_res must be a multiple of video_res")
        for name in ("batch_size", "train_steps", "identities", "clips_per_identity", "n_views",
                     "view_stride", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        # building the sub-configs runs their own validation
        self.fusion()
        self.denoiser()

    # ----------------------------------------------------------------- views

    @property
    def dtype(self):
        import torch
        return torch.float64 if self.precision == "float64" else torch.float32

    def fusion(self) -> FusionConfig:
        return FusionConfig(layers=self.fusion_layers, heads=self.fusion_heads, c_vert=self.c_vert,
                            res_blocks=self.res_blocks, abstractor_factor=self.abstractor_factor,
                            c_vis=self.c_vis, c_out=self.hidden, n_tokens=self.n_coarse)

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(blocks=self.dit_blocks, hidden=self.hidden, heads=self.heads,
                              patch=self.patch, frames=self.video_frames, height=self.video_res,
                              width=self.video_res, n_txt=self.n_txt, vocab=self.vocab,
                              injection=self.injection, id_tokens=self.n_coarse)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(steps=self.sample_steps, guidance=self.guidance, eta=self.eta)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["patch"] = list(self.patch)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return from_dict({**self.to_dict(), **changes})


def from_dict(d: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path | None) -> RunConfig:
    """JSON or YAML file of overrides on top of the defaults; ``None`` gives defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) if path.suffix in (".yaml", ".yml") else json.loads(path.read_text())
    except (OSError, ValueError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return from_dict(raw)


ABLATIONS = {
    "full": {},
    "wo_fv": {"drop_3d": True},
    "wo_mfc": {"single_reference": True},
    "wo_fa": {"use_query_resampler": True},
    "wo_lacsi": {"injection": "shared"},
}
ABLATION_LABELS = {"full": "FantasyID", "wo_fv": "w/o FV", "wo_mfc": "w/o MFC",
                   "wo_fa": "w/o FA", "wo_lacsi": "w/o LACSI"}


def apply_ablation(cfg: RunConfig, flags: str | None) -> RunConfig:
    """``flags`` is a comma list of ablation names (e.g. ``wo_fv,wo_fa``)."""
    if not flags:
        return cfg
    changes: dict = {}
    for name in (f.strip() for f in flags.split(",") if f.strip()):
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        changes.update(ABLATIONS[name])
    return cfg.replace(**changes)


def micro_config(**overrides) -> RunConfig:
    """Tiny configuration used by fast tests: 2 blocks, C=16, 4x8x8 videos."""
    base = dict(dit_blocks=2, hidden=16, heads=2, video_frames=4, video_res=8, patch=(1, 2, 2),
                fusion_layers=1, fusion_heads=2, res_blocks=1, c_vert=8, c_vis=8, n_coarse=314,
                frames_per_clip=8, frame_res=64, identities=2, clips_per_identity=1,
                batch_size=2, train_steps=10, lr=1e-3, lr_cycle_len=10, lr_num_cycles=1,
                checkpoint_every=5, T=100, sample_steps=10)
    base.update(overrides)
    return from_dict(base)
