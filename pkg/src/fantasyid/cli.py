"""Command line entry point: gen-data, train, sample, morph, eval, ablate.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_ablation, load_config
from .data import DataError, gen_data, load_dataset
from .facepipe import read_ppm, write_ppm
from .mesh3d import ConfigError, MeshError, load_mesh
from .numerics import NumericError
from .train import Trainer, load_checkpoint, set_threads, write_manifest

log = logging.getLogger("fantasyid")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["train_steps" if args.command in ("train", "ablate") else "sample_steps"] = args.steps
    if getattr(args, "guidance", None) is not None:
        changes["guidance"] = args.guidance
    if getattr(args, "injection", None) is not None:
        changes["injection"] = args.injection
    if changes:
        cfg = cfg.replace(**changes)
    return apply_ablation(cfg, getattr(args, "ablation", None))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    tmp.replace(path)


def _model_for(args):
    model, header = load_checkpoint(args.checkpoint)
    if args.injection is not None and args.injection != header["injection"]:
        raise ConfigError(f"checkpoint was trained with injection={header['injection']!r}, "
                          f"flags ask for {args.injection!r}")
    cfg = model.cfg
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.steps is not None:
        changes["sample_steps"] = args.steps
    if args.guidance is not None:
        changes["guidance"] = args.guidance
    if changes:
        model.cfg = cfg.replace(**changes)
    return model, header


def _write_frames(out: Path, frames: np.ndarray, stem: str = "frame") -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, f in enumerate(frames):
        name = f"{stem}_{i:03d}.ppm"
        write_ppm(out / name, f)
        names.append(name)
    (out / "index.txt").write_text("\n".join(names) + "\n")
    return names


# --------------------------------------------------------------------------- verbs


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    index = gen_data(cfg, args.out)
    log.info("wrote %d clips to %s (content %s)", len(index["clips"]), args.out, index["content_hash"][:12])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    clips = load_dataset(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    trainer = Trainer.resume(args.resume, cfg, clips) if args.resume else Trainer(cfg, clips)
    every = max(1, cfg.train_steps // 20)
    trainer.run(cfg.train_steps, out,
                log=lambda s, v: log.info("step %d loss %.5f", s, v) if s % every == 0 else None)
    final = out / f"ckpt_{trainer.state.step:06d}.fid"
    trainer.save(out / "checkpoint.fid")
    write_manifest(out / "manifest.json", cfg, trainer.state, started,
                   {"checkpoint": str(out / "checkpoint.fid"), "last": str(final)})
    log.info("trained %d steps, final loss %.5f", trainer.state.step, trainer.state.loss_trace[-1])
    return EXIT_OK


def cmd_sample(args) -> int:
    from .experiments import generate
    model, header = _model_for(args)
    cfg = model.cfg
    reference = read_ppm(args.reference)
    mesh = load_mesh(args.mesh)
    frames, vf = generate(model, reference, mesh.vertices, args.prompt, cfg.seed)
    out = Path(args.out)
    names = _write_frames(out, frames)
    _write_json(out / "manifest.json", {
        "seed": cfg.seed, "steps": cfg.sample_steps, "guidance": cfg.guidance,
        "config": cfg.to_dict(), "config_hash": cfg.hash(), "checkpoint_config_hash": header["config_hash"],
        "prompt": args.prompt, "reference": str(args.reference), "mesh": str(args.mesh), "frames": names,
    })
    return EXIT_OK


def cmd_morph(args) -> int:
    from .experiments import frame_grid, morph_sweep
    model, header = _model_for(args)
    cfg = model.cfg
    reference = read_ppm(args.reference)
    mesh = load_mesh(args.mesh)
    settings = [(w, j) for w in args.widths for j in args.jaws]
    rows = morph_sweep(model, reference, mesh, args.prompt, settings, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "grid.ppm", frame_grid([r["frames"] for r in rows]))
    _write_json(out / "morph.json", {
        "seed": cfg.seed, "config_hash": header["config_hash"], "prompt": args.prompt,
        "rows": [{k: v for k, v in r.items() if k != "frames"} for r in rows],
    })
    for r in rows:
        log.info("width %.2f jaw %.2f: descriptor L2 %.5f, frame MAD %.3f",
                 r["width_scale"], r["jaw_sharpness"], r["descriptor_l2"], r["frame_mad"])
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiments import run_eval
    model, header = _model_for(args)
    cfg = model.cfg
    clips = load_dataset(args.data, cfg)
    report, margins, videos = run_eval(model, clips, cfg.seed, header["config_hash"])
    out = Path(args.out)
    report.write(out / "report.json")
    _write_json(out / "identity_margins.json", margins)
    for name, frames in videos.items():
        _write_frames(out / "videos" / name, frames)
    log.info("FID %.4f RS %.4f IFS %.4f FM %.4f", report.FID, report.RS, report.IFS, report.FM)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import run_ablation
    cfg = _resolve(args)
    variants = args.variants.split(",") if args.variants else None
    rows = run_ablation(cfg, args.data, args.out, variants,
                        log=lambda s, v: log.info("step %d loss %.5f", s, v) if s % 100 == 0 else None)
    for r in rows:
        log.info("%-10s FID %.4f RS %.4f IFS %.4f FM %.4f", r["label"], r["FID"], r["RS"], r["IFS"], r["FM"])
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fantasyid", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, steps=True):
        sp.add_argument("--config", help="JSON or YAML file of config overrides")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")
        if steps:
            sp.add_argument("--steps", type=int, help="training steps (train/ablate) or sampler steps")
        sp.add_argument("--guidance", type=float)
        sp.add_argument("--injection", choices=["layer_aware", "shared", "none"])
        sp.add_argument("--ablation", help="comma list of wo_fv, wo_mfc, wo_fa, wo_lacsi")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("gen-data", help="render the synthetic clip dataset")
    common(sp, steps=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train on a generated dataset")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    for name, func, hlp in (("sample", cmd_sample, "sample one video"),
                            ("morph", cmd_morph, "morph the face mesh and resample")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--reference", required=True, help="face crop (PPM)")
        sp.add_argument("--mesh", required=True, help="identity mesh (fantasyid-mesh text)")
        sp.add_argument("--prompt", default="a person turns to the right")
        if name == "morph":
            sp.add_argument("--widths", type=float, nargs="+", default=[1.0, 1.2, 1.4])
            sp.add_argument("--jaws", type=float, nargs="+", default=[1.0])
        sp.set_defaults(func=func)

    sp = sub.add_parser("eval", help="sample one video per reference and score it")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--variants", help="subset of full,wo_fv,wo_mfc,wo_fa,wo_lacsi")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    set_threads()
    try:
        return args.func(args)
    except (DataError, MeshError, OSError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except NumericError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except ValueError as e:  # ConfigError and contract violations
        log.error("config error: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
