"""Train ablation variants on one dataset and print per-identity RS margins.

    python scripts/identity_margins.py --data runs/toy/data --variants full wo_fv --steps 2000
"""
import argparse
import json
import time

from fantasyid.config import ABLATIONS, load_config
from fantasyid.data import gen_data, load_dataset
from fantasyid.experiments import run_eval
from fantasyid.train import Trainer, set_threads


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="dataset dir; generated if missing")
    p.add_argument("--variants", nargs="+", default=["full", "wo_fv"], choices=sorted(ABLATIONS))
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--cycles", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    set_threads()

    base = load_config(args.config).replace(lr=args.lr, train_steps=args.steps, seed=args.seed,
                                            lr_cycle_len=max(1, args.steps // args.cycles),
                                            lr_num_cycles=args.cycles)
    try:
        load_dataset(args.data, base)
    except Exception:
        gen_data(base, args.data)

    for name in args.variants:
        cfg = base.replace(**ABLATIONS[name])
        clips = load_dataset(args.data, cfg)
        trainer = Trainer(cfg, clips)
        t0 = time.time()
        trainer.run(cfg.train_steps, log=lambda s, v: print(f"{name} step {s} loss {v:.4f}", flush=True)
                    if s % 200 == 0 else None)
        trace = trainer.state.loss_trace
        report, margins, _ = run_eval(trainer.model, clips, cfg.seed)
        print(json.dumps({
            "variant": name,
            "train_minutes": round((time.time() - t0) / 60, 2),
            "initial_loss": trace[0],
            "final_loss_mean50": sum(trace[-50:]) / len(trace[-50:]),
            "aggregates": report.to_json()["aggregates"],
            "margins": margins["per_identity"],
            "positive": margins["positive"],
            "mean_margin": margins["mean"],
        }, indent=2), flush=True)


if __name__ == "__main__":
    main()
