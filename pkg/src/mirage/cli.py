"""Command-line surface: train, eval, imagine, bench-fps."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, load_config, save_config
from .trainer import Trainer, benchmark_fps, evaluate, load_trainer

ABLATIONS = ("decoder-at-rear", "predictor-at-front", "state=latent", "state=hidden", "state=both")


def apply_ablation(cfg: RunConfig, flag: str) -> None:
    if flag == "decoder-at-rear":
        cfg.wm.decoder_at_rear = True
    elif flag == "predictor-at-front":
        cfg.wm.predictor_at_front = True
    elif flag.startswith("state="):
        cfg.agent.state_mode = flag.split("=", 1)[1]
    else:
        raise ValueError(f"unknown ablation {flag!r}; choose from {ABLATIONS}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mirage",
                                     description="Train and inspect a transformer world-model agent.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the collect/world-model/agent loop")
    train.add_argument("--config", help="flat key=value config file")
    train.add_argument("--seed", type=int, help="override the config seed")
    train.add_argument("--demo", help="demonstration trajectory file to inject")
    train.add_argument("--env", choices=["toy-ball", "toy-keydoor", "bridge"])
    train.add_argument("--ablate", action="append", default=[], choices=ABLATIONS)
    train.add_argument("--layers", type=int, help="override transformer layer count")
    train.add_argument("--steps", type=int, help="override total env steps")
    train.add_argument("--bridge", help="bridge server address host:port")
    train.add_argument("--device")
    train.add_argument("--out", default="runs/latest", help="output directory")
    train.add_argument("--resume", help="checkpoint to resume from")

    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int, default=20)
    ev.add_argument("--random-anchor", type=float, help="random-policy score R")
    ev.add_argument("--human-anchor", type=float, help="human score H")
    ev.add_argument("--device")

    im = sub.add_parser("imagine", help="export a context + imagination film strip")
    im.add_argument("--checkpoint", required=True)
    im.add_argument("--out", default="imagination.png")
    im.add_argument("--context", type=int, default=8)
    im.add_argument("--imagined", type=int, default=14)
    im.add_argument("--device")

    bench = sub.add_parser("bench-fps", help="measure loop throughput")
    bench.add_argument("--config", help="flat key=value config file")
    bench.add_argument("--steps", type=int, default=50)
    bench.add_argument("--device")
    bench.add_argument("--out", help="optional JSON report path")
    return parser


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.env:
        cfg.env = args.env
    if args.demo:
        cfg.demo_path = args.demo
    if args.layers:
        cfg.wm.layers = args.layers
    if args.steps:
        cfg.total_env_steps = args.steps
    if args.bridge:
        cfg.bridge_address = args.bridge
    if args.device:
        cfg.device = args.device
    for flag in args.ablate:
        apply_ablation(cfg, flag)

    out = Path(args.out)
    if args.resume:
        trainer = load_trainer(args.resume, device=args.device, out_dir=out)
        remaining = trainer.cfg.total_env_steps - trainer.env_step
        if remaining <= 0:
            print(f"checkpoint already at {trainer.env_step} steps; nothing to do")
            trainer.close()
            return 0
        steps = remaining
    else:
        trainer = Trainer(cfg, out_dir=out)
        steps = None
    save_config(trainer.cfg, out / "config.cfg")
    print(f"training {trainer.cfg.env} for {steps or trainer.cfg.total_env_steps} steps "
          f"(seed {trainer.cfg.seed}, fingerprint {trainer.cfg.fingerprint()})")
    final = trainer.train(total_steps=steps)
    trainer.close()
    try:
        from .export import plot_return_curve
        plotted = plot_return_curve(out / "metrics.jsonl", out / "return_curve.png")
        print(f"plotted {plotted} episode returns to {out / 'return_curve.png'}")
    except Exception as exc:  # plotting must never fail the run
        print(f"return-curve plot skipped: {exc}", file=sys.stderr)
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    trainer = load_trainer(args.checkpoint, device=args.device)
    report = evaluate(trainer, episodes=args.episodes,
                      random_anchor=args.random_anchor, human_anchor=args.human_anchor)
    trainer.close()
    print(json.dumps(report, indent=2))
    return 0


def cmd_imagine(args) -> int:
    from .export import save_imagination_strip

    trainer = load_trainer(args.checkpoint, device=args.device)
    save_imagination_strip(trainer, args.out, context=args.context, imagined=args.imagined)
    trainer.close()
    print(f"wrote {args.out} ({args.context} reconstructed + {args.imagined} imagined frames, "
          f"ground truth above)")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.device:
        cfg.device = args.device
    report = benchmark_fps(cfg, steps=args.steps)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"train": cmd_train, "eval": cmd_eval, "imagine": cmd_imagine,
                "bench-fps": cmd_bench}
    try:
        return handlers[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
