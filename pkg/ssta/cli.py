"""Command-line entry point: ``python -m ssta <subcommand>``."""
import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from ssta.dataset import Dataset
from ssta.errors import OrderingViolation, SstaError
from ssta.experiments import SUITES, ExperimentSpec, dump_frames, run_suites
from ssta.inference import evaluate_checkpoint
from ssta.metrics import format_report, write_report_csv
from ssta.node_model import ModelConfig
from ssta.settings import PRESETS, Settings
from ssta.trainer import TrainConfig, run_pretraining, run_training
from ssta.world import PRESETS as WORLD_PRESETS
from ssta.world import WorldConfig

logger = logging.getLogger("ssta")


def _seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_gen_world(args, settings: Settings) -> int:
    view_size = settings.get("view_size")
    grid = 4 * view_size if args.world_preset == "ladder" else max(settings.get("grid_size"), 2 * view_size)
    config = WorldConfig(preset=args.world_preset, grid_size=grid, view_size=view_size, n_views=args.views,
                         n_vehicles=settings.get("n_vehicles"), seed=args.seed)
    dataset = Dataset.generate(config, args.steps, settings.get("dtype"))
    dataset.write(args.out, args.chunk)
    print(f"wrote {dataset.length} steps x {len(dataset.views)} views to {args.out}")
    return 0


def cmd_pretrain(args, settings: Settings) -> int:
    dataset = Dataset.load(args.dataset)
    view = dataset.views[0]
    model_config = ModelConfig(height=view.height, width=view.width,
                               hidden_channels=settings.get("hidden_channels"), msg_dim=settings.get("msg_dim"),
                               kernel_size=settings.get("kernel_size"), dtype=settings.get("dtype"))
    result = run_pretraining(dataset, model_config, args.epochs, args.lr, args.out, seed=args.seed,
                             holdout_fraction=settings.get("holdout_fraction"))
    print(f"reconstruction mse {result.initial_mse:.6g} -> {result.final_mse:.6g}; encoder saved to {args.out}")
    return 0


def cmd_train(args, settings: Settings) -> int:
    config = TrainConfig.from_settings(
        settings, dataset=args.dataset, out=args.out, nodes=args.nodes, k=args.k, horizon=args.horizon,
        epochs=args.epochs, lr=args.lr, batch_size=args.batch, msg_mode=args.msg_mode,
        scheduler=args.scheduler, workers=args.workers, seed=args.seed, resume=args.resume,
        lifelong=args.lifelong, buffer=args.buffer, dtype=args.dtype, pretrained=args.pretrained,
        freeze_msg_head=args.freeze_msg_head, self_message=args.self_message, rollout_msgs=args.rollout_msgs,
    )
    result = run_training(config)
    if result.epoch_losses:
        last = result.epoch_losses[-1]
        print("final loss per node: " + ", ".join(f"{i}={v:.6g}" for i, v in sorted(last.items())))
    if result.evaluation is not None:
        print(format_report(result.evaluation))
    return 0


def cmd_eval(args, settings: Settings) -> int:
    dataset = Dataset.load(args.dataset)
    report = evaluate_checkpoint(args.checkpoint, dataset, args.horizon, start=args.start, msg_mode=args.msg_mode)
    print(format_report(report))
    if args.out:
        write_report_csv(args.out, report)
    return 0


def cmd_ablate(args, settings: Settings) -> int:
    base = ExperimentSpec(
        seeds=tuple(args.seeds), nodes=settings.get("n_views"), k=settings.get("k"),
        horizon=settings.get("horizon"), epochs=settings.get("epochs"), world_preset=settings.get("world_preset"),
        world_steps=settings.get("world_steps"), view_size=settings.get("view_size"),
        n_vehicles=settings.get("n_vehicles"), batch_size=settings.get("batch_size"),
        scheduler=settings.get("scheduler"), lr=settings.get("lr"),
    )
    if args.epochs is not None:
        base = replace(base, epochs=args.epochs)
    if args.steps is not None:
        base = replace(base, world_steps=args.steps)
    suites = list(SUITES) if args.suite == "all" else [args.suite]
    try:
        comparisons = run_suites(suites, base, args.out, assert_order=args.assert_order)
    except OrderingViolation as e:
        print(f"ordering violated: {e}", file=sys.stderr)
        for arm, value in e.means.items():
            print(f"  {arm}: {value:.6g}", file=sys.stderr)
        return 1
    for comparison in comparisons.values():
        print(comparison.format_table())
        print()
    return 0


def cmd_dump_frames(args, settings: Settings) -> int:
    dataset = Dataset.load(args.dataset)
    index = dump_frames(args.checkpoint, dataset, args.t, args.horizon, args.out)
    print(f"wrote {len(index['files'])} images to {args.out}")
    return 0


def cmd_serve(args, settings: Settings) -> int:
    from ssta.main import create_app

    create_app(args.runs).run(host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssta", description="Desk-scale networked traffic-camera co-learning")
    parser.add_argument("--config", help="settings JSON merged over the defaults")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    parser.add_argument("--log-level", help="logging level (default from settings)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="simulate the traffic world and write a dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--preset", dest="world_preset", choices=WORLD_PRESETS, default="ladder")
    p.add_argument("--chunk", type=int, default=100)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("pretrain", help="pretrain the message encoder as an autoencoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="networked co-learning over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nodes", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--msg-mode", choices=("emerged", "zero", "random"))
    p.add_argument("--scheduler", choices=("serial", "parallel"))
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", default=None)
    p.add_argument("--lifelong", choices=("none", "sw", "id"))
    p.add_argument("--buffer", type=int)
    p.add_argument("--dtype", choices=("f64", "f32"))
    p.add_argument("--pretrained")
    p.add_argument("--freeze-msg-head", action="store_true", default=None)
    p.add_argument("--self-message", action="store_true", default=None)
    p.add_argument("--rollout-msgs", choices=("hold", "zero"))
    p.add_argument("--config", dest="train_config", help="settings JSON for this run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="receding-horizon metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--start", type=int)
    p.add_argument("--msg-mode", choices=("emerged", "zero", "random"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation suites over paired seeds")
    p.add_argument("--suite", choices=SUITES + ("all",), required=True)
    p.add_argument("--assert", dest="assert_order", action="store_true")
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 2])
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-frames", help="write ground truth and prediction images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_frames)

    p = sub.add_parser("serve", help="read-only HTTP monitor over a runs directory")
    p.add_argument("--runs", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5010)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = Settings(config_file=getattr(args, "train_config", None) or args.config, preset=args.preset)
    logging.basicConfig(
        level=(args.log_level or settings.get("log_level")).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args, settings)
    except SstaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
