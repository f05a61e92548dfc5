"""Command-line routes: argparse subcommands mapped onto PipelineService methods."""

import argparse
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from ..config import load_run_config
from ..models import ActorKind
from ..services.pipeline_service import PipelineService


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", type=str, help="output directory (default $CFGPILOT_OUT)")
    common.add_argument("--workers", type=int, help="parallel rollout workers")
    common.add_argument("--actor", choices=[k.value for k in ActorKind], help="controller kind")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="cfgpilot", description="Guidance-scale controllers for toy diffusion")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write the procedural shapes dataset")
    sub.add_parser("train-denoiser", parents=[common], help="train the class-conditional denoiser")
    sub.add_parser("train-classifier", parents=[common], help="train the proxy classifier")

    p = sub.add_parser("train-controller", parents=[common], help="train the guidance controller with PPO")
    p.add_argument("--diagnostic", type=float, metavar="G_STAR", help="train on the hidden-target task instead")

    p = sub.add_parser("sample", parents=[common], help="generate images with a controller")
    p.add_argument("--n", type=int, default=10, help="number of images")
    p.add_argument("--labels", type=_int_list, help="comma-separated class labels, cycled")
    p.add_argument("--checkpoint", type=Path, help="actor checkpoint (default: the run's controller)")
    p.add_argument("--png", action="store_true", help="also write PNG copies")

    p = sub.add_parser("evaluate", parents=[common], help="score a sample directory")
    p.add_argument("--samples", type=Path, help="sample directory (default: the run's samples for --actor)")

    p = sub.add_parser("report", parents=[common], help="merge evaluation CSVs into a comparison table")
    p.add_argument("evals", nargs="*", type=Path, help="evaluation CSVs (default: every CSV in <out>/eval)")

    p = sub.add_parser("benchmark", parents=[common], help="episodic reward of each controller over seeds")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--episodes", type=int, default=8)
    p.add_argument("--models", type=lambda s: [ActorKind(v) for v in s.split(",")], help="comma-separated kinds")

    p = sub.add_parser("ablation", parents=[common], help="sweep circuit width, depth and sampling length")
    p.add_argument("--qubits", type=_int_list, default=[2, 4, 6])
    p.add_argument("--depths", type=_int_list, default=[1, 2, 3])
    p.add_argument("--t-samples", type=_int_list, help="sampling lengths (default: the config's T_sample)")
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--diagnostic", type=float, metavar="G_STAR", help="sweep on the hidden-target task instead")

    p = sub.add_parser("grid", parents=[common], help="mosaic of references and samples per class")
    p.add_argument("dirs", nargs="*", type=Path, help="sample directories (default: every <out>/samples/*)")
    return parser


def _sorted_or_fail(paths: Sequence[Path], what: str, where: Path) -> List[Path]:
    paths = sorted(paths)
    if not paths:
        raise FileNotFoundError(f"no {what} found in {where}")
    return paths


def _gen_data(service: PipelineService, args):
    return service.cmd_gen_data()


def _train_denoiser(service: PipelineService, args):
    return service.cmd_train_denoiser()


def _train_classifier(service: PipelineService, args):
    return service.cmd_train_classifier()


def _train_controller(service: PipelineService, args):
    return service.cmd_train_controller(diagnostic=args.diagnostic)


def _sample(service: PipelineService, args):
    return service.cmd_sample(args.n, labels=args.labels, actor_path=args.checkpoint, png=args.png)


def _evaluate(service: PipelineService, args):
    return service.cmd_evaluate(args.samples)


def _report(service: PipelineService, args):
    evals = args.evals or _sorted_or_fail((service.root / "eval").glob("*.csv"), "evaluation CSVs", service.root / "eval")
    return service.cmd_report(evals)


def _benchmark(service: PipelineService, args):
    return service.cmd_benchmark(args.seeds, args.episodes, kinds=args.models)


def _ablation(service: PipelineService, args):
    return service.cmd_ablation(
        args.qubits, args.depths, t_samples=args.t_samples, episodes=args.episodes, diagnostic=args.diagnostic
    )


def _grid(service: PipelineService, args):
    samples = service.root / "samples"
    dirs = args.dirs or _sorted_or_fail((d for d in samples.glob("*") if d.is_dir()), "sample directories", samples)
    return service.cmd_grid(dirs)


ROUTES: Dict[str, Callable] = {
    "gen-data": _gen_data,
    "train-denoiser": _train_denoiser,
    "train-classifier": _train_classifier,
    "train-controller": _train_controller,
    "sample": _sample,
    "evaluate": _evaluate,
    "report": _report,
    "benchmark": _benchmark,
    "ablation": _ablation,
    "grid": _grid,
}


def run_command(argv: Optional[Sequence[str]] = None):
    """Parse ``argv``, build the run config (defaults < JSON < flags) and run the subcommand."""
    args = build_parser().parse_args(argv)
    config = load_run_config(
        args.config,
        overrides={"seed": args.seed, "out_dir": args.out, "workers": args.workers, "actor": args.actor},
    )
    return ROUTES[args.command](PipelineService(config), args)
