"""``fedalign`` command-line interface.

Subcommands::

    fedalign partition  --input data/ --n-agents 5 --out parts/
    fedalign align      --input parts/ --out aligned/
    fedalign train      --input parts/ --test-input test.bin --aligned --history out.csv
    fedalign metrics    --pre parts/ --post aligned/ --out report.csv
    fedalign bench      --sizes 64,128,256,512 --out bench.csv
    fedalign project-one --image in.png --target aligned/ --out out.png

Every subcommand accepts ``--config run.json``; flags override the file,
the file overrides built-in defaults. Exit codes: 0 success, 1 validation
error, 2 numerical non-convergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as config_mod
from .align import (
    AgentState,
    AlignmentReport,
    LabeledImages,
    align_network,
    discrepancy_matrix,
    make_agents,
    partition_dataset,
)
from .bench import bench_scaling
from .channels import CHANNEL_NAMES, LEVELS, ChannelTriplet, pooled_channel_measures, project_image
from .datasets import load_dataset, save_dataset
from .errors import ConvergenceError, NumericalError, ValidationError
from .experiment import federated_experiment
from .learner import TrainingError, history_to_csv
from .ot import DiscreteMeasure

logger = logging.getLogger("fedalign")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
AGENT_PREFIX = "agent_"
TRIPLET_FILES = tuple(f"global_{name}.txt" for name in CHANNEL_NAMES)


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors, not argparse's default exit 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- file layout


def _agent_name(a: int, fmt: str) -> str:
    return f"{AGENT_PREFIX}{a:03d}" + (".bin" if fmt == "cifar10-binary" else "")


def is_agent_layout(path: Path) -> bool:
    return path.is_dir() and any(p.name.startswith(AGENT_PREFIX) for p in path.iterdir())


def save_agents(shards: Sequence[LabeledImages], out: Path, fmt: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for a, shard in enumerate(shards):
        save_dataset(shard, out / _agent_name(a, fmt), fmt)


def load_agents(path: Path, fmt: str, n_agents: Optional[int] = None, seed: int = 0) -> List[AgentState]:
    """Agents from a partition directory, or by partitioning a plain dataset."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(2, "input does not exist", str(path))
    if is_agent_layout(path):
        entries = sorted(p for p in path.iterdir() if p.name.startswith(AGENT_PREFIX))
        shards = [load_dataset(p, fmt) for p in entries]
        if n_agents is not None and n_agents != len(shards):
            raise ValidationError(f"{path} holds {len(shards)} agents, config asks for {n_agents}")
        return make_agents(shards)
    return make_agents(partition_dataset(load_dataset(path, fmt), n_agents or 1, seed))


def save_triplet(triplet: ChannelTriplet, out: Path) -> None:
    for name, measure in zip(TRIPLET_FILES, triplet):
        (out / name).write_text(measure.to_text())


def load_triplet(path: Path) -> ChannelTriplet:
    return ChannelTriplet(*(DiscreteMeasure.from_text((path / n).read_text()) for n in TRIPLET_FILES))


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------- subcommands


def cmd_partition(args, cfg: config_mod.RunConfig) -> int:
    data = load_dataset(_require(cfg.paths.input, "--input"), cfg.paths.format)
    shards = partition_dataset(data, cfg.train.n_agents, cfg.seed)
    out = Path(_require(cfg.paths.out, "--out"))
    save_agents(shards, out, cfg.paths.format)
    print(f"wrote {len(shards)} shards ({', '.join(str(len(s)) for s in shards)} images) to {out}")
    return EXIT_OK


def _network(args, cfg: config_mod.RunConfig):
    """Load agents and make the training config agree with their number.

    A partition directory fixes the agent count unless ``--n-agents`` was
    given explicitly; a plain dataset is split into ``train.n_agents``.
    """
    path = Path(_require(cfg.paths.input, "--input"))
    n = cfg.train.n_agents
    if path.is_dir() and is_agent_layout(path) and args.n_agents is None:
        n = None
    agents = load_agents(path, cfg.paths.format, n, cfg.seed)
    train = cfg.train
    if train.n_agents != len(agents):
        train = dataclasses.replace(train, n_agents=len(agents))
    return agents, dataclasses.replace(cfg, train=train)


def cmd_align(args, cfg: config_mod.RunConfig) -> int:
    agents, cfg = _network(args, cfg)
    out = Path(_require(cfg.paths.out, "--out"))
    agents, report = align_network(agents, config=cfg.align_config())
    save_agents([ag.aligned_dataset for ag in agents], out, cfg.paths.format)
    save_triplet(report.global_triplet, out)
    _write_text(Path(args.report) if args.report else out / "report.csv", report.to_csv())
    (out / "summary.txt").write_text(report.summary(timings=False))
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_train(args, cfg: config_mod.RunConfig) -> int:
    agents, cfg = _network(args, cfg)
    test = load_dataset(_require(cfg.paths.test_input, "--test-input"), cfg.paths.format)
    history, params, _ = federated_experiment(
        agents, test, cfg.train_config(), cfg.align_config(), aligned=args.aligned
    )
    _write_text(Path(args.history), history_to_csv(history))
    if args.params:
        Path(args.params).write_bytes(params.to_bytes())
    print(f"final test accuracy {history[-1].test_accuracy:.4f} after {len(history)} rounds")
    return EXIT_OK


def cmd_metrics(args, cfg: config_mod.RunConfig) -> int:
    pre = load_agents(Path(args.pre), cfg.paths.format)
    post = load_agents(Path(args.post), cfg.paths.format)
    if len(pre) != len(post):
        raise ValidationError(f"--pre has {len(pre)} agents, --post has {len(post)}")
    report = AlignmentReport(discrepancy_matrix(pre), discrepancy_matrix(post))
    _write_text(Path(args.out), report.to_csv())
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_bench(args, cfg: config_mod.RunConfig) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError:
        raise ValidationError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    result = bench_scaling(sizes, cfg.sinkhorn, cfg.barycenter, repeats=args.repeats, seed=cfg.seed)
    _write_text(Path(args.out), result.to_csv())
    print(f"sinkhorn slope {result.sinkhorn_slope:.3f}  barycenter slope {result.barycenter_slope:.3f}")
    return EXIT_OK


def cmd_project_one(args, cfg: config_mod.RunConfig) -> int:
    from PIL import Image

    img = _read_image(Path(args.image))
    target_path = Path(args.target)
    if target_path.is_dir():
        target = load_triplet(target_path)
    else:
        target = pooled_channel_measures([_read_image(target_path)], cfg.measure, (cfg.seed, 0, 0))
    out_img, luts = project_image(
        img, target, cfg.measure, cfg.sinkhorn, seed=(cfg.seed, 0, 0), return_luts=True
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out_img).save(out)
    if args.luts:
        lut_dir = Path(args.luts)
        lut_dir.mkdir(parents=True, exist_ok=True)
        for name, lut in zip(CHANNEL_NAMES, luts):
            rows = "".join(f"{level},{int(lut[level])}\n" for level in range(LEVELS))
            (lut_dir / f"lut_{name}.csv").write_text("level,mapped_level\n" + rows)
    return EXIT_OK


def _require(value, flag: str):
    if value is None:
        raise ValidationError(f"{flag} is required (flag or config paths section)")
    return value


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedalign", description="OT colour alignment for federated learning")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--format", choices=("cifar10-binary", "image-directory"))
    common.add_argument("--epsilon", type=float, help="Sinkhorn epsilon")
    common.add_argument("--bary-epsilon", type=float, help="barycenter epsilon")
    common.add_argument("--log-domain", action="store_true", default=None)
    common.add_argument("--measure", choices=("histogram", "subsample"))
    common.add_argument("--count", type=int, help="pixels per channel in subsample mode")
    common.add_argument("--workers", type=int)

    agents = _Parser(add_help=False)
    agents.add_argument("--n-agents", type=int)

    p = sub.add_parser("partition", parents=[common, agents], help="split a dataset across agents")
    p.add_argument("--input")
    p.add_argument("--out")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("align", parents=[common, agents], help="align a network of agents")
    p.add_argument("--input", help="partition directory or a dataset to partition")
    p.add_argument("--out")
    p.add_argument("--report", help="report CSV path (default OUT/report.csv)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", parents=[common, agents], help="FedAvg on raw or aligned data")
    p.add_argument("--input")
    p.add_argument("--test-input")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--aligned", dest="aligned", action="store_true")
    mode.add_argument("--raw", dest="aligned", action="store_false")
    p.add_argument("--history", required=True)
    p.add_argument("--params", help="write final model parameters here")
    p.add_argument("--rounds", type=int)
    p.add_argument("--participants", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metrics", parents=[common], help="pairwise W1 between two agent layouts")
    p.add_argument("--pre", required=True)
    p.add_argument("--post", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("bench", parents=[common], help="solver scaling benchmark")
    p.add_argument("--sizes", default="64,128,256,512")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("project-one", parents=[common], help="project one image (debugging)")
    p.add_argument("--image", required=True)
    p.add_argument("--target", required=True, help="aligned output directory or a reference image")
    p.add_argument("--out", required=True)
    p.add_argument("--luts", help="directory for per-channel lookup-table CSVs")
    p.set_defaults(func=cmd_project_one)
    return parser


def flag_overrides(args) -> Dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    measure = {}
    if get("measure") == "histogram":
        measure = {"kind": "histogram"}
    elif get("measure") == "subsample":
        measure = {"kind": "subsample"}
    if get("count") is not None:
        measure["count"] = get("count")
    return {
        "seed": get("seed"),
        "workers": get("workers"),
        "sinkhorn": {"epsilon": get("epsilon"), "log_domain": get("log_domain")},
        "barycenter": {"epsilon": get("bary_epsilon")},
        "measure": measure,
        "train": {
            "n_agents": get("n_agents"),
            "rounds": get("rounds"),
            "participants_per_round": get("participants"),
            "local_epochs": get("epochs"),
            "hidden": get("hidden"),
        },
        "paths": {
            "input": get("input"),
            "test_input": get("test_input"),
            "format": get("format"),
            "out": get("out") if get("command") in ("partition", "align") else None,
        },
    }


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config_mod.load(args.config, flag_overrides(args))
        return args.func(args, cfg)
    except (ConvergenceError, NumericalError, TrainingError) as err:
        print(f"fedalign: numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, ValueError) as err:
        print(f"fedalign: invalid input: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as err:
        print(f"fedalign: I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
