"""``hypm`` command line: gen-data, inject-noise, train, evaluate, ablate."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

from hypm import metrics, noise
from hypm.config import (
    ConfigError,
    DataConfig,
    ExperimentConfig,
    config_hash,
    load_config,
    save_config,
    with_overrides,
)
from hypm.datasets import (
    DatasetError,
    DomainDataset,
    SplitSpec,
    generate_synthetic,
    load_ppm_tree,
    make_split,
    source_datasets,
    test_dataset,
    write_ppm_tree,
)
from hypm.model import ModelState, load_checkpoint, save_checkpoint
from hypm.trainer import TrainingError, run_training, write_training_log

log = logging.getLogger("hypm")

ABLATIONS = {
    "full": {},
    "no-hyb-meta": {"use_hyb_meta": False},
    "no-nca-prompt": {"use_nca_prompt": False},
    "erm": {"use_hyb_meta": False, "use_nca_prompt": False},
    "no-label-correction": {"use_label_correction": False},
    "no-cross-domain": {"cross_domain_meta_test": False},
}
COMPONENT_GRID = ("full", "no-hyb-meta", "no-nca-prompt")
N_EPOCH_GRID = (500, 1000, 1500, 2000, 2500)
ABLATION_COLUMNS = ("variant", "config_hash", "acc", "h_score_at_threshold", "h_score_best", "oscr")


class CliError(RuntimeError):
    pass


# ----------------------------------------------------------------------
# shared plumbing


def load_data(cfg: DataConfig) -> list[DomainDataset]:
    if cfg.source == "ppm":
        return load_ppm_tree(cfg.root)
    size = cfg.image_size
    return generate_synthetic(cfg.num_domains, cfg.num_classes, cfg.per_class, cfg.seed, shape=(size, size))


def resolve_split(datasets: Sequence[DomainDataset], cfg: ExperimentConfig) -> SplitSpec:
    test = cfg.split.test_domain or datasets[-1].name
    return make_split(datasets, test, cfg.split.num_unknown)


def training_sources(datasets, split: SplitSpec, cfg: ExperimentConfig) -> list[DomainDataset]:
    """Source-domain, known-class data carrying the training labels."""
    src = source_datasets(datasets, split)
    n = cfg.noise
    if n.labels:
        return noise.apply_labels(n.labels, src)
    if n.kind == "none" or n.ratio == 0:
        return src
    sim = None
    if n.kind == "asymmetric":
        names = [src[0].class_names[k] for k in split.known_classes]
        sim = noise.load_similarity(n.similarity, names) if n.similarity else None
    noisy, _ = noise.inject(src, noise.NoiseSpec(n.kind, n.ratio, n.seed, sim), split.known_classes)
    return noisy


def evaluate_state(state: ModelState, datasets, split: SplitSpec, threshold: float, out: Path) -> metrics.MetricsReport:
    records = metrics.score_test_set(state, test_dataset(datasets, split), split)
    report = metrics.evaluate(records, threshold)
    metrics.write_metrics(report, out / "metrics.json")
    metrics.export_confidences(records, out / "confidences.csv")
    metrics.write_oscr_curve(records, out / "oscr_curve.csv")
    return report


def run_experiment(cfg: ExperimentConfig, out: Path) -> metrics.MetricsReport:
    """Train, checkpoint and evaluate one configuration into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    datasets = load_data(cfg.data)
    split = resolve_split(datasets, cfg)
    sources = training_sources(datasets, split, cfg)
    ckpt_dir = out / "checkpoints" if cfg.train.checkpoint_every else None
    state, reports = run_training(sources, split, cfg.train, checkpoint_dir=ckpt_dir)
    write_training_log(reports, out / "training_log.csv")
    save_checkpoint(state, out / "model.ckpt")
    return evaluate_state(state, datasets, split, cfg.threshold, out)


# ----------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} is not empty; pass --force to overwrite")
    size = args.image_size
    data = generate_synthetic(args.domains, args.classes, args.per_class, args.seed, shape=(size, size))
    write_ppm_tree(data, out)
    print(f"wrote {sum(len(d) for d in data)} images to {out}")
    return 0


def cmd_inject_noise(args) -> int:
    datasets = load_ppm_tree(args.data)
    test = args.test_domain or datasets[-1].name
    split = make_split(datasets, test, args.num_unknown)
    src = source_datasets(datasets, split)
    sim = None
    if args.kind == "asymmetric":
        names = [src[0].class_names[k] for k in split.known_classes]
        sim = noise.load_similarity(args.similarity, names)
    noisy, ledger = noise.inject(src, noise.NoiseSpec(args.kind, args.ratio, args.seed, sim), split.known_classes)
    out = Path(args.out or args.data)
    out.mkdir(parents=True, exist_ok=True)
    noise.write_labels(out / "train_labels.csv", noisy)
    ledger.write_csv(out / "labels_noisy.csv")
    print(f"flipped {len(ledger)} of {sum(len(d) for d in src)} labels ({ledger.achieved_ratio:.4f})")
    return 0


def _experiment_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data, split, noise_o, train, sgd, ball, aug, top = {}, {}, {}, {}, {}, {}, {}, {}
    if args.data:
        data.update(source="ppm", root=str(args.data))
    if args.test_domain:
        split["test_domain"] = args.test_domain
    if args.num_unknown is not None:
        split["num_unknown"] = args.num_unknown
    if args.labels:
        noise_o["labels"] = str(args.labels)
    if args.noise_kind:
        noise_o["kind"] = args.noise_kind
    if args.noise_ratio is not None:
        noise_o["ratio"] = args.noise_ratio
    if args.seed is not None:
        train["seed"] = args.seed
        noise_o.setdefault("seed", args.seed)
    if args.ablation:
        train.update(ABLATIONS[args.ablation])
    if args.prototype_space:
        train["prototype_space"] = args.prototype_space
    if args.n_epoch is not None:
        train["n_epoch_refresh"] = args.n_epoch
    if args.inner_lr is not None:
        train["inner_lr"] = args.inner_lr
    if args.committed_inner_step:
        train["committed_inner_step"] = True
    if args.checkpoint_every is not None:
        train["checkpoint_every"] = args.checkpoint_every
    if args.steps is not None:
        sgd["max_steps"] = args.steps
        if args.decay_at is None:
            sgd["decay_at_step"] = max(0, int(args.steps * 0.8))
    if args.decay_at is not None:
        sgd["decay_at_step"] = args.decay_at
    if args.lr is not None:
        sgd["lr"] = args.lr
    if args.batch_size is not None:
        sgd["batch_size"] = args.batch_size
    if args.gamma is not None:
        ball["gamma"] = args.gamma
    if args.exp_map_variant:
        ball["exp_map_variant"] = args.exp_map_variant
    if args.aug_mode:
        aug["mode"] = args.aug_mode
    if args.crop_fraction is not None:
        aug["crop_fraction"] = args.crop_fraction
    if args.out:
        top["output_dir"] = str(args.out)
    return with_overrides(cfg, data=data, split=split, noise=noise_o, train=train, sgd=sgd, ball=ball, augment=aug, top=top)


def cmd_train(args) -> int:
    cfg = _experiment_from_args(args)
    if not cfg.output_dir:
        raise CliError("an output directory is required (--out or output_dir in the config)")
    report = run_experiment(cfg, Path(cfg.output_dir))
    print(report.to_json())
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint {ckpt} not found")
    cfg = _experiment_from_args(args)
    state = load_checkpoint(ckpt)
    datasets = load_data(cfg.data)
    split = resolve_split(datasets, cfg)
    out = Path(args.out or cfg.output_dir or ckpt.parent)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_state(state, datasets, split, cfg.threshold, out)
    print(report.to_json())
    return 0


def ablation_variants(base: ExperimentConfig, grid: str, values: Sequence[int] | None = None):
    if grid == "n-epoch":
        for n in values or N_EPOCH_GRID:
            yield f"n_epoch={n}", with_overrides(base, train={"n_epoch_refresh": int(n)})
    elif grid == "components":
        for name in COMPONENT_GRID:
            yield name, with_overrides(base, train=ABLATIONS[name])
    elif grid == "prototype-space":
        for space in ("hyperbolic", "euclidean"):
            yield space, with_overrides(base, train={"prototype_space": space})
    else:
        raise CliError(f"unknown grid {grid!r}")


def cmd_ablate(args) -> int:
    base = _experiment_from_args(args)
    out = Path(args.out or base.output_dir or "ablation")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, cfg in ablation_variants(base, args.grid, args.values):
        run_dir = out / name.replace("=", "_")
        cfg = with_overrides(cfg, top={"output_dir": str(run_dir)})
        report = run_experiment(cfg, run_dir)
        rows.append([name, config_hash(cfg), report.acc, report.h_score_at_threshold, report.h_score_best, report.oscr])
        print(f"{name}: oscr={report.oscr:.4f} acc={report.acc:.4f}", flush=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow(r[:2] + [repr(float(v)) for v in r[2:]])
    return 0


# ----------------------------------------------------------------------
# parser


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON; flags override it")
    p.add_argument("--data", help="PPM dataset root (default: synthetic data from the config)")
    p.add_argument("--labels", help="train_labels.csv written by inject-noise")
    p.add_argument("--out", help="output directory")
    p.add_argument("--test-domain")
    p.add_argument("--num-unknown", type=int)
    p.add_argument("--noise-kind", choices=("symmetric", "asymmetric", "none"))
    p.add_argument("--noise-ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=sorted(ABLATIONS))
    p.add_argument("--prototype-space", choices=("hyperbolic", "euclidean"))
    p.add_argument("--n-epoch", type=int, help="steps between prototype refreshes")
    p.add_argument("--steps", type=int)
    p.add_argument("--decay-at", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--inner-lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--exp-map-variant", choices=("paper", "standard"))
    p.add_argument("--aug-mode", choices=("synchronous", "asynchronous", "adversarial", "fixed_crop"))
    p.add_argument("--crop-fraction", type=float)
    p.add_argument("--committed-inner-step", action="store_true")
    p.add_argument("--checkpoint-every", type=int)


def _class_count(text: str) -> int:
    n = int(text)
    if not 4 <= n <= 12:
        raise argparse.ArgumentTypeError("--classes must lie in [4, 12]")
    return n


def _ratio(text: str) -> float:
    r = float(text)
    if not 0 <= r <= 1:
        raise argparse.ArgumentTypeError("--ratio must lie in [0, 1]")
    return r


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multi-domain PPM dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--classes", type=_class_count, default=7)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inject-noise", help="write noisy training labels and the flip ledger")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for train_labels.csv and the labels_noisy.csv ledger (default: --data)")
    p.add_argument("--test-domain")
    p.add_argument("--num-unknown", type=int, default=1)
    p.add_argument("--kind", choices=("symmetric", "asymmetric"), default="symmetric")
    p.add_argument("--ratio", type=_ratio, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--similarity", help="class-similarity CSV (asymmetric noise)")
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("train", help="train, checkpoint and evaluate one configuration")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the held-out domain")
    p.add_argument("--checkpoint", required=True)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run a grid of variants and tabulate metrics")
    p.add_argument("--grid", choices=("n-epoch", "components", "prototype-space"), default="n-epoch")
    p.add_argument("--values", type=int, nargs="+", help="N_epoch values for the n-epoch grid")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "inject-noise" and args.kind == "asymmetric" and not args.similarity:
        parser.error("--kind asymmetric requires --similarity")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, DatasetError, noise.NoiseError, TrainingError, metrics.MetricsError, OSError) as exc:
        print(f"hypm: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"hypm: invalid configuration: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
