"""Command-line entry point: dataset generation, training, evaluation, sweeps.

Commands write their artifacts plus a manifest that snapshots the resolved
configuration and fingerprints the dataset; feeding a manifest back through
--config reproduces the run byte for byte. Exit codes: 0 success, 2 validation
error, 3 divergence or numerical failure, 4 I/O error.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    EmbeddingDataset,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    make_split,
    save_dataset,
)
from .errors import DivergenceError, NumericalError, ValidationError
from .metrics import evaluate
from .representation import LossWeights, forward, predict_probs
from .training import (
    TrainConfig,
    initialize_model,
    train,
    write_telemetry_csv,
    write_telemetry_json,
)
from .transport import SinkhornConfig, estep

CONFIG_DEFAULTS = {
    "epochs": 50,
    "batch_size": 512,
    "alpha": 0.7,
    "tau": 0.07,
    "eta": 0.05,
    "lambda1": 0.95,
    "lambda2": 0.99,
    "learning_rate": 0.002,
    "proto_learning_rate": 0.001,
    "momentum": 0.0,
    "head_width": None,
    "seed": 0,
    "ablation": "full",
    "sinkhorn_max_iterations": 300,
    "sinkhorn_tolerance": 1e-8,
}


def config_from_mapping(mapping: dict) -> TrainConfig:
    unknown = sorted(set(mapping) - set(CONFIG_DEFAULTS))
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")
    merged = {**CONFIG_DEFAULTS, **mapping}
    head_width = merged["head_width"]
    return TrainConfig(
        epochs=int(merged["epochs"]),
        batch_size=int(merged["batch_size"]),
        weights=LossWeights(alpha=float(merged["alpha"]), tau=float(merged["tau"])),
        sinkhorn=SinkhornConfig(
            eta=float(merged["eta"]),
            max_iterations=int(merged["sinkhorn_max_iterations"]),
            tolerance=float(merged["sinkhorn_tolerance"]),
        ),
        lambda1=float(merged["lambda1"]),
        lambda2=float(merged["lambda2"]),
        learning_rate=float(merged["learning_rate"]),
        proto_learning_rate=float(merged["proto_learning_rate"]),
        momentum=float(merged["momentum"]),
        head_width=None if head_width is None else int(head_width),
        seed=int(merged["seed"]),
        ablation=str(merged["ablation"]),
    )


def config_to_mapping(config: TrainConfig) -> dict:
    return {
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "alpha": config.weights.alpha,
        "tau": config.weights.tau,
        "eta": config.sinkhorn.eta,
        "lambda1": config.lambda1,
        "lambda2": config.lambda2,
        "learning_rate": config.learning_rate,
        "proto_learning_rate": config.proto_learning_rate,
        "momentum": config.momentum,
        "head_width": config.head_width,
        "seed": config.seed,
        "ablation": config.ablation,
        "sinkhorn_max_iterations": config.sinkhorn.max_iterations,
        "sinkhorn_tolerance": config.sinkhorn.tolerance,
    }


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to replay a run against the referenced dataset."""

    command: str
    config: dict
    dataset_path: str
    dataset_sha256: str
    seeds: List[int]
    tool_version: str
    outputs: Dict[str, str]

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "dataset": {"path": self.dataset_path, "sha256": self.dataset_sha256},
            "seeds": list(self.seeds),
            "tool": "otclust",
            "version": self.tool_version,
            "outputs": dict(self.outputs),
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def make_manifest(command, config, dataset_path, seeds, outputs) -> RunManifest:
    return RunManifest(
        command=command,
        config=config,
        dataset_path=str(dataset_path),
        dataset_sha256=_sha256(dataset_path),
        seeds=[int(s) for s in seeds],
        tool_version=__version__,
        outputs={k: str(v) for k, v in outputs.items()},
    )


def _resolve_output(path) -> Path:
    """Relative output paths land under OTCLUST_OUTPUT_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get("OTCLUST_OUTPUT_ROOT")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _dataset_format(path, explicit: Optional[str]) -> str:
    if explicit:
        return explicit
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix == ".jsonl":
        return "jsonl"
    raise ValidationError(
        f"cannot infer dataset format from {path!r}; pass --format csv|jsonl"
    )


def _load(path, explicit_format: Optional[str]) -> EmbeddingDataset:
    return load_dataset(str(path), _dataset_format(path, explicit_format))


def _read_config_file(path) -> dict:
    raw = Path(path).read_text()
    suffix = Path(path).suffix.lower()
    if suffix == ".toml":
        blob = tomllib.loads(raw)
    elif suffix == ".json":
        try:
            blob = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    else:
        raise ValidationError(f"config file must be .toml or .json, got {path!r}")
    if not isinstance(blob, dict):
        raise ValidationError(f"config file {path} must hold a table/object")
    # a manifest works as a config file: its snapshot lives under "config"
    if isinstance(blob.get("config"), dict):
        blob = blob["config"]
    return blob


_CONFIG_FLAGS = (
    ("seed", int, "RNG seed"),
    ("eta", float, "transport entropy regularizer"),
    ("tau", float, "softmax temperature"),
    ("alpha", float, "attraction/repulsion mixing weight"),
    ("lambda1", float, "class-prior EMA momentum"),
    ("lambda2", float, "prototype EMA momentum"),
    ("epochs", int, "training epochs"),
    ("batch_size", int, "minibatch size"),
    ("learning_rate", float, "head learning rate"),
    ("proto_learning_rate", float, "prototype learning rate"),
    ("momentum", float, "SGD momentum on the head"),
    ("head_width", int, "projection width (default: embedding dim)"),
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML/JSON config file or a run manifest")
    for name, kind, doc in _CONFIG_FLAGS:
        default = CONFIG_DEFAULTS[name]
        shown = "embedding dim" if name == "head_width" else default
        parser.add_argument(
            f"--{name.replace('_', '-')}", type=kind, default=None,
            help=f"{doc} (default: {shown})",
        )
    parser.add_argument(
        "--ablation", choices=("full", "no_ot", "no_intra", "no_inter"), default=None,
        help="training variant (default: full)",
    )


def _resolve_config(args) -> dict:
    """Merge defaults < config file < explicit flags into one flat mapping."""
    mapping = dict(CONFIG_DEFAULTS)
    if args.config:
        file_cfg = _read_config_file(args.config)
        unknown = sorted(set(file_cfg) - set(CONFIG_DEFAULTS))
        if unknown:
            raise ValidationError(f"unknown config keys in {args.config}: {unknown}")
        mapping.update(file_cfg)
    for name, _, _ in _CONFIG_FLAGS:
        value = getattr(args, name)
        if value is not None:
            mapping[name] = value
    if args.ablation is not None:
        mapping["ablation"] = args.ablation
    return mapping


def _evaluation_rows(dataset: EmbeddingDataset) -> np.ndarray:
    """Unlabeled rows are the test set; fully labeled data is scored whole."""
    unlabeled = np.flatnonzero(~dataset.labeled_mask)
    rows = unlabeled if unlabeled.size else np.arange(dataset.sample_count)
    if (dataset.labels[rows] < 0).any():
        raise ValidationError("evaluation rows are missing ground-truth labels")
    return rows


def _score_model(head, bank, dataset: EmbeddingDataset, tau: float):
    rows = _evaluation_rows(dataset)
    reps, _ = forward(head, dataset.embeddings[rows])
    probs = predict_probs(reps, bank, tau)
    return evaluate(probs, dataset.labels[rows], dataset.class_count_known)


def _check_compatible(checkpoint, dataset: EmbeddingDataset, source) -> None:
    head_dim = checkpoint.head.weight.shape[0]
    if head_dim != dataset.dim:
        raise ValidationError(
            f"checkpoint {source} expects embedding dim {head_dim}, "
            f"dataset has dim {dataset.dim}"
        )
    if checkpoint.bank.class_count != dataset.class_count:
        raise ValidationError(
            f"checkpoint {source} holds {checkpoint.bank.class_count} prototypes, "
            f"dataset has {dataset.class_count} classes"
        )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        class_count=args.classes,
        dim=args.dim,
        samples_per_class=args.per_class,
        cluster_spread=args.spread,
        center_scale=args.center_scale,
        seed=args.seed,
    )
    data = generate_synthetic(spec)
    split_seed = args.split_seed if args.split_seed is not None else args.seed
    if args.labeled_fraction < 1.0 or args.known_ratio < 1.0:
        data = make_split(data, SplitSpec(
            labeled_fraction=args.labeled_fraction,
            known_class_ratio=args.known_ratio,
            seed=split_seed,
        ))
    out = _resolve_output(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, str(out), args.format)
    config = {
        "classes": args.classes, "dim": args.dim, "per_class": args.per_class,
        "spread": args.spread, "center_scale": args.center_scale,
        "seed": args.seed, "labeled_fraction": args.labeled_fraction,
        "known_ratio": args.known_ratio, "split_seed": split_seed,
        "format": args.format,
    }
    manifest = make_manifest("gen-data", config, out, [args.seed], {"dataset": out})
    manifest.write(str(out) + ".manifest.json")
    return 0


def cmd_train(args) -> int:
    mapping = _resolve_config(args)
    config = config_from_mapping(mapping)
    data = _load(args.dataset, args.format)
    out_dir = _resolve_output(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    result = train(data, config)

    checkpoint_path = out_dir / "checkpoint.json"
    save_checkpoint(
        checkpoint_path, result.head, result.bank, result.prior,
        epoch=config.epochs, known_count=data.class_count_known,
    )
    csv_path = out_dir / "telemetry.csv"
    json_path = out_dir / "telemetry.json"
    write_telemetry_csv(result.telemetry, csv_path)
    write_telemetry_json(result.telemetry, json_path)
    manifest = make_manifest(
        "train", config_to_mapping(config), args.dataset, [config.seed],
        {"checkpoint": checkpoint_path, "telemetry_csv": csv_path,
         "telemetry_json": json_path},
    )
    manifest.write(out_dir / "manifest.json")
    return 0


def _mean_or_none(values):
    if any(v is None for v in values):
        return None
    return float(np.mean(values))


def cmd_eval(args) -> int:
    data = _load(args.dataset, args.format)
    rows = []
    for source in args.checkpoint:
        checkpoint = load_checkpoint(source)
        _check_compatible(checkpoint, data, source)
        report = _score_model(checkpoint.head, checkpoint.bank, data, tau=0.07)
        rows.append({"checkpoint": str(source), **report.to_dict()})
    blob = {
        "per_seed": rows,
        "mean": {
            "acc": _mean_or_none([r["acc"] for r in rows]),
            "nmi": _mean_or_none([r["nmi"] for r in rows]),
            "ari": _mean_or_none([r["ari"] for r in rows]),
            "acc_known": _mean_or_none([r["acc_known"] for r in rows]),
            "acc_novel": _mean_or_none([r["acc_novel"] for r in rows]),
        },
    }
    text = json.dumps(blob, indent=2, sort_keys=True)
    print(text)
    if args.output:
        out = _resolve_output(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    return 0


def cmd_sweep(args) -> int:
    data = _load(args.dataset, args.format)
    base_mapping = _resolve_config(args)
    ratios = [float(r) for r in args.ratios.split(",") if r]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not ratios or not seeds:
        raise ValidationError("sweep needs at least one ratio and one seed")

    lines = ["ratio,seed,acc,nmi,ari,acc_known,acc_novel"]
    for ratio in ratios:
        for seed in seeds:
            split = make_split(data, SplitSpec(
                labeled_fraction=args.labeled_fraction,
                known_class_ratio=ratio,
                seed=seed,
            ))
            config = config_from_mapping({**base_mapping, "seed": seed})
            result = train(split, config)
            report = _score_model(result.head, result.bank, split, config.weights.tau)
            cells = [repr(float(ratio)), str(seed), repr(report.acc),
                     repr(report.nmi), repr(report.ari)]
            cells.append("" if report.acc_known is None else repr(report.acc_known))
            cells.append("" if report.acc_novel is None else repr(report.acc_novel))
            lines.append(",".join(cells))

    out = _resolve_output(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    manifest = make_manifest(
        "sweep", {**base_mapping, "ratios": ratios, "labeled_fraction": args.labeled_fraction},
        args.dataset, seeds, {"sweep_csv": out},
    )
    manifest.write(str(out) + ".manifest.json")
    return 0


def cmd_pseudo_label(args) -> int:
    mapping = _resolve_config(args)
    config = config_from_mapping(mapping)
    data = _load(args.dataset, args.format)
    unlabeled = np.flatnonzero(~data.labeled_mask)
    if unlabeled.size == 0:
        raise ValidationError("dataset has no unlabeled rows to pseudo-label")

    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        _check_compatible(checkpoint, data, args.checkpoint)
        head, bank, prior = checkpoint.head, checkpoint.bank, checkpoint.prior
    else:
        head, bank, prior, _ = initialize_model(data, config)

    reps, _ = forward(head, data.embeddings[unlabeled])
    probs = predict_probs(reps, bank, config.weights.tau)
    plan, labels, prior = estep(probs, prior, config.sinkhorn)

    blob = {
        "indices": unlabeled.tolist(),
        "labels": labels.tolist(),
        "plan": plan.values.tolist(),
        "marginal_residual": plan.marginal_residual,
        "converged": plan.converged,
        "prior": prior.beta.tolist(),
    }
    out = _resolve_output(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(blob) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otclust",
        description="Semi-supervised category discovery over embedding vectors.",
    )
    parser.add_argument("--version", action="version", version=f"otclust {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--classes", type=int, default=10, help="mixture components (default: 10)")
    gen.add_argument("--dim", type=int, default=16, help="embedding dimension (default: 16)")
    gen.add_argument("--per-class", type=int, default=100, help="samples per class (default: 100)")
    gen.add_argument("--spread", type=float, default=1.0, help="cluster noise scale (default: 1.0)")
    gen.add_argument("--center-scale", type=float, default=5.0, help="center magnitude (default: 5.0)")
    gen.add_argument("--seed", type=int, default=0, help="generation seed (default: 0)")
    gen.add_argument("--labeled-fraction", type=float, default=1.0,
                     help="fraction of known-class rows kept labeled (default: 1.0)")
    gen.add_argument("--known-ratio", type=float, default=1.0,
                     help="fraction of classes marked known (default: 1.0)")
    gen.add_argument("--split-seed", type=int, default=None,
                     help="split seed (default: same as --seed)")
    gen.add_argument("--format", choices=("csv", "jsonl"), default="csv",
                     help="output format (default: csv)")
    gen.add_argument("--output", default="dataset.csv", help="output path (default: dataset.csv)")
    gen.set_defaults(func=cmd_gen_data)

    tr = commands.add_parser("train", help="run the EM training loop")
    tr.add_argument("dataset", help="dataset file (csv or jsonl)")
    tr.add_argument("--format", choices=("csv", "jsonl"), default=None,
                    help="dataset format (default: by extension)")
    tr.add_argument("--output-dir", default="run",
                    help="directory for checkpoint/telemetry/manifest (default: run)")
    _add_config_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = commands.add_parser("eval", help="score checkpoints against a dataset")
    ev.add_argument("dataset", help="dataset file with ground truth")
    ev.add_argument("--format", choices=("csv", "jsonl"), default=None,
                    help="dataset format (default: by extension)")
    ev.add_argument("--checkpoint", nargs="+", required=True,
                    help="one or more checkpoint files; multiple add a mean row")
    ev.add_argument("--output", default=None, help="also write the JSON report here")
    ev.set_defaults(func=cmd_eval)

    sw = commands.add_parser("sweep", help="train across known-class ratios and seeds")
    sw.add_argument("dataset", help="fully labeled source dataset to re-split")
    sw.add_argument("--format", choices=("csv", "jsonl"), default=None,
                    help="dataset format (default: by extension)")
    sw.add_argument("--ratios", default="0.25,0.5,0.75",
                    help="comma-separated known-class ratios (default: 0.25,0.5,0.75)")
    sw.add_argument("--seeds", default="0", help="comma-separated seeds (default: 0)")
    sw.add_argument("--labeled-fraction", type=float, default=0.1,
                    help="labeled fraction per split (default: 0.1)")
    sw.add_argument("--output", default="sweep.csv", help="long-format CSV path (default: sweep.csv)")
    _add_config_flags(sw)
    sw.set_defaults(func=cmd_sweep)

    pl = commands.add_parser("pseudo-label", help="run one E-step and dump the plan")
    pl.add_argument("dataset", help="dataset file (csv or jsonl)")
    pl.add_argument("--format", choices=("csv", "jsonl"), default=None,
                    help="dataset format (default: by extension)")
    pl.add_argument("--checkpoint", default=None,
                    help="model checkpoint (default: fresh seeded initialization)")
    pl.add_argument("--output", default="pseudo_labels.json",
                    help="output path (default: pseudo_labels.json)")
    _add_config_flags(pl)
    pl.set_defaults(func=cmd_pseudo_label)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
