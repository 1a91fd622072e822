"""Command-line entry points: train, predict, evaluate, ablate, report.

Commands read an optional INI config file with [arch] and [train] sections
whose keys mirror ArchConfig / TrainConfig fields; command-line flags override
file values, and unknown sections or keys are rejected.  All tabular output is
CSV with fixed headers and contains no timestamps, so reruns with the same
seed are byte-identical.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import sys
from itertools import combinations
from pathlib import Path

import numpy as np

from .data import (
    combine_datasets,
    distribution_summary,
    parse_manifest,
    split_validation,
)
from .features import load_feature_stack, read_feature_header
from .model import ArchConfig, MULTI_HEAD, SINGLE_HEAD, forward, init_params
from .objectives import (
    EvalResult,
    correlation_matrix,
    correlation_matrix_csv,
    eval_results_csv,
    mse_metric,
    spearman,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    TrainData,
    load_checkpoint,
    load_features,
    predict_scores,
    save_checkpoint,
    train,
)


class ConfigError(ValueError):
    pass


_ARCH_FILE_KEYS = ("layer_count", "frame_count", "feature_dim", "model_dim",
                   "transformer_layers", "attention_heads")
_TRAIN_FILE_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


def _coerce(raw: str, like) -> object:
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def read_config_file(path: str | Path) -> tuple[dict, dict]:
    """Parse [arch]/[train] sections; unknown sections or keys are errors."""
    parser = configparser.ConfigParser()
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not read:
        raise ConfigError(f"config file not found: {path}")
    unknown_sections = [s for s in parser.sections() if s not in ("arch", "train")]
    if unknown_sections:
        raise ConfigError(f"{path}: unknown config section(s) {unknown_sections}")
    arch: dict = {}
    train_kwargs: dict = {}
    if parser.has_section("arch"):
        for key, raw in parser.items("arch"):
            if key not in _ARCH_FILE_KEYS:
                raise ConfigError(f"{path}: unknown [arch] key {key!r}")
            arch[key] = int(raw)
    if parser.has_section("train"):
        defaults = TrainConfig()
        for key, raw in parser.items("train"):
            if key not in _TRAIN_FILE_KEYS:
                raise ConfigError(f"{path}: unknown [train] key {key!r}")
            train_kwargs[key] = _coerce(raw, getattr(defaults, key))
    return arch, train_kwargs


def _build_configs(args, records) -> tuple[ArchConfig, TrainConfig]:
    """Merge config file and flags; stack dims come from the feature files."""
    arch_kwargs, train_kwargs = ({}, {})
    if args.config:
        arch_kwargs, train_kwargs = read_config_file(args.config)
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    if args.loss is not None:
        train_kwargs["loss"] = args.loss
    if getattr(args, "max_epochs", None) is not None:
        train_kwargs["max_epochs"] = args.max_epochs
    header = read_feature_header(records[0].feature_path)
    arch_kwargs.setdefault("layer_count", header.layer_count)
    arch_kwargs.setdefault("frame_count", header.frame_count)
    arch_kwargs.setdefault("feature_dim", header.feature_dim)
    heads = MULTI_HEAD if getattr(args, "heads", "single") == "multi" else SINGLE_HEAD
    arch = ArchConfig(head_names=heads, **arch_kwargs)
    cfg = TrainConfig(**train_kwargs)
    return arch, cfg


def _load_records(manifest_paths) -> list:
    records = []
    for path in manifest_paths:
        records.extend(parse_manifest(path))
    if not records:
        raise ValueError(f"no records in manifest(s): {', '.join(map(str, manifest_paths))}")
    return records


def _train_once(records, selection, arch, cfg, val_fraction, out_dir: Path):
    combined = combine_datasets(records, selection)
    train_recs, val_recs = split_validation(combined, val_fraction, cfg.seed)
    train_data = TrainData.load(train_recs, val_recs, cfg.np_dtype)
    params = init_params(arch, cfg.seed, cfg.np_dtype)
    ckpt, report = train(params, arch, train_data, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out_dir / "checkpoint.wsqc")
    (out_dir / "train_report.csv").write_text(report.to_csv())
    return ckpt, report, combined


def _testset_records(path) -> list:
    records = parse_manifest(path)
    test = [r for r in records if r.subset == "test"]
    return test if test else records


def _evaluate_checkpoint(ckpt: Checkpoint, testsets) -> list[tuple[str, EvalResult]]:
    params = ckpt.best_params
    dtype = ckpt.cfg.np_dtype
    rows = []
    for name, records in testsets:
        if not records:
            raise ValueError(f"testset {name!r} is empty")
        features = load_features(records, dtype)
        preds = predict_scores(params, ckpt.arch, records, features, ckpt.cfg.batch_size)
        truth = np.array([r.normalized()["MOS"] for r in records])
        r = spearman(preds["MOS"], truth)
        e = mse_metric(5.0 * preds["MOS"], 5.0 * truth)
        rows.append((name, EvalResult(r=r, e=e, n=len(records))))
    return rows


def cmd_train(args) -> int:
    records = _load_records(args.train_manifest)
    selection = (
        tuple(args.datasets.split(","))
        if args.datasets
        else tuple(sorted({r.dataset_tag for r in records}))
    )
    arch, cfg = _build_configs(args, records)
    out_dir = Path(args.out)
    ckpt, report, combined = _train_once(
        records, selection, arch, cfg, args.val_fraction, out_dir
    )
    print(f"trained on {combined.total} points from {'+'.join(selection)}")
    print(f"best epoch {ckpt.state.best_epoch}: val_loss {ckpt.state.best_val_loss!r}")
    print(f"wrote {out_dir / 'checkpoint.wsqc'} and {out_dir / 'train_report.csv'}")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.best_params
    heads = ckpt.arch.head_names
    header = ["id", *heads, *[f"{h}_mos" for h in heads]]
    lines = [",".join(header)]
    for path in args.features:
        stack = load_feature_stack(path, dtype=ckpt.cfg.np_dtype)
        pred = forward(stack, params, ckpt.arch)
        normalized = [pred.scores[h] for h in heads]
        # scores below the label floor clip to MOS 1.0 rather than denormalize
        mos = [5.0 * min(max(s, 0.2), 1.0) for s in normalized]
        cells = [Path(path).stem]
        cells += [repr(v) for v in normalized]
        cells += [repr(v) for v in mos]
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "predictions.csv").write_text(text)
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    testsets = [(Path(p).stem, _testset_records(p)) for p in args.test_manifest]
    rows = _evaluate_checkpoint(ckpt, testsets)
    text = eval_results_csv(rows)
    sys.stdout.write(text)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "evaluation.csv").write_text(text)
    return 0


def enumerate_selections(tags) -> list[tuple[str, ...]]:
    """All nonempty subsets of the dataset tags: 2^k - 1 selections."""
    tags = tuple(sorted(tags))
    if not tags:
        raise ValueError("need at least one dataset tag")
    out = []
    for size in range(1, len(tags) + 1):
        out.extend(combinations(tags, size))
    return out


def cmd_ablate(args) -> int:
    records = _load_records(args.train_manifest)
    tags = sorted({r.dataset_tag for r in records})
    selections = enumerate_selections(tags)
    arch, cfg = _build_configs(args, records)
    testsets = [(Path(p).stem, _testset_records(p)) for p in args.test_manifest]
    out_dir = Path(args.out)

    results = []
    for selection in selections:
        label = "+".join(selection)
        run_dir = out_dir / "runs" / label
        ckpt, _, combined = _train_once(
            records, selection, arch, cfg, args.val_fraction, run_dir
        )
        eval_rows = _evaluate_checkpoint(ckpt, testsets)
        results.append((label, combined.total, eval_rows))

    results.sort(key=lambda row: (row[1], row[0]))
    test_names = [name for name, _ in testsets]
    header = ["selection", "train_points"]
    for name in test_names:
        header += [f"r_{name}", f"e_{name}"]
    header += ["r_avg", "e_avg"]
    lines = [",".join(header)]
    for label, points, eval_rows in results:
        cells = [label, str(points)]
        for _, res in eval_rows:
            cells += [repr(res.r), repr(res.e)]
        cells += [
            repr(sum(res.r for _, res in eval_rows) / len(eval_rows)),
            repr(sum(res.e for _, res in eval_rows) / len(eval_rows)),
        ]
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.csv").write_text(text)
    return 0


def _read_score_table(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            raise ValueError(f"{path}: empty score table")
        columns: dict[str, list[float]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in reader.fieldnames:
                columns[name].append(float(row[name]))
    return {name: np.asarray(vals) for name, vals in columns.items()}


def _render_distribution_svg(summary, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = summary.rows
    fig, axes = plt.subplots(len(rows), 1, figsize=(6, 1.6 * len(rows)), sharex=True)
    if len(rows) == 1:
        axes = [axes]
    edges = np.linspace(0.2, 1.0, len(rows[0].histogram) + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    for ax, row in zip(axes, rows):
        ax.bar(centers, row.histogram, width=edges[1] - edges[0], color="#4878a8")
        for x, style in ((row.q_min, ":"), (row.q_mean, "-"), (row.q_max, ":")):
            ax.axvline(x, color="black", linestyle=style, linewidth=1)
        ax.set_ylabel(f"{row.tag}\n(n={row.count})", rotation=0, ha="right", va="center")
    axes[-1].set_xlabel("normalized MOS")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _render_matrix_svg(names, matrix, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(names), 1.0 + 0.8 * len(names)))
    im = ax.imshow(matrix, vmin=-1.0, vmax=1.0, cmap="RdBu_r")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_report(args) -> int:
    if not args.manifest and not args.scores:
        raise ValueError("report needs --manifest and/or --scores input")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        records = _load_records(args.manifest)
        summary = distribution_summary(records)
        (out_dir / "distribution.csv").write_text(summary.to_csv())
        print(f"wrote {out_dir / 'distribution.csv'}")
        if args.svg:
            _render_distribution_svg(summary, out_dir / "distribution.svg")
            print(f"wrote {out_dir / 'distribution.svg'}")
    if args.scores:
        columns = _read_score_table(args.scores)
        names, matrix = correlation_matrix(columns)
        (out_dir / "correlation_matrix.csv").write_text(
            correlation_matrix_csv(names, matrix)
        )
        print(f"wrote {out_dir / 'correlation_matrix.csv'}")
        if args.svg:
            _render_matrix_svg(names, matrix, out_dir / "correlation_matrix.svg")
            print(f"wrote {out_dir / 'correlation_matrix.svg'}")
    return 0


def _add_common_train_flags(sub):
    sub.add_argument("--config", help="INI file with [arch] and [train] sections")
    sub.add_argument("--seed", type=int, default=None, help="training seed override")
    sub.add_argument("--loss", choices=["mse", "bias_aware"], default=None)
    sub.add_argument("--heads", choices=["single", "multi"], default="single")
    sub.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    sub.add_argument("--val-fraction", type=float, default=0.10, dest="val_fraction")
    sub.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechqual", description="speech quality prediction toolkit"
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", help="train a predictor from manifests")
    p_train.add_argument("--train-manifest", action="append", required=True)
    p_train.add_argument("--datasets", help="comma-separated dataset tags (default: all)")
    _add_common_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_pred = subs.add_parser("predict", help="score WSQF feature files")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("features", nargs="+", help="WSQF files to score")
    p_pred.add_argument("--out", default=None, help="optional output directory")
    p_pred.set_defaults(func=cmd_predict)

    p_eval = subs.add_parser("evaluate", help="metrics per test manifest")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--test-manifest", action="append", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_evaluate)

    p_abl = subs.add_parser("ablate", help="train on every dataset combination")
    p_abl.add_argument("--train-manifest", action="append", required=True)
    p_abl.add_argument("--test-manifest", action="append", required=True)
    _add_common_train_flags(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    p_rep = subs.add_parser("report", help="distribution and correlation reports")
    p_rep.add_argument("--manifest", action="append", default=[])
    p_rep.add_argument("--scores", help="CSV of named score columns")
    p_rep.add_argument("--out", required=True)
    p_rep.add_argument("--svg", action="store_true")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
