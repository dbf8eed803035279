"""Command line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 data or file-format error, 5 training failure. Failures print one line to
stderr: ``error code=<n> kind=<kind> message="<text>"``.

The output root defaults to the config's ``output_dir``; the environment
variable ``TRAJSST_OUTPUT_ROOT`` overrides it and ``--out`` overrides both.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, DomainError, EmptyDatasetError, FormatError, TrainingError
from .geo import PORTO_BBOX, BoundingBox
from .ingest import (
    ParseStats,
    build_datasets,
    filter_bbox,
    generate_synthetic,
    parse_trip_csv,
    read_dataset,
    record_to_trajectory,
    sample_trajectories,
    write_dataset_dir,
    SyntheticConfig,
)
from .report import parse_metrics_csv, plot_rows_csv, render_table
from .train import (
    ExperimentConfig,
    ablation_csv,
    evaluate_mse,
    load_model,
    run_experiment,
    run_matrix,
    run_shift_ablation,
)

log = logging.getLogger("trajsst")

OUTPUT_ROOT_ENV = "TRAJSST_OUTPUT_ROOT"

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4, 5


@dataclass
class DataConfig:
    bbox: list = field(default_factory=lambda: [PORTO_BBOX.lon_min, PORTO_BBOX.lon_max,
                                                 PORTO_BBOX.lat_min, PORTO_BBOX.lat_max])
    resolution: int = 40
    sample_count: int = 100_000
    seed: int = 0

    def bounding_box(self) -> BoundingBox:
        if len(self.bbox) != 4:
            raise ConfigError("data.bbox must be [lon_min, lon_max, lat_min, lat_max]")
        try:
            return BoundingBox(*map(float, self.bbox))
        except DomainError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class CliConfig:
    """Whole-run configuration; every section and key is optional."""

    data: DataConfig = field(default_factory=DataConfig)
    synthetic: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    output_dir: str = "runs"

    def synthetic_config(self) -> SyntheticConfig:
        if "resolution" in self.synthetic:
            raise ConfigError("set the grid resolution in data.resolution, not synthetic.resolution")
        _check_keys("synthetic", self.synthetic, SyntheticConfig)
        try:
            return SyntheticConfig(resolution=self.data.resolution, **self.synthetic)
        except DomainError as exc:
            raise ConfigError(f"synthetic: {exc}") from None

    def experiment_config(self, **overrides) -> ExperimentConfig:
        _check_keys("experiment", self.experiment, ExperimentConfig)
        d = dict(self.experiment)
        d.update({k: v for k, v in overrides.items() if v is not None})
        if d.get("model") == "lstm" and overrides.get("encoder") is None:
            d["encoder"] = "n/a"
        try:
            return ExperimentConfig(**d)
        except TypeError as exc:
            raise ConfigError(f"experiment: {exc}") from None


def _check_keys(section: str, given: dict, cls) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{section} must be an object")
    unknown = set(given) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def load_config(path: str | None) -> CliConfig:
    if path is None:
        return CliConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _check_keys("config", raw, CliConfig)
    data = raw.get("data", {})
    _check_keys("data", data, DataConfig)
    try:
        data_cfg = DataConfig(**data)
        data_cfg.resolution = int(data_cfg.resolution)
        data_cfg.sample_count = int(data_cfg.sample_count)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data: {exc}") from None
    cfg = CliConfig(
        data=data_cfg,
        synthetic=raw.get("synthetic", {}),
        experiment=raw.get("experiment", {}),
        output_dir=raw.get("output_dir", "runs"),
    )
    cfg.data.bounding_box()
    cfg.synthetic_config()
    cfg.experiment_config()
    return cfg


def output_root(cfg: CliConfig, flag: str | None) -> Path:
    if flag:
        return Path(flag)
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir)


def _write_summary(out: Path, items: dict) -> None:
    (out / "summary.txt").write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def _split_counts(datasets) -> dict:
    split = datasets["sequence"]
    return {"train": len(split.train), "validation": len(split.validation), "test": len(split.test)}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.data.seed
    bbox = cfg.data.bounding_box()
    stats = ParseStats()
    with open(args.csv, newline="") as fh:
        records = list(parse_trip_csv(fh, stats))
    kept = filter_bbox(records, bbox)
    if not kept:
        raise EmptyDatasetError(f"{args.csv}: no trip has >= 2 points inside the bounding box")
    sampled = sample_trajectories(kept, cfg.data.sample_count, seed)
    datasets = build_datasets([record_to_trajectory(r) for r in sampled], bbox, cfg.data.resolution, seed)
    out = Path(args.out)
    write_dataset_dir(datasets, out)
    summary = {
        "rows": stats.rows,
        "malformed": stats.malformed,
        "malformed_rows": ",".join(map(str, stats.malformed_rows)),
        "parsed": len(records),
        "kept": len(kept),
        "dropped": len(records) - len(kept),
        "sampled": len(sampled),
        **_split_counts(datasets),
        "resolution": cfg.data.resolution,
        "seed": seed,
    }
    _write_summary(out, summary)
    print(" ".join(f"{k}={v}" for k, v in summary.items() if k != "malformed_rows"))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    syn = cfg.synthetic_config()
    if args.count is not None:
        syn.count = args.count
    if args.seed is not None:
        syn.seed = args.seed
    if syn.count == 0:
        raise EmptyDatasetError("synthetic count is 0; nothing to write")
    bbox = cfg.data.bounding_box()
    trajectories = generate_synthetic(syn, bbox)
    datasets = build_datasets(trajectories, bbox, cfg.data.resolution, syn.seed)
    out = Path(args.out)
    write_dataset_dir(datasets, out)
    summary = {"generated": len(trajectories), **_split_counts(datasets),
               "resolution": cfg.data.resolution, "seed": syn.seed}
    _write_summary(out, summary)
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def _experiment_from_args(args) -> tuple[CliConfig, ExperimentConfig]:
    cfg = load_config(args.config)
    exp = cfg.experiment_config(
        model=getattr(args, "model", None),
        encoder=getattr(args, "encoder", None),
        epochs=args.epochs,
        seed=args.seed,
        dataset=args.dataset,
    )
    return cfg, exp


def cmd_train(args) -> int:
    cfg, exp = _experiment_from_args(args)
    out = output_root(cfg, args.out) / "train" / f"{exp.model}_{exp.encoder.replace('/', '')}"
    report, _ = run_experiment(exp, out_dir=out)
    print(f"model={exp.model} encoder={exp.encoder} best_epoch={report.best_epoch} "
          f"test_mse={report.test_mse:.6g} wall_time_s={report.wall_time:.1f} out={out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    split = read_dataset(args.dataset)
    samples = getattr(split, args.section)
    mse = evaluate_mse(model, samples, split.resolution)
    print(f"section={args.section} samples={len(samples)} mse_pixel2={mse!r}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg, exp = _experiment_from_args(args)
    out = output_root(cfg, args.out) / "matrix"
    table = run_matrix(exp, exp.dataset, out)
    print(render_table(table), end="")
    print(f"metrics={out / 'metrics.csv'}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg, exp = _experiment_from_args(args)
    out = output_root(cfg, args.out) / "ablation"
    rows = run_shift_ablation(exp, exp.dataset, out)
    print(ablation_csv(rows), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    table = parse_metrics_csv(Path(args.matrix).read_text())
    text = render_table(table)
    out = Path(args.out) if args.out else Path(args.matrix).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    (out / "plot_data.csv").write_text(plot_rows_csv(table))
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajsst", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="Porto CSV -> encoded dataset files")
    s.add_argument("--csv", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="synthetic trajectories -> encoded dataset files")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (
        ("train", cmd_train, "train one model/encoder cell"),
        ("matrix", cmd_matrix, "train the full model x encoder matrix"),
        ("ablation", cmd_ablation, "SST vs shifted-window SST per encoder"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config")
        s.add_argument("--dataset", help="dataset directory (or file, for train)")
        s.add_argument("--out", help="output root")
        s.add_argument("--epochs", type=int)
        s.add_argument("--seed", type=int)
        if name == "train":
            s.add_argument("--model")
            s.add_argument("--encoder")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="pixel^2 MSE of a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--section", choices=("train", "validation", "test"), default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="render a metrics CSV")
    s.add_argument("--matrix", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ")
    print(f"error code={code} kind={kind} message={json.dumps(msg)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except (FormatError, DomainError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except TrainingError as exc:
        return _fail(EXIT_TRAIN, "training", exc)


if __name__ == "__main__":
    sys.exit(main())
