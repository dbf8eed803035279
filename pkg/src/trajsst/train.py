"""Training loop, pixel-unit evaluation and the encoder x model experiment matrix.

Models are trained on targets scaled by 1/M and predict in [0, 1]^2. Reported
test MSE is multiplied back by M^2, so it is in squared grid cells, averaged
over samples and both coordinates.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .baselines import (
    CnnBaseline,
    CnnConfig,
    LstmBaseline,
    LstmConfig,
    MlpBaseline,
    MlpConfig,
    lstm_prepare_input,
)
from .errors import ConfigError, DomainError, EmptyDatasetError, TrainingError
from .geo import ENCODERS
from .ingest import DatasetSplit, SampleSet, SEQUENCE_FILE_NAME, grid_file_name, read_dataset
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.functional import mse_loss
from .nn.module import Module
from .nn.optim import Adam
from .nn.tensor import Tensor, no_grad
from .sst import SimplifiedSwin, SstConfig

log = logging.getLogger(__name__)

MODELS = ("mlp", "cnn", "sst", "sst-shifted", "lstm")
GRID_MODELS = ("mlp", "cnn", "sst")
NO_ENCODER = "n/a"
EVAL_BATCH = 256


@dataclass
class ExperimentConfig:
    model: str = "sst"
    encoder: str = "quadratic"
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    patience: int | None = 5  # None disables early stopping
    dataset: str = "data"
    sst: dict = field(default_factory=dict)
    mlp: dict = field(default_factory=dict)
    cnn: dict = field(default_factory=dict)
    lstm: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.model == "lstm":
            if self.encoder not in (NO_ENCODER, None):
                raise ConfigError("the lstm model consumes sequences; encoder must be 'n/a'")
            self.encoder = NO_ENCODER
        elif self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}; expected one of {ENCODERS}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if self.patience is not None and self.patience < 0:
            raise ConfigError("patience must be >= 0")

    def with_(self, **changes) -> "ExperimentConfig":
        d = asdict(self)
        d.update(changes)
        return ExperimentConfig(**d)

    def dataset_path(self) -> Path:
        root = Path(self.dataset)
        if root.is_file():
            return root
        name = SEQUENCE_FILE_NAME if self.model == "lstm" else grid_file_name(self.encoder)
        return root / name


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def _make(cls, options: dict, **fixed):
    known = {f.name for f in fields(cls)}
    unknown = set(options) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} option(s): {sorted(unknown)}")
    merged = dict(options)
    merged.update(fixed)
    return cls(**merged)


def build_model(cfg: ExperimentConfig, resolution: int) -> Module:
    name = cfg.model
    if name in ("sst", "sst-shifted"):
        opts = dict(cfg.sst)
        if name == "sst-shifted":
            opts["use_shift"] = True
        return SimplifiedSwin(_make(SstConfig, opts, resolution=resolution, seed=cfg.seed))
    if name == "mlp":
        return MlpBaseline(_make(MlpConfig, cfg.mlp, resolution=resolution, seed=cfg.seed))
    if name == "cnn":
        return CnnBaseline(_make(CnnConfig, cfg.cnn, resolution=resolution, seed=cfg.seed))
    return LstmBaseline(_make(LstmConfig, cfg.lstm, resolution=resolution, seed=cfg.seed))


_MODEL_CLASSES = {
    "SimplifiedSwin": (SimplifiedSwin, SstConfig),
    "MlpBaseline": (MlpBaseline, MlpConfig),
    "CnnBaseline": (CnnBaseline, CnnConfig),
    "LstmBaseline": (LstmBaseline, LstmConfig),
}


def save_model(model: Module, path) -> None:
    """Write the TCKP checkpoint plus a JSON sidecar describing the architecture."""
    path = Path(path)
    save_checkpoint(model.state_dict(), path)
    meta = {"class": type(model).__name__, "config": model.cfg.to_dict()}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path) -> Module:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"model description not found: {sidecar}")
    meta = json.loads(sidecar.read_text())
    cls, cfg_cls = _MODEL_CLASSES[meta["class"]]
    model = cls(cfg_cls(**meta["config"]))
    model.load_state_dict(load_checkpoint(path))
    return model


def model_inputs(model: Module, samples: SampleSet, resolution: int) -> np.ndarray:
    if getattr(model, "input_kind", "grid") == "sequence":
        if samples.sequences is None:
            raise DomainError("sequence model needs a sequence dataset")
        if not len(samples):
            return np.zeros((0, 200, 3), dtype=np.float32)
        return np.stack([lstm_prepare_input(s, resolution) for s in samples.sequences])
    if samples.grids is None:
        raise DomainError("grid model needs a grid dataset")
    return samples.grids


def predict(model: Module, inputs: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
    model.eval()
    dtype = model.dtype
    outs = []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            outs.append(model(inputs[start : start + batch_size].astype(dtype, copy=False)).data)
    return np.concatenate(outs) if outs else np.zeros((0, 2), dtype=dtype)


def normalized_mse(model: Module, samples: SampleSet, resolution: int, inputs=None) -> float:
    if len(samples) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty sample set")
    x = model_inputs(model, samples, resolution) if inputs is None else inputs
    pred = predict(model, x)
    target = samples.targets.astype(pred.dtype) / resolution
    return float(mse_loss(Tensor(pred), target).data)


def evaluate_mse(model: Module, samples: SampleSet, resolution: int) -> float:
    """Test MSE in squared grid cells: M^2 times the normalized MSE."""
    return resolution * resolution * normalized_mse(model, samples, resolution)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    config: dict
    resolution: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    test_mse: float = math.nan
    wall_time: float = 0.0

    def to_text(self, include_timing: bool = True) -> str:
        lines = [
            f"model={self.config['model']}",
            f"encoder={self.config['encoder']}",
            f"resolution={self.resolution}",
            f"epochs_run={len(self.train_loss)}",
            f"best_epoch={self.best_epoch}",
            "loss_units=normalized (targets / M)",
            f"train_loss={','.join(repr(x) for x in self.train_loss)}",
            f"val_loss={','.join(repr(x) for x in self.val_loss)}",
            "test_mse_units=pixel^2, mean over samples and both coordinates",
            f"test_mse={self.test_mse!r}",
        ]
        if include_timing:
            lines.append(f"wall_time_s={self.wall_time:.3f}")
        for key in sorted(self.config):
            lines.append(f"config.{key}={json.dumps(self.config[key], sort_keys=True)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        config = {k[len("config."):]: json.loads(v) for k, v in kv.items() if k.startswith("config.")}

        def floats(s):
            return [float(x) for x in s.split(",") if x]

        return cls(
            config=config,
            resolution=int(kv["resolution"]),
            train_loss=floats(kv["train_loss"]),
            val_loss=floats(kv["val_loss"]),
            best_epoch=int(kv["best_epoch"]),
            test_mse=float(kv["test_mse"]),
            wall_time=float(kv.get("wall_time_s", "0")),
        )


def train_model(
    cfg: ExperimentConfig,
    split: DatasetSplit,
    model: Module | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> tuple[TrainReport, Module]:
    """Minibatch Adam on normalized MSE with early stopping on validation MSE.

    The best-validation weights are restored before the test evaluation. With
    an empty validation set the training loss drives early stopping.
    """
    if len(split.train) == 0:
        raise EmptyDatasetError("training set is empty")
    started = time.perf_counter()
    m = split.resolution
    model = model if model is not None else build_model(cfg, m)
    x_train = model_inputs(model, split.train, m).astype(model.dtype, copy=False)
    y_train = split.train.targets.astype(model.dtype) / m
    x_val = model_inputs(model, split.validation, m) if len(split.validation) else None

    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(config=asdict(cfg), resolution=m)
    best, best_state, stale = math.inf, model.state_dict(), 0
    n = len(x_train)
    for epoch in range(cfg.epochs):
        model.train()
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss = mse_loss(model(x_train[idx]), y_train[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
            loss.backward()
            opt.step()
            total += value * len(idx)
        train_loss = total / n
        if x_val is not None:
            val_loss = normalized_mse(model, split.validation, m, inputs=x_val)
        else:
            val_loss = train_loss
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        log.debug("epoch %d train=%.6g val=%.6g", epoch, train_loss, val_loss)
        if val_loss < best:
            best, best_state, stale = val_loss, model.state_dict(), 0
            report.best_epoch = epoch
        else:
            stale += 1
            if cfg.patience is not None and stale > cfg.patience:
                break
    model.load_state_dict(best_state)
    if len(split.test):
        report.test_mse = evaluate_mse(model, split.test, m)
    report.wall_time = time.perf_counter() - started
    return report, model


def run_experiment(cfg: ExperimentConfig, split: DatasetSplit | None = None,
                   out_dir=None) -> tuple[TrainReport, Module]:
    """Train one cell; optionally write ``model.tckp``, ``model.json`` and ``report.txt``.

    Wall time goes to a separate ``timing.txt`` so that every other file is
    byte-identical across reruns.
    """
    if split is None:
        split = read_dataset(cfg.dataset_path())
    report, model = train_model(cfg, split)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(model, out / "model.tckp")
        (out / "report.txt").write_text(report.to_text(include_timing=False))
        (out / "timing.txt").write_text(f"wall_time_s={report.wall_time:.3f}\n")
    return report, model


# ---------------------------------------------------------------------------
# experiment matrix
# ---------------------------------------------------------------------------


@dataclass
class MetricsTable:
    rows: list[tuple[str, str, float]] = field(default_factory=list)

    def get(self, model: str, encoder: str) -> float:
        for m, e, v in self.rows:
            if m == model and e == encoder:
                return v
        raise KeyError((model, encoder))

    def to_csv(self) -> str:
        lines = ["model,encoder,mse"]
        lines += [f"{m},{e},{v!r}" for m, e, v in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "MetricsTable":
        from .report import parse_metrics_csv

        return parse_metrics_csv(text)

    def to_text(self) -> str:
        from .report import render_table

        return render_table(self)


def _cell_dir(out_dir, model: str, encoder: str):
    if out_dir is None:
        return None
    return Path(out_dir) / f"{model}_{encoder.replace('/', '')}"


def _load_split(dataset_dir, name: str, cache: dict) -> DatasetSplit:
    if name not in cache:
        cache[name] = read_dataset(Path(dataset_dir) / name)
    return cache[name]


def run_matrix(base: ExperimentConfig, dataset_dir=None, out_dir=None,
               models: tuple[str, ...] = GRID_MODELS, include_lstm: bool = True) -> MetricsTable:
    """Train every grid model on every encoder plus one LSTM cell.

    All cells share ``base`` hyperparameters and seed.
    """
    dataset_dir = Path(dataset_dir if dataset_dir is not None else base.dataset)
    cache: dict[str, DatasetSplit] = {}
    table = MetricsTable()
    for model in models:
        for enc in ENCODERS:
            cfg = base.with_(model=model, encoder=enc, dataset=str(dataset_dir))
            split = _load_split(dataset_dir, grid_file_name(enc), cache)
            report, _ = run_experiment(cfg, split, _cell_dir(out_dir, model, enc))
            log.info("%s/%s test mse %.4f", model, enc, report.test_mse)
            table.rows.append((model, enc, report.test_mse))
    if include_lstm:
        cfg = base.with_(model="lstm", encoder=NO_ENCODER, dataset=str(dataset_dir))
        split = _load_split(dataset_dir, SEQUENCE_FILE_NAME, cache)
        report, _ = run_experiment(cfg, split, _cell_dir(out_dir, "lstm", NO_ENCODER))
        table.rows.append(("lstm", NO_ENCODER, report.test_mse))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "metrics.csv").write_text(table.to_csv())
        (Path(out_dir) / "metrics.txt").write_text(table.to_text())
    return table


@dataclass
class AblationRow:
    encoder: str
    sst_mse: float
    shifted_mse: float


def ablation_csv(rows: list[AblationRow]) -> str:
    lines = ["encoder,sst_mse,shifted_mse"]
    lines += [f"{r.encoder},{r.sst_mse!r},{r.shifted_mse!r}" for r in rows]
    return "\n".join(lines) + "\n"


def run_shift_ablation(base: ExperimentConfig, dataset_dir=None, out_dir=None,
                       encoders: tuple[str, ...] = ENCODERS) -> list[AblationRow]:
    """Train SST and its shifted-window twin with identical seeds per encoder."""
    dataset_dir = Path(dataset_dir if dataset_dir is not None else base.dataset)
    cache: dict[str, DatasetSplit] = {}
    rows = []
    for enc in encoders:
        split = _load_split(dataset_dir, grid_file_name(enc), cache)
        mses = []
        for model in ("sst", "sst-shifted"):
            cfg = base.with_(model=model, encoder=enc, dataset=str(dataset_dir))
            report, _ = run_experiment(cfg, split, _cell_dir(out_dir, model, enc))
            mses.append(report.test_mse)
        rows.append(AblationRow(enc, *mses))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.csv").write_text(ablation_csv(rows))
    return rows
