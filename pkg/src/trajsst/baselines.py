"""Comparison models: MLP and CNN on trajectory grids, LSTM on cell sequences."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError
from .geo import CellIndex
from .nn import functional as F
from .nn.module import Linear, Module, Parameter, kaiming_normal
from .nn.tensor import Tensor, dropout, relu, reshape, sigmoid

LSTM_STEPS = 200


@dataclass
class MlpConfig:
    resolution: int = 40
    hidden: int = 150
    layers: int = 4
    dropout: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class MlpBaseline(Module):
    input_kind = "grid"

    def __init__(self, cfg: MlpConfig | None = None):
        cfg = cfg or MlpConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self._drop_rng = np.random.default_rng([cfg.seed, 1])
        sizes = [cfg.resolution * cfg.resolution] + [cfg.hidden] * cfg.layers
        self.hidden = [Linear(a, b, rng, init="kaiming") for a, b in zip(sizes, sizes[1:])]
        self.head = Linear(sizes[-1], 2, rng)

    def forward(self, grids) -> Tensor:
        m = self.cfg.resolution
        if grids.ndim != 3 or grids.shape[1:] != (m, m):
            raise ShapeError(f"expected grids of shape [B, {m}, {m}], got {grids.shape}")
        x = grids if isinstance(grids, Tensor) else Tensor(grids)
        x = reshape(x, (x.shape[0], m * m))
        for layer in self.hidden:
            x = relu(layer(x))
        x = dropout(x, self.cfg.dropout, self._drop_rng, self.training)
        return sigmoid(self.head(x))


@dataclass
class CnnConfig:
    resolution: int = 40
    channels: int = 128
    kernel: int = 7
    stride: int = 2
    fc_width: int = 128
    seed: int = 0

    @property
    def conv_side(self) -> int:
        pad = self.kernel // 2
        return (self.resolution + 2 * pad - self.kernel) // self.stride + 1

    def to_dict(self) -> dict:
        return asdict(self)


class CnnBaseline(Module):
    """conv 7x7 (stride 2, same padding) -> ReLU -> FC -> ReLU -> FC -> sigmoid."""

    input_kind = "grid"

    def __init__(self, cfg: CnnConfig | None = None):
        cfg = cfg or CnnConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        k, c = cfg.kernel, cfg.channels
        self.conv_weight = Parameter(kaiming_normal(rng, (c, 1, k, k), k * k).astype(np.float32))
        self.conv_bias = Parameter(np.zeros(c, dtype=np.float32))
        flat = c * cfg.conv_side**2
        self.fc1 = Linear(flat, cfg.fc_width, rng, init="kaiming")
        self.fc2 = Linear(cfg.fc_width, 2, rng)

    def forward(self, grids) -> Tensor:
        m = self.cfg.resolution
        if grids.ndim != 3 or grids.shape[1:] != (m, m):
            raise ShapeError(f"expected grids of shape [B, {m}, {m}], got {grids.shape}")
        x = grids if isinstance(grids, Tensor) else Tensor(grids)
        x = reshape(x, (x.shape[0], 1, m, m))
        x = relu(F.conv2d(x, self.conv_weight, self.conv_bias, self.cfg.stride, self.cfg.kernel // 2))
        x = reshape(x, (x.shape[0], -1))
        x = relu(self.fc1(x))
        return sigmoid(self.fc2(x))


def lstm_prepare_input(cells: Sequence[CellIndex] | np.ndarray, resolution: int,
                       steps: int = LSTM_STEPS) -> np.ndarray:
    """Right-align the last ``steps`` cells as rows (m/M, n/M, 1); zero-pad the front."""
    if isinstance(cells, np.ndarray):
        arr = cells.astype(np.float64)
    else:
        arr = np.asarray([(c.m, c.n) if isinstance(c, CellIndex) else c for c in cells], dtype=np.float64)
    if arr.size == 0:
        raise DomainError("cannot build an LSTM input from an empty cell list")
    arr = arr.reshape(-1, 2)[-steps:]
    out = np.zeros((steps, 3), dtype=np.float32)
    out[steps - len(arr):, :2] = arr / resolution
    out[steps - len(arr):, 2] = 1.0
    return out


@dataclass
class LstmConfig:
    resolution: int = 40
    hidden: int = 4
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class LstmBaseline(Module):
    input_kind = "sequence"

    def __init__(self, cfg: LstmConfig | None = None):
        cfg = cfg or LstmConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden
        bound = 1 / np.sqrt(h)
        self.w_x = Parameter(rng.uniform(-bound, bound, (3, 4 * h)).astype(np.float32))
        self.w_h = Parameter(rng.uniform(-bound, bound, (h, 4 * h)).astype(np.float32))
        self.bias = Parameter(np.zeros(4 * h, dtype=np.float32))
        self.head = Linear(h, 2, rng)

    def forward(self, seqs) -> Tensor:
        """[B, T, 3] prepared sequences -> [B, 2]."""
        x = seqs if isinstance(seqs, Tensor) else Tensor(seqs)
        if x.ndim != 3 or x.shape[-1] != 3:
            raise ShapeError(f"expected sequences of shape [B, T, 3], got {x.shape}")
        h = F.lstm(x, self.w_x, self.w_h, self.bias)
        return sigmoid(self.head(h))
