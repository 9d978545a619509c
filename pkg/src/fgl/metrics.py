"""Evaluation, loss-landscape slices and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import numerics as nx
from .datasets import LabeledDataset
from .seeding import derive_rng


@dataclass
class EvalReport:
    method: str
    dataset: str
    accuracy: float
    loss: float
    n: int

    @property
    def error_rate(self) -> float:
        return 1.0 - self.accuracy


def evaluate(net: nx.NetworkSpec, params: nx.ParamVector, data: LabeledDataset,
             method: str = "", dataset: str = "", batch_size: int = 4096) -> EvalReport:
    """Argmax accuracy (ties -> lowest class index) and mean cross-entropy."""
    n = len(data)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    total_loss = 0.0
    for start in range(0, n, batch_size):
        x = data.features[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        z = nx.logits(net, params, x)
        correct += int((np.argmax(z, axis=1) == y).sum())
        total_loss += nx.cross_entropy(z, y) * y.size
    return EvalReport(method, dataset, correct / n, total_loss / n, n)


@dataclass
class LossLandscapeSlice:
    direction1: np.ndarray
    direction2: np.ndarray
    coords: np.ndarray
    losses: np.ndarray
    radius: float
    center: nx.ParamVector = field(repr=False)

    @property
    def center_loss(self) -> float:
        g = self.coords.size // 2
        return float(self.losses[g, g])


def grid_coords(grid: int, radius: float) -> np.ndarray:
    """Odd-sized grid on [-r, r], exactly sign-symmetric around 0."""
    if grid < 1 or grid % 2 == 0:
        raise ValueError(f"grid size must be odd, got {grid}")
    if not radius > 0:
        raise ValueError("radius must be positive")
    half = grid // 2
    if half == 0:
        return np.zeros(1)
    return radius * np.arange(-half, half + 1) / half


def filter_normalized_direction(net: nx.NetworkSpec, params: nx.ParamVector,
                                rng: np.random.Generator) -> np.ndarray:
    """Gaussian direction rescaled per layer to the norm of that layer's weights."""
    d = rng.standard_normal(len(params))
    for off, n in net.layout:
        if n == 0:
            continue
        dn = np.linalg.norm(d[off:off + n])
        wn = np.linalg.norm(params.values[off:off + n])
        d[off:off + n] *= wn / dn if dn > 0 else 0.0
    return d


def slice_losses(net: nx.NetworkSpec, params: nx.ParamVector, data: LabeledDataset,
                 d1: np.ndarray, d2: np.ndarray, coords: np.ndarray) -> np.ndarray:
    out = np.empty((coords.size, coords.size))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            p = params.with_values(params.values + a * d1 + b * d2)
            out[i, j] = evaluate(net, p, data).loss
    return out


def loss_landscape(net: nx.NetworkSpec, params: nx.ParamVector, data: LabeledDataset,
                   grid: int = 11, radius: float = 1.0, seed: int = 0) -> LossLandscapeSlice:
    coords = grid_coords(grid, radius)
    rng = derive_rng(seed, "landscape")
    d1 = filter_normalized_direction(net, params, rng)
    d2 = filter_normalized_direction(net, params, rng)
    d2 = d2 - (d2 @ d1) / (d1 @ d1) * d1
    losses = slice_losses(net, params, data, d1, d2, coords)
    return LossLandscapeSlice(d1, d2, coords, losses, radius, params)


# -- report emission -----------------------------------------------------------

def _fmt(x) -> str:
    return f"{x:.6g}"


def _round_floats(obj):
    if isinstance(obj, float):
        return float(_fmt(obj))
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


@dataclass
class ResultRow:
    """One line of a results table: train and test accuracy for a method."""

    method: str
    dataset: str
    train: EvalReport
    test: Optional[EvalReport] = None
    extra: dict = field(default_factory=dict)


def emit_reports(rows: Sequence[ResultRow], slices: Mapping[str, LossLandscapeSlice],
                 ledgers: Mapping[str, object], out_dir, extra_summary: Optional[dict] = None
                 ) -> list[Path]:
    """Write table.csv, ledger_<name>.csv, landscape_<name>.csv and summary.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []

    def write(name: str, text: str):
        path = out / name
        try:
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)

    if rows:
        lines = ["method,dataset,train_acc,test_acc"]
        for r in rows:
            test = _fmt(r.test.accuracy) if r.test else ""
            lines.append(f"{r.method},{r.dataset},{_fmt(r.train.accuracy)},{test}")
        write("table.csv", "\n".join(lines) + "\n")
    for name in sorted(ledgers):
        write(f"ledger_{name}.csv", ledgers[name].to_csv())
    for name in sorted(slices):
        s = slices[name]
        lines = ["a,b,loss"]
        for i, a in enumerate(s.coords):
            for j, b in enumerate(s.coords):
                lines.append(f"{_fmt(a)},{_fmt(b)},{_fmt(s.losses[i, j])}")
        write(f"landscape_{name}.csv", "\n".join(lines) + "\n")

    summary = {
        "entries": [
            {"method": r.method, "dataset": r.dataset,
             "train": asdict(r.train), "test": asdict(r.test) if r.test else None,
             **r.extra}
            for r in rows
        ],
        "ledgers": {name: ledgers[name].totals() for name in sorted(ledgers)},
        "landscapes": {name: {"center_loss": s.center_loss, "mean_loss": float(s.losses.mean()),
                              "grid": int(s.coords.size), "radius": s.radius}
                       for name, s in sorted(slices.items())},
    }
    if extra_summary:
        summary.update(extra_summary)
    write("summary.json", json.dumps(_round_floats(summary), indent=2, sort_keys=True) + "\n")
    return written
