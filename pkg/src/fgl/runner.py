"""Experiment pipelines behind the command line.

Each experiment writes its reports into one output directory plus a
``manifest.json`` holding the resolved config, the list of files written, the
wall clock per phase and the tool version. Wall-clock numbers live only in the
manifest, so every other artifact is byte-identical across reruns with the same
config and seed.

Seed fan-out from the master seed ``s``::

    train data    derive_int(s, "data", "train")
    test data     derive_int(s, "data", "test")
    partition     derive_int(s, "partition")
    landscape     derive_int(s, "landscape")
    training      s itself; fedcore splits it into init, per-round client
                  selection, per-client shuffling, synthesis and server keys
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import numerics as nx
from .config import ConfigError, ExperimentConfig
from .datasets import (LabeledDataset, PartitionSpec, default_gmm, gen_gmm, load_csv, load_idx,
                       partition)
from .fedcore import run_centralized, run_fedavg, run_fgl
from .metrics import ResultRow, emit_reports, loss_landscape
from .netsim import CommLedger, compare_protocols, dump_json, estimate_costs
from .seeding import derive_int
from .synth import FoundationPrior, export_synthetic

EXPERIMENTS = ("fgl", "fedavg", "centralized", "sweep", "landscape", "compare-comm")
DEFAULT_SWEEP = (2000, 5000, 10000)
SWEEP_TOLERANCE = 0.02


class RunFailed(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"{phase}: {cause}")
        self.phase = phase
        self.cause = cause


class _Clock:
    def __init__(self):
        self.timings: dict[str, float] = {}
        self.phase = "setup"

    @contextmanager
    def __call__(self, phase: str):
        self.phase = phase
        tic = time.perf_counter()
        try:
            yield
        finally:
            self.timings[phase] = self.timings.get(phase, 0.0) + time.perf_counter() - tic


# -- building blocks -------------------------------------------------------------

def load_data(cfg: ExperimentConfig):
    """Returns (train, test, prior); the prior is None for file-backed data."""
    ds = cfg.dataset
    if ds.kind == "gmm":
        spec = default_gmm(ds.classes, ds.radius, ds.variance)
        train = gen_gmm(spec, ds.n_train, derive_int(cfg.seed, "data", "train"))
        test = gen_gmm(spec, ds.n_test, derive_int(cfg.seed, "data", "test"))
        return train, test, FoundationPrior.from_gmm(spec)
    if ds.kind == "idx":
        train = load_idx(ds.train_images, ds.train_labels)
        test = load_idx(ds.test_images, ds.test_labels, train.num_classes)
    else:
        train = load_csv(ds.train_csv)
        test = load_csv(ds.test_csv, train.num_classes)
    return train, test, None


def build_net(cfg: ExperimentConfig, data: LabeledDataset) -> nx.NetworkSpec:
    shape = data.features.shape[1:]
    kind = cfg.net.kind
    if kind == "auto":
        kind = "cnn" if len(shape) == 3 else "mlp"
    if kind == "cnn":
        if len(shape) != 3:
            raise ConfigError(f"net.kind: cnn needs image features, data has shape {shape}")
        return nx.small_cnn(*shape, data.num_classes)
    if len(shape) != 1:
        raise ConfigError(f"net.kind: mlp needs flat features, data has shape {shape}")
    return nx.mlp(shape[0], list(cfg.net.hidden), data.num_classes)


def make_shards(cfg: ExperimentConfig, data: LabeledDataset):
    p = cfg.partition
    spec = PartitionSpec(p.mode, p.alpha, p.min_samples, derive_int(cfg.seed, "partition"))
    return partition(data, spec, cfg.fl.clients)


def _fgl(cfg, train, test, shards, net, prior, n_samples=None):
    if prior is None and cfg.prompts.mode == "class":
        raise ConfigError("prompts.mode: class-level prompts need a foundation prior, which only "
                          "gmm datasets provide; use entity prompts for file-backed data")
    return run_fgl(cfg.fl, train, shards, net, prior, cfg.prompts.mode, cfg.synth.backend,
                   n_samples or cfg.synth.n_samples, test=test,
                   clusters_per_class=cfg.prompts.clusters_per_class,
                   diffusion=cfg.synth.diffusion, gan=cfg.synth.gan,
                   size_model=cfg.message_size, dataset_tag=cfg.dataset.tag)


def _row(method, tag, report, **extra) -> ResultRow:
    return ResultRow(method, tag, report.train, report.test, dict(extra))


def _write(out: Path, name: str, text: str, written: list):
    path = out / name
    path.write_text(text)
    written.append(path)


# -- experiments -----------------------------------------------------------------

def _exp_fgl(cfg, out, clock, written, manifest):
    with clock("data"):
        train, test, prior = load_data(cfg)
        net = build_net(cfg, train)
        shards = make_shards(cfg, train)
    with clock("fgl"):
        res = _fgl(cfg, train, test, shards, net, prior)
    manifest["phases_detail"] = {"fgl": res.timings}
    with clock("report"):
        fmt = "idx" if res.synthetic.features.ndim == 4 and res.synthetic.features.shape[-1] == 1 \
            else "csv"
        written += export_synthetic(res.synthetic, out, "synthetic", fmt)
        written += emit_reports([_row("fgl", cfg.dataset.tag, res.report)], {},
                                {"fgl": res.ledger}, out)


def _rounds_csv(reports) -> str:
    lines = ["round,train_acc,test_acc,cumulative_bytes"]
    for r in reports:
        if r.train is None:
            continue
        test = f"{r.test.accuracy:.6g}" if r.test else ""
        lines.append(f"{r.round + 1},{r.train.accuracy:.6g},{test},{r.cumulative_bytes}")
    return "\n".join(lines) + "\n"


def _exp_fedavg(cfg, out, clock, written, manifest):
    with clock("data"):
        train, test, _ = load_data(cfg)
        net = build_net(cfg, train)
        shards = make_shards(cfg, train)
    with clock("fedavg"):
        _, reports, ledger = run_fedavg(cfg.fl, train, shards, net, test, cfg.message_size,
                                        cfg.dataset.tag)
    with clock("report"):
        written += emit_reports([_row("fedavg", cfg.dataset.tag, reports[-1])], {},
                                {"fedavg": ledger}, out)
        _write(out, "rounds_fedavg.csv", _rounds_csv(reports), written)


def _exp_centralized(cfg, out, clock, written, manifest):
    with clock("data"):
        train, test, _ = load_data(cfg)
        net = build_net(cfg, train)
    with clock("centralized"):
        fl = replace(cfg.fl, rounds=cfg.centralized_rounds)
        _, reports = run_centralized(fl, train, net, test, cfg.dataset.tag)
    with clock("report"):
        written += emit_reports([_row("centralized", cfg.dataset.tag, reports[-1])], {}, {}, out)
        _write(out, "rounds_centralized.csv", _rounds_csv(reports), written)


def sweep_trend(ns: Sequence[int], accs: Sequence[float], tolerance: float = SWEEP_TOLERANCE) -> dict:
    """Accuracy should not drop by more than ``tolerance`` as N_s grows."""
    order = np.argsort(ns, kind="stable")
    a = np.asarray(accs, dtype=float)[order]
    worst = float(np.max(a[:-1] - a[1:])) if a.size > 1 else 0.0
    return {"n_samples": [int(ns[i]) for i in order], "test_acc": a.tolist(),
            "tolerance": tolerance, "largest_drop": max(worst, 0.0),
            "nondecreasing_within_tolerance": bool(worst <= tolerance)}


def _exp_sweep(cfg, out, clock, written, manifest, ns=DEFAULT_SWEEP):
    if not ns or any(n < cfg.fl.batch_size for n in ns):
        raise ConfigError(f"--ns: every value must be at least the batch size {cfg.fl.batch_size}")
    with clock("data"):
        train, test, prior = load_data(cfg)
        net = build_net(cfg, train)
        shards = make_shards(cfg, train)
    rows, ledgers, accs = [], {}, []
    manifest["phases_detail"] = {}
    for n in ns:
        with clock(f"fgl-ns{n}"):
            res = _fgl(cfg, train, test, shards, net, prior, n)
        manifest["phases_detail"][f"fgl-ns{n}"] = res.timings
        rows.append(_row(f"fgl-ns{n}", cfg.dataset.tag, res.report, n_samples=n))
        ledgers[f"fgl-ns{n}"] = res.ledger
        accs.append(res.report.test.accuracy)
    with clock("report"):
        trend = sweep_trend(list(ns), accs)
        written += emit_reports(rows, {}, ledgers, out, {"trend": trend})
        lines = ["n_samples,train_acc,test_acc"]
        lines += [f"{r.extra['n_samples']},{r.train.accuracy:.6g},{r.test.accuracy:.6g}" for r in rows]
        _write(out, "sweep.csv", "\n".join(lines) + "\n", written)


def _exp_landscape(cfg, out, clock, written, manifest):
    with clock("data"):
        train, test, prior = load_data(cfg)
        net = build_net(cfg, train)
        shards = make_shards(cfg, train)
    with clock("fgl"):
        res = _fgl(cfg, train, test, shards, net, prior)
    with clock("fedavg"):
        model, reports, ledger = run_fedavg(cfg.fl, train, shards, net, test, cfg.message_size,
                                            cfg.dataset.tag)
    seed = derive_int(cfg.seed, "landscape")
    slices = {}
    with clock("landscape"):
        for name, params in (("fgl", res.model.params), ("fedavg", model.params)):
            slices[name] = loss_landscape(net, params, train, cfg.landscape.grid,
                                          cfg.landscape.radius, seed)
    with clock("report"):
        rows = [_row("fgl", cfg.dataset.tag, res.report),
                _row("fedavg", cfg.dataset.tag, reports[-1])]
        written += emit_reports(rows, slices, {"fgl": res.ledger, "fedavg": ledger}, out)


def _exp_compare_comm(cfg, out, clock, written, manifest):
    with clock("data"):
        train, test, prior = load_data(cfg)
        net = build_net(cfg, train)
        shards = make_shards(cfg, train)
    with clock("fgl"):
        res = _fgl(cfg, train, test, shards, net, prior)
    with clock("fedavg"):
        _, reports, ledger = run_fedavg(cfg.fl, train, shards, net, test, cfg.message_size,
                                        cfg.dataset.tag)
    fgl_compute = {k: v for k, v in res.timings.items()}
    fedavg_compute = {"fedavg": clock.timings["fedavg"]}
    manifest["costs"] = {"fgl": estimate_costs(res.ledger, cfg.cost, fgl_compute),
                         "fedavg": estimate_costs(ledger, cfg.cost, fedavg_compute)}
    with clock("report"):
        comm = compare_protocols(res.ledger, ledger)
        comm["modeled_transfer_seconds"] = {
            "fgl": estimate_costs(res.ledger, cfg.cost)["transfer_seconds"],
            "fedavg": estimate_costs(ledger, cfg.cost)["transfer_seconds"]}
        _write(out, "comm_report.json", dump_json(comm), written)
        rows = [_row("fgl", cfg.dataset.tag, res.report),
                _row("fedavg", cfg.dataset.tag, reports[-1])]
        written += emit_reports(rows, {}, {"fgl": res.ledger, "fedavg": ledger}, out)


_PIPELINES = {"fgl": _exp_fgl, "fedavg": _exp_fedavg, "centralized": _exp_centralized,
              "sweep": _exp_sweep, "landscape": _exp_landscape, "compare-comm": _exp_compare_comm}


def run_experiment(cfg: ExperimentConfig, experiment: str, out_dir, **options) -> dict:
    """Run one named pipeline; always leaves a manifest behind.

    Raises :class:`ConfigError` for validation problems found at run time and
    :class:`RunFailed` (carrying the phase) for anything else.
    """
    if experiment not in _PIPELINES:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RunFailed("setup", exc) from exc
    clock = _Clock()
    written: list[Path] = []
    manifest = {"experiment": experiment, "version": __version__, "config": cfg.to_dict(),
                "options": {k: list(v) if isinstance(v, tuple) else v for k, v in options.items()}}
    error: Optional[BaseException] = None
    try:
        _PIPELINES[experiment](cfg, out, clock, written, manifest, **options)
        manifest["status"] = "ok"
    except BaseException as exc:
        error = exc
        manifest["status"] = "failed"
        manifest["failure_phase"] = clock.phase
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    manifest["timings"] = clock.timings
    manifest["files"] = sorted(str(p.relative_to(out)) for p in written)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if isinstance(error, (ConfigError, KeyboardInterrupt)):
        raise error
    if error is not None:
        raise RunFailed(clock.phase, error) from error
    return manifest


# -- comparing finished runs ---------------------------------------------------------

def _load_run(path: Path) -> dict:
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        summary = json.loads((path / "summary.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: not a completed run directory ({exc})") from None
    if manifest.get("status") != "ok":
        raise ConfigError(f"{path}: run did not complete (status {manifest.get('status')!r})")
    return {"manifest": manifest, "summary": summary}


def _ratio(a, b):
    if a is None or b is None or b == 0:
        return 1.0 if a == b and a is not None else None
    return a / b


def compare_runs(run_dirs: Sequence) -> dict:
    """Side-by-side accuracy, bytes and modeled transfer time of finished runs.

    Every row is also expressed as a ratio to the first row.
    """
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    rows = []
    datasets = set()
    for d in run_dirs:
        run = _load_run(Path(d))
        netsim = run["manifest"]["config"]["cost"]
        for entry in run["summary"]["entries"]:
            method = entry["method"]
            datasets.add(entry["dataset"])
            totals = run["summary"]["ledgers"].get(method, {})
            nbytes = totals.get("total", 0)
            transfer = nbytes / 1_000_000 * netsim["seconds_per_mb"]
            rows.append({"run": str(d), "method": method, "dataset": entry["dataset"],
                         "train_acc": entry["train"]["accuracy"],
                         "test_acc": entry["test"]["accuracy"] if entry["test"] else None,
                         "total_bytes": nbytes, "modeled_transfer_seconds": transfer})
    if len(datasets) > 1:
        raise ConfigError(f"runs use incompatible datasets: {sorted(datasets)}")
    ref = rows[0]
    ratios = [{"run": r["run"], "method": r["method"],
               "test_acc_ratio": _ratio(r["test_acc"], ref["test_acc"]),
               "bytes_ratio": _ratio(r["total_bytes"], ref["total_bytes"]),
               "transfer_time_ratio": _ratio(r["modeled_transfer_seconds"],
                                             ref["modeled_transfer_seconds"])}
              for r in rows]
    report = {"dataset": datasets.pop(), "rows": rows, "ratios_to_first": ratios}
    by_method = {r["method"]: r for r in rows}
    if "fgl" in by_method and "fedavg" in by_method and by_method["fedavg"]["total_bytes"]:
        report["bytes_ratio_fgl_over_fedavg"] = (by_method["fgl"]["total_bytes"]
                                                 / by_method["fedavg"]["total_bytes"])
    return report
