import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fgl import numerics as nx
from fgl.datasets import LabeledDataset, default_gmm, gen_gmm
from fgl.metrics import (EvalReport, ResultRow, emit_reports, evaluate, grid_coords, loss_landscape,
                         slice_losses)
from fgl.netsim import UPLINK, CommLedger, LedgerEntry


def test_uniform_predictor_tie_break():
    net = nx.mlp(2, [], 4)
    data = LabeledDataset(np.random.default_rng(0).normal(size=(40, 2)), np.arange(40) % 4, 4)
    rep = evaluate(net, nx.zeros_params(net), data)
    assert rep.accuracy == 0.25  # every tie resolves to class 0
    assert rep.loss == pytest.approx(math.log(4), abs=1e-12)
    assert rep.accuracy + rep.error_rate == 1.0


def test_separable_toy_perfect():
    net = nx.mlp(1, [], 2)
    params = nx.zeros_params(net).with_values(np.array([-1.0, 1.0, 0.0, 0.0]))
    data = LabeledDataset(np.array([[-2.0], [-1.0], [1.0], [3.0]]), [0, 0, 1, 1], 2)
    assert evaluate(net, params, data).accuracy == 1.0


@given(st.integers(0, 1000))
def test_evaluate_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    net = nx.mlp(2, [5], 10)
    params = nx.init_params(net, seed)
    data = gen_gmm(default_gmm(), 64, seed)
    perm = rng.permutation(64)
    a = evaluate(net, params, data)
    b = evaluate(net, params, data.subset(perm))
    assert a.accuracy == b.accuracy
    assert a.loss == pytest.approx(b.loss, rel=1e-12)


def test_evaluate_batches_consistent():
    net = nx.mlp(2, [5], 10)
    params = nx.init_params(net, 3)
    data = gen_gmm(default_gmm(), 100, 0)
    a, b = evaluate(net, params, data), evaluate(net, params, data, batch_size=7)
    assert a.accuracy == b.accuracy and a.loss == pytest.approx(b.loss, rel=1e-12)


def test_evaluate_empty():
    net = nx.mlp(2, [], 2)
    with pytest.raises(ValueError):
        evaluate(net, nx.zeros_params(net), LabeledDataset(np.zeros((0, 2)), [], 2))


def test_grid_is_sign_symmetric():
    g = grid_coords(11, 0.7)
    assert np.array_equal(g, -g[::-1]) and g[5] == 0.0 and g[-1] == 0.7
    with pytest.raises(ValueError):
        grid_coords(4, 1.0)
    with pytest.raises(ValueError):
        grid_coords(5, 0.0)


@pytest.fixture(scope="module")
def trained():
    net = nx.mlp(2, [16], 10)
    data = gen_gmm(default_gmm(), 400, 0)
    params = nx.init_params(net, 0)
    state = nx.OptimizerState.zeros(len(params), 0.1, 0.9)
    for _ in range(200):
        _, g = nx.loss_and_grad(net, params, data.features, data.labels)
        params = nx.sgd_step(params, g, state)
    return net, params, data


def test_center_equals_evaluated_loss(trained):
    net, params, data = trained
    s = loss_landscape(net, params, data, grid=5, radius=0.5, seed=1)
    assert s.center_loss == evaluate(net, params, data).loss
    assert s.losses.shape == (5, 5)


def test_landscape_same_seed(trained):
    net, params, data = trained
    a = loss_landscape(net, params, data, 3, 1.0, 4)
    b = loss_landscape(net, params, data, 3, 1.0, 4)
    assert np.array_equal(a.losses, b.losses) and np.array_equal(a.direction1, b.direction1)


def test_directions_orthogonal_and_filter_normalized(trained):
    net, params, data = trained
    s = loss_landscape(net, params, data, 3, 1.0, 2)
    cos = abs(s.direction1 @ s.direction2) / (np.linalg.norm(s.direction1) * np.linalg.norm(s.direction2))
    assert cos < 1e-9
    for off, n in net.layout:
        assert np.linalg.norm(s.direction1[off:off + n]) == pytest.approx(
            np.linalg.norm(params.values[off:off + n]), rel=1e-12)


def test_negated_direction_flips_grid(trained):
    net, params, data = trained
    s = loss_landscape(net, params, data, 5, 1.0, 3)
    flipped = slice_losses(net, params, data, -s.direction1, s.direction2, s.coords)
    assert np.array_equal(flipped, s.losses[::-1, :])


def test_converged_center_below_mean(trained):
    net, params, data = trained
    s = loss_landscape(net, params, data, 7, 1.0, 0)
    assert s.center_loss <= s.losses.mean()


def _row(acc=0.123456789):
    r = EvalReport("fgl", "gmm", acc, 0.5, 10)
    return ResultRow("fgl", "gmm", r, r)


def test_emit_empty_reports(tmp_path):
    written = emit_reports([], {}, {}, tmp_path)
    assert [p.name for p in written] == ["summary.json"]
    assert json.loads((tmp_path / "summary.json").read_text())["entries"] == []


def test_emit_schema_and_precision(tmp_path, trained):
    net, params, data = trained
    ledger = CommLedger([LedgerEntry(0, 0, UPLINK, "prompt", 161)])
    s = loss_landscape(net, params, data, 3, 1.0, 0)
    emit_reports([_row()], {"fgl": s}, {"fgl": ledger}, tmp_path)
    lines = (tmp_path / "table.csv").read_text().splitlines()
    assert lines == ["method,dataset,train_acc,test_acc", "fgl,gmm,0.123457,0.123457"]
    assert (tmp_path / "ledger_fgl.csv").read_text() == ledger.to_csv()
    grid = (tmp_path / "landscape_fgl.csv").read_text().splitlines()
    assert grid[0] == "a,b,loss" and len(grid) == 10
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["entries"][0]["train"]["accuracy"] == 0.123457
    assert summary["ledgers"]["fgl"]["total"] == 161


def test_emit_byte_identical(tmp_path):
    emit_reports([_row()], {}, {}, tmp_path / "a")
    emit_reports([_row()], {}, {}, tmp_path / "b")
    for name in ("table.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_emit_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_reports([_row()], {}, {}, blocker / "sub")
