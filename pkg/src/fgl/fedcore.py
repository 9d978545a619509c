"""Training protocols: iterative FedAvg, one-shot FGL, and centralized SGD.

All three share :func:`train_epochs`, so a one-client full-participation
FedAvg run and a centralized run with the same seed walk through exactly the
same mini-batches and produce bit-identical parameters.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .datasets import ClientShard, LabeledDataset
from .metrics import EvalReport, evaluate
from .netsim import (DOWNLINK, UPLINK, CommLedger, MessageSizeModel, record_model_exchange,
                     record_prompt_upload)
from .prompts import (CLASS_LEVEL, ENTITY_LEVEL, aggregate_prompts, deserialize_prompts,
                      gen_class_prompts, gen_entity_prompts, serialize_prompts)
from .seeding import derive_int, derive_rng
from .synth import (DiffusionConfig, FoundationPrior, GanConfig, synth_diffusion, synth_direct,
                    synth_gan)


@dataclass(frozen=True)
class FLConfig:
    clients: int = 100
    participation: float = 0.1
    rounds: int = 250
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    server_epochs: int = 30
    eval_every: int = 1

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError("clients must be >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError(f"participation must lie in (0, 1], got {self.participation}")
        for name in ("rounds", "local_epochs", "batch_size", "server_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def per_round(self) -> int:
        return clients_per_round(self.clients, self.participation)


# the two hyperparameter blocks reported for the experiments
PRESETS = {
    "main": FLConfig(clients=100, participation=0.1, rounds=250, local_epochs=5, batch_size=32,
                     lr=0.001, momentum=0.9),
    "baseline": FLConfig(clients=5, participation=1.0, rounds=200, local_epochs=5, batch_size=32,
                         lr=0.01, momentum=0.9),
}
CENTRALIZED_ROUNDS = {"main": 250, "baseline": 120}


def preset(name: str, **overrides) -> FLConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


@dataclass
class GlobalModel:
    params: nx.ParamVector
    round: int = 0


@dataclass
class RoundReport:
    round: int
    selected: list[int]
    train: Optional[EvalReport] = None
    test: Optional[EvalReport] = None
    cumulative_bytes: int = 0
    steps: int = 0


def clients_per_round(m: int, participation: float) -> int:
    # round() guards against 0.7 * 10 = 7.000000000000001
    return max(1, math.ceil(round(participation * m, 9)))


def select_clients(m: int, participation: float, seed: int, round: int) -> list[int]:
    k = clients_per_round(m, participation)
    if k >= m:
        return list(range(m))
    rng = derive_rng(seed, "select", round)
    return sorted(int(i) for i in rng.choice(m, size=k, replace=False))


def train_epochs(net: nx.NetworkSpec, params: nx.ParamVector, data: LabeledDataset,
                 indices: np.ndarray, epochs: int, batch_size: int, lr: float, momentum: float,
                 rng: np.random.Generator) -> tuple[nx.ParamVector, int]:
    """Shuffled mini-batch SGD over ``data[indices]``; returns (params, step count)."""
    state = nx.OptimizerState.zeros(len(params), lr, momentum)
    params = params.copy()
    steps = 0
    n = indices.size
    for _ in range(epochs):
        order = indices[rng.permutation(n)]
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            _, grad = nx.loss_and_grad(net, params, data.features[batch], data.labels[batch])
            params = nx.sgd_step(params, grad, state)
            steps += 1
    return params, steps


def local_train(shard: ClientShard, data: LabeledDataset, net: nx.NetworkSpec,
                global_params: nx.ParamVector, epochs: int, batch_size: int, lr: float,
                momentum: float, seed: int, round: int = 0) -> tuple[nx.ParamVector, int]:
    """E local epochs on one client's shard, starting from a copy of the global model."""
    rng = derive_rng(seed, "local", round, shard.client_id)
    return train_epochs(net, global_params, data, shard.indices, epochs, batch_size, lr, momentum, rng)


def aggregate(locals_: Sequence[nx.ParamVector], weights: Sequence[float]) -> nx.ParamVector:
    """Weighted average with p_k = n_k / sum(n)."""
    if not locals_:
        raise ValueError("nothing to aggregate")
    if len(locals_) != len(weights):
        raise ValueError("one weight per local model required")
    size = len(locals_[0])
    if any(len(p) != size for p in locals_):
        raise ValueError("local models differ in length")
    w = np.asarray(weights, dtype=np.float64)
    if (w <= 0).any():
        raise ValueError("aggregation weights must be positive")
    p = w / w.sum()
    stacked = np.stack([lp.values for lp in locals_])
    return locals_[0].with_values(p @ stacked)


def _evaluate_into(report: RoundReport, net, params, train: LabeledDataset,
                   test: Optional[LabeledDataset], method: str, tag: str):
    report.train = evaluate(net, params, train, method=method, dataset=tag)
    if test is not None:
        report.test = evaluate(net, params, test, method=method, dataset=tag)


def run_fedavg(config: FLConfig, data: LabeledDataset, shards: Sequence[ClientShard],
               net: nx.NetworkSpec, test: Optional[LabeledDataset] = None,
               size_model: MessageSizeModel = MessageSizeModel(), dataset_tag: str = "data",
               init: Optional[nx.ParamVector] = None):
    """Returns (GlobalModel, [RoundReport], CommLedger)."""
    if len(shards) != config.clients:
        raise ValueError(f"{len(shards)} shards for {config.clients} configured clients")
    model = GlobalModel(init.copy() if init is not None else nx.init_params(net, config.seed))
    ledger = CommLedger()
    reports = []
    for t in range(config.rounds):
        selected = select_clients(config.clients, config.participation, config.seed, t)
        locals_, weights, steps = [], [], 0
        for k in selected:
            record_model_exchange(ledger, t, k, DOWNLINK, net.num_params, size_model)
            local, s = local_train(shards[k], data, net, model.params, config.local_epochs,
                                   config.batch_size, config.lr, config.momentum, config.seed, t)
            record_model_exchange(ledger, t, k, UPLINK, net.num_params, size_model)
            locals_.append(local)
            weights.append(shards[k].n)
            steps += s
        model = GlobalModel(aggregate(locals_, weights), t + 1)
        rep = RoundReport(t, selected, cumulative_bytes=ledger.total(), steps=steps)
        if (t + 1) % config.eval_every == 0 or t + 1 == config.rounds:
            _evaluate_into(rep, net, model.params, data, test, "fedavg", dataset_tag)
        reports.append(rep)
    return model, reports, ledger


def run_centralized(config: FLConfig, data: LabeledDataset, net: nx.NetworkSpec,
                    test: Optional[LabeledDataset] = None, dataset_tag: str = "data",
                    init: Optional[nx.ParamVector] = None):
    """Plain SGD on the pooled data, organized as ``rounds`` blocks of ``local_epochs``.

    The pooled data is treated as client 0, so its shuffling seeds coincide
    with a one-client FedAvg run.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = GlobalModel(init.copy() if init is not None else nx.init_params(net, config.seed))
    everything = ClientShard(0, np.arange(len(data)))
    reports = []
    for t in range(config.rounds):
        params, steps = local_train(everything, data, net, model.params, config.local_epochs,
                                    config.batch_size, config.lr, config.momentum, config.seed, t)
        model = GlobalModel(params, t + 1)
        rep = RoundReport(t, [0], steps=steps)
        if (t + 1) % config.eval_every == 0 or t + 1 == config.rounds:
            _evaluate_into(rep, net, params, data, test, "centralized", dataset_tag)
        reports.append(rep)
    return model, reports


@dataclass
class FGLResult:
    model: GlobalModel
    report: RoundReport
    ledger: CommLedger
    synthetic: LabeledDataset
    prompts: object
    timings: dict = field(default_factory=dict)


BACKENDS = ("direct", "diffusion", "gan")


def run_fgl(config: FLConfig, data: LabeledDataset, shards: Sequence[ClientShard],
            net: nx.NetworkSpec, prior: Optional[FoundationPrior], prompt_mode: str = CLASS_LEVEL,
            backend: str = "direct", n_synthetic: int = 10000, *,
            test: Optional[LabeledDataset] = None, clusters_per_class: int = 3,
            diffusion: DiffusionConfig = DiffusionConfig(), gan: Optional[GanConfig] = None,
            size_model: MessageSizeModel = MessageSizeModel(), broadcast_final: bool = True,
            dataset_tag: str = "data", init: Optional[nx.ParamVector] = None) -> FGLResult:
    """One-shot federated generative learning.

    Each client uploads one serialized prompt set (round 0); the server
    decodes and merges them, synthesizes ``n_synthetic`` samples and trains
    the global model on them for ``config.server_epochs``. With
    ``broadcast_final`` the trained model is then sent to every client
    (round 1), which is the only model traffic in the protocol.
    """
    if backend not in BACKENDS:
        raise ValueError(f"unknown synthesis backend {backend!r}; choose from {BACKENDS}")
    if prompt_mode not in (CLASS_LEVEL, ENTITY_LEVEL):
        raise ValueError(f"unknown prompt mode {prompt_mode!r}")
    if n_synthetic < config.batch_size:
        raise ValueError("n_synthetic must be at least the batch size")
    timings = {}
    ledger = CommLedger()

    tic = time.perf_counter()
    uploads = []
    for shard in shards:
        if prompt_mode == CLASS_LEVEL:
            ps = gen_class_prompts(shard, data)
        else:
            ps = gen_entity_prompts(shard, data, clusters_per_class, config.seed)
        payload = serialize_prompts(ps)
        record_prompt_upload(ledger, shard.client_id, len(payload))
        uploads.append(payload)
    timings["prompt_generation"] = time.perf_counter() - tic

    # server side: only the received bytes cross this line
    tic = time.perf_counter()
    prompts = aggregate_prompts([deserialize_prompts(b) for b in uploads])
    synth_seed = derive_int(config.seed, "synth")
    if backend == "direct":
        synthetic = synth_direct(prompts, prior, n_synthetic, synth_seed)
    elif backend == "diffusion":
        synthetic = synth_diffusion(prompts, prior, diffusion, n_synthetic, synth_seed)
    else:
        synthetic = synth_gan(prompts, prior, gan or GanConfig(seed=synth_seed), n_synthetic,
                              synth_seed)
    if synthetic.features.shape[1:] != net.input_shape:
        synthetic.features = synthetic.features.reshape((len(synthetic),) + net.input_shape)
    timings["synthesis"] = time.perf_counter() - tic

    tic = time.perf_counter()
    start = init.copy() if init is not None else nx.init_params(net, config.seed)
    params, steps = train_epochs(net, start, synthetic, np.arange(len(synthetic)),
                                 config.server_epochs, config.batch_size, config.lr,
                                 config.momentum, derive_rng(config.seed, "server"))
    timings["server_training"] = time.perf_counter() - tic

    if broadcast_final:
        for shard in shards:
            record_model_exchange(ledger, 1, shard.client_id, DOWNLINK, net.num_params, size_model)
    report = RoundReport(0, [s.client_id for s in shards], cumulative_bytes=ledger.total(),
                         steps=steps)
    _evaluate_into(report, net, params, data, test, "fgl", dataset_tag)
    return FGLResult(GlobalModel(params, 1), report, ledger, synthetic, prompts, timings)
