"""Server-side surrogate data synthesis from aggregated prompts.

Three backends share one contract (prompts in, labeled samples out):

* ``synth_direct``    -- ancestral sampling from the class-conditional mixture.
* ``synth_diffusion`` -- iterative reverse denoising from Gaussian noise using
  the analytic score of that mixture under a variance-preserving forward
  process. ``beta`` sets how much fresh noise each reverse step injects:
  0 gives the deterministic probability-flow sampler, 1 the fully stochastic
  ancestral one.
* ``synth_gan``       -- a small conditional generator trained adversarially
  against a discriminator on samples from that mixture.

The mixture for a class comes from the server's :class:`FoundationPrior` for
class-level prompts, or from the uploaded cluster statistics for entity-level
prompts. Nothing here ever sees a client shard.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import numerics as nx
from .datasets import ClassMixture, GmmSpec, LabeledDataset, largest_remainder, write_csv, write_idx
from .prompts import CLASS_LEVEL, PromptSet
from .seeding import derive_rng

_CHUNK = 512


@dataclass
class FoundationPrior:
    """Server-owned descriptor -> class-conditional distribution table."""

    mixtures: dict[str, ClassMixture]
    class_names: tuple[str, ...]

    @classmethod
    def from_gmm(cls, spec: GmmSpec) -> "FoundationPrior":
        return cls(dict(zip(spec.class_names, spec.classes)), tuple(spec.class_names))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, descriptor: str) -> ClassMixture:
        try:
            return self.mixtures[descriptor]
        except KeyError:
            raise KeyError(f"foundation prior has no entry for descriptor {descriptor!r}") from None


@dataclass
class SyntheticDataset(LabeledDataset):
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DiffusionConfig:
    beta: float = 0.95
    steps: int = 250
    # endpoints of the continuous-time linear noise rate; the discrete
    # per-step variances derived from it always lie in (0, 1)
    schedule: tuple[float, float] = (0.1, 20.0)

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        lo, hi = self.schedule
        if not (0 < lo <= hi):
            raise ValueError("schedule endpoints must satisfy 0 < start <= end")

    def alpha_bars(self) -> np.ndarray:
        """Cumulative signal fractions at t = 0..steps (1 at t = 0)."""
        lo, hi = self.schedule
        s = np.arange(self.steps + 1) / self.steps
        return np.exp(-(lo * s + 0.5 * (hi - lo) * s**2))

    def step_variances(self) -> np.ndarray:
        ab = self.alpha_bars()
        return 1.0 - ab[1:] / ab[:-1]


@dataclass(frozen=True)
class GanConfig:
    trade_off: float = 1.0
    noise_dim: int = 4
    gen_hidden: int = 32
    disc_hidden: int = 32
    iterations: int = 3000
    batch_size: int = 64
    gen_lr: float = 0.02
    disc_lr: float = 0.02
    momentum: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.trade_off < 0:
            raise ValueError("trade_off must be >= 0")


def class_mixtures(prompts: PromptSet, prior: Optional[FoundationPrior]) -> dict[int, ClassMixture]:
    out = {}
    for p in prompts.prompts:
        if prompts.mode == CLASS_LEVEL:
            if prior is None:
                raise ValueError("class-level prompts need a foundation prior")
            out[p.class_id] = prior.resolve(p.descriptor)
        else:
            counts = np.array([c.count for c in p.clusters], dtype=np.float64)
            out[p.class_id] = ClassMixture(
                counts / counts.sum(),
                np.stack([c.mean for c in p.clusters]),
                np.stack([c.var for c in p.clusters]),
            )
    return out


def allocate_labels(prompts: PromptSet, n_samples: int) -> dict[int, int]:
    """Per-class sample counts proportional to aggregated prompt counts."""
    counts = prompts.class_counts()
    classes = sorted(counts)
    alloc = largest_remainder(n_samples, np.array([counts[c] for c in classes], dtype=np.float64))
    return dict(zip(classes, (int(a) for a in alloc)))


def _num_classes(prompts: PromptSet, prior: Optional[FoundationPrior]):
    if prior is not None:
        return prior.num_classes, prior.class_names
    return max(p.class_id for p in prompts.prompts) + 1, ()


def _assemble(parts, n_classes, names, rng, provenance) -> SyntheticDataset:
    feats = np.concatenate([x for x, _ in parts])
    labels = np.concatenate([np.full(x.shape[0], c, dtype=np.int64) for x, c in parts])
    order = rng.permutation(labels.size)
    return SyntheticDataset(feats[order], labels[order], n_classes, names, provenance=provenance)


def _check_request(prompts: PromptSet, n_samples: int):
    if not prompts.prompts:
        raise ValueError("no prompts to synthesize from")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")


def synth_direct(prompts: PromptSet, prior: Optional[FoundationPrior], n_samples: int,
                 seed: int) -> SyntheticDataset:
    _check_request(prompts, n_samples)
    mix = class_mixtures(prompts, prior)
    alloc = allocate_labels(prompts, n_samples)
    parts = [(mix[c].sample(n, derive_rng(seed, "direct", c)), c) for c, n in alloc.items()]
    C, names = _num_classes(prompts, prior)
    return _assemble(parts, C, names, derive_rng(seed, "direct-order"),
                     {"backend": "direct", "seed": seed, "mode": prompts.mode})


def mixture_eps(x: np.ndarray, mix: ClassMixture, alpha_bar: float) -> np.ndarray:
    """Noise prediction implied by the exact score of the noised mixture.

    Under x_t = sqrt(ab) x_0 + sqrt(1 - ab) eps, component j becomes
    N(sqrt(ab) m_j, ab v_j + 1 - ab); eps_hat = -sqrt(1 - ab) * score(x_t).
    """
    mu = math.sqrt(alpha_bar) * mix.means                      # (J, d)
    var = alpha_bar * mix.variances + (1.0 - alpha_bar)        # (J, d)
    diff = x[:, None, :] - mu[None]                            # (n, J, d)
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    logp = logw - 0.5 * (np.log(var).sum(axis=1) + (diff**2 / var).sum(axis=2))
    logp -= logp.max(axis=1, keepdims=True)
    resp = np.exp(logp)
    resp /= resp.sum(axis=1, keepdims=True)
    score = -(resp[:, :, None] * diff / var).sum(axis=1)
    return -math.sqrt(1.0 - alpha_bar) * score


def denoise(mix: ClassMixture, n: int, config: DiffusionConfig, rng: np.random.Generator) -> np.ndarray:
    """Run the reverse process from pure noise to ``n`` samples of ``mix``."""
    if n == 0:
        return np.empty((0, mix.dim))
    ab = config.alpha_bars()
    x = rng.standard_normal((n, mix.dim))
    for t in range(config.steps, 0, -1):
        a_t, a_prev = ab[t], ab[t - 1]
        eps = np.concatenate([mixture_eps(x[i:i + _CHUNK], mix, a_t) for i in range(0, n, _CHUNK)])
        x0 = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
        sigma = config.beta * math.sqrt((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev))
        keep = math.sqrt(max(1.0 - a_prev - sigma**2, 0.0))
        x = math.sqrt(a_prev) * x0 + keep * eps
        if sigma > 0:
            x = x + sigma * rng.standard_normal(x.shape)
    return x


def synth_diffusion(prompts: PromptSet, prior: Optional[FoundationPrior], config: DiffusionConfig,
                    n_samples: int, seed: int) -> SyntheticDataset:
    _check_request(prompts, n_samples)
    mix = class_mixtures(prompts, prior)
    alloc = allocate_labels(prompts, n_samples)
    parts = [(denoise(mix[c], n, config, derive_rng(seed, "diffusion", c)), c)
             for c, n in alloc.items()]
    C, names = _num_classes(prompts, prior)
    return _assemble(parts, C, names, derive_rng(seed, "diffusion-order"),
                     {"backend": "diffusion", "seed": seed, "mode": prompts.mode,
                      "beta": config.beta, "steps": config.steps})


# -- adversarial backend ------------------------------------------------------

@dataclass
class GanModel:
    generator: nx.NetworkSpec
    gen_params: nx.ParamVector
    discriminator: nx.NetworkSpec
    disc_params: nx.ParamVector
    classes: list[int]
    noise_dim: int
    disc_loss: np.ndarray
    gen_loss: np.ndarray

    def _cond(self, class_ids: np.ndarray) -> np.ndarray:
        onehot = np.zeros((class_ids.size, len(self.classes)))
        onehot[np.arange(class_ids.size), np.searchsorted(self.classes, class_ids)] = 1.0
        return onehot

    def sample(self, class_ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((class_ids.size, self.noise_dim))
        return nx.logits(self.generator, self.gen_params, np.hstack([z, self._cond(class_ids)]))

    def disc_prob(self, x: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
        """D(x | c): probability that x is a real sample."""
        return nx.forward(self.discriminator, self.disc_params, np.hstack([x, self._cond(class_ids)]))[:, 1]


def train_gan(mixtures: Mapping[int, ClassMixture], class_weights: Mapping[int, float],
              config: GanConfig) -> GanModel:
    """Alternating SGD: D descends trade_off * l_disc, G descends l_gen.

    l_disc = -log D(x_real) - log(1 - D(G(z, c)))
    l_gen  = -log D(G(z, c))
    """
    classes = sorted(mixtures)
    dim = mixtures[classes[0]].dim
    C = len(classes)
    # the generator's head width is its output dimension; its logits are the samples
    gen = nx.mlp(config.noise_dim + C, [config.gen_hidden], dim)
    disc = nx.mlp(dim + C, [config.disc_hidden], 2)
    model = GanModel(gen, nx.init_params(gen, config.seed), disc,
                     nx.init_params(disc, config.seed + 1), classes, config.noise_dim,
                     np.empty(0), np.empty(0))
    rng = derive_rng(config.seed, "gan")
    p = np.array([class_weights[c] for c in classes], dtype=np.float64)
    p /= p.sum()
    g_opt = nx.OptimizerState.zeros(len(model.gen_params), config.gen_lr, config.momentum)
    d_opt = nx.OptimizerState.zeros(len(model.disc_params), config.disc_lr, config.momentum)
    B = config.batch_size
    ones, zeros = np.ones(B, dtype=np.int64), np.zeros(B, dtype=np.int64)
    d_hist = np.empty(config.iterations)
    g_hist = np.empty(config.iterations)
    # divergence is detected explicitly below, so numpy's overflow chatter is muted
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(config.iterations):
            cls_real = np.array(classes)[rng.choice(C, size=B, p=p)]
            x_real = np.empty((B, dim))
            for c in np.unique(cls_real):
                idx = np.flatnonzero(cls_real == c)
                x_real[idx] = mixtures[c].sample(idx.size, rng)
            cls_fake = np.array(classes)[rng.choice(C, size=B, p=p)]
            x_fake = model.sample(cls_fake, rng)

            l_real, g_real = nx.loss_and_grad(disc, model.disc_params,
                                              np.hstack([x_real, model._cond(cls_real)]), ones)
            l_fake, g_fake = nx.loss_and_grad(disc, model.disc_params,
                                              np.hstack([x_fake, model._cond(cls_fake)]), zeros)
            d_hist[it] = l_real + l_fake
            model.disc_params = nx.sgd_step(model.disc_params, config.trade_off * (g_real + g_fake), d_opt)

            cls_gen = np.array(classes)[rng.choice(C, size=B, p=p)]
            cond = model._cond(cls_gen)
            z = rng.standard_normal((B, config.noise_dim))
            x_gen, gen_pull = nx.logits_and_pullback(gen, model.gen_params, np.hstack([z, cond]))
            d_logits, disc_pull = nx.logits_and_pullback(disc, model.disc_params, np.hstack([x_gen, cond]))
            g_hist[it] = nx.cross_entropy(d_logits, ones)
            probs = np.exp(d_logits - d_logits.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            probs[:, 1] -= 1.0
            _, d_input = disc_pull(probs / B)
            g_grad, _ = gen_pull(d_input[:, :dim])
            model.gen_params = nx.sgd_step(model.gen_params, g_grad, g_opt)

            if not (math.isfinite(d_hist[it]) and math.isfinite(g_hist[it])
                    and np.isfinite(model.gen_params.values).all()):
                raise FloatingPointError(f"GAN training diverged at iteration {it}")
    model.disc_loss, model.gen_loss = d_hist, g_hist
    return model


def synth_gan(prompts: PromptSet, prior: Optional[FoundationPrior], config: GanConfig,
              n_samples: int, seed: int) -> SyntheticDataset:
    _check_request(prompts, n_samples)
    mix = class_mixtures(prompts, prior)
    counts = prompts.class_counts()
    model = train_gan(mix, counts, config)
    alloc = allocate_labels(prompts, n_samples)
    rng = derive_rng(seed, "gan-sample")
    parts = [(model.sample(np.full(n, c), rng), c) for c, n in alloc.items()]
    C, names = _num_classes(prompts, prior)
    tail = model.disc_loss[-min(100, model.disc_loss.size):]
    return _assemble(parts, C, names, derive_rng(seed, "gan-order"),
                     {"backend": "gan", "seed": seed, "mode": prompts.mode,
                      "trade_off": config.trade_off, "iterations": config.iterations,
                      "disc_loss_tail_mean": float(tail.mean())})


def export_synthetic(ds: SyntheticDataset, out_dir, stem: str = "synthetic", fmt: str = "csv"
                     ) -> list[Path]:
    """Write samples as CSV or IDX plus a ``<stem>.provenance.json`` sidecar.

    IDX needs single-channel image features; values are clipped to [0, 1] and
    quantized to bytes, which matches what ``load_idx`` reads back.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        paths = [out / f"{stem}.csv"]
        write_csv(paths[0], ds)
    elif fmt == "idx":
        f = ds.features
        if f.ndim != 4 or f.shape[-1] != 1:
            raise ValueError(f"IDX export needs (N, H, W, 1) features, got shape {f.shape}")
        if ds.num_classes > 256:
            raise ValueError("IDX labels are single bytes; at most 256 classes")
        pixels = np.rint(np.clip(f[..., 0], 0.0, 1.0) * 255).astype(np.uint8)
        paths = [out / f"{stem}-images.idx", out / f"{stem}-labels.idx"]
        write_idx(paths[0], paths[1], pixels, ds.labels)
    else:
        raise ValueError(f"unknown export format {fmt!r}; choose csv or idx")
    side = out / f"{stem}.provenance.json"
    meta = {"n": len(ds), "num_classes": ds.num_classes, "feature_shape": list(ds.features.shape[1:]),
            "class_counts": np.bincount(ds.labels, minlength=ds.num_classes).tolist(),
            "format": fmt, "files": [p.name for p in paths], **ds.provenance}
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths + [side]
