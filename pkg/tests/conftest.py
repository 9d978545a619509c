import hypothesis
import numpy as np
import pytest

from fgl import numerics as nx

hypothesis.settings.register_profile("ci", max_examples=25, deadline=None)
hypothesis.settings.load_profile("ci")


def random_net(rng: np.random.Generator) -> nx.NetworkSpec:
    """A small MLP or CNN with at most a few hundred parameters."""
    classes = int(rng.integers(2, 5))
    if rng.random() < 0.5:
        d = int(rng.integers(1, 6))
        hidden = [int(h) for h in rng.integers(2, 8, size=rng.integers(0, 3))]
        return nx.mlp(d, hidden, classes)
    h = int(rng.integers(4, 7))
    c = int(rng.integers(1, 3))
    c1 = int(rng.integers(1, 4))
    k = int(rng.integers(2, 4))
    s = int(rng.integers(1, 3))
    layers = [nx.Conv2D(c, c1, k, s), nx.ReLU()]
    ho = (h - k) // s + 1
    k2 = min(2, ho)
    layers += [nx.Conv2D(c1, 2, k2, 1), nx.ReLU(), nx.Flatten()]
    hh = ho - k2 + 1
    layers += [nx.Affine(hh * hh * 2, classes), nx.SoftmaxHead(classes)]
    return nx.NetworkSpec((h, h, c), tuple(layers))


def random_problem(seed: int, batch: int = 4):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    params = nx.init_params(net, seed)
    # nonzero biases so ReLU kinks are not all at the same place
    params = params.with_values(params.values + rng.normal(0, 0.1, len(params)))
    x = rng.normal(size=(batch,) + net.input_shape)
    y = rng.integers(0, net.num_classes, size=batch)
    return net, params, x, y


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def gmm_default():
    from fgl.datasets import default_gmm, gen_gmm
    spec = default_gmm()
    return spec, gen_gmm(spec, 6000, 0), gen_gmm(spec, 2000, 1)


def pytest_terminal_summary(terminalreporter):
    """Echo the one-line verdict each acceptance criterion records."""
    lines = []
    for key in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(key, []):
            for name, value in getattr(rep, "user_properties", ()):
                if name == "acceptance":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
