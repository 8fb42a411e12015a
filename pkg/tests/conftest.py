import numpy as np
import pytest

from premix.aggregator import ArchConfig, init_params
from premix.bagio import FeatureBag, pad_batch

TINY = ArchConfig(d=6, hidden=8, layers=1, heads=2, attn_dim=5, projector=(7, 6, 5))


def random_bags(rng, lengths, d=6, labels=None):
    return [
        FeatureBag(f"s{i:03d}", rng.normal(size=(n, d)), None if labels is None else labels[i])
        for i, n in enumerate(lengths)
    ]


def perturbed_params(cfg=TINY, seed=0, scale=0.1):
    """float64 parameters with non-trivial biases and norm affines."""
    p = init_params(seed, cfg, np.float64)
    rng = np.random.default_rng(seed + 100)
    for k in p.tensors:
        p.tensors[k] = p.tensors[k] + rng.normal(0, scale, p.tensors[k].shape)
    return p


def central_difference(f, arrays, eps=1e-6):
    """Finite-difference gradient of scalar f() w.r.t. each array (mutated in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            hi = f()
            arr[idx] = orig - eps
            lo = f()
            arr[idx] = orig
            g[idx] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_params():
    return perturbed_params()


@pytest.fixture
def tiny_batch(rng):
    return pad_batch(random_bags(rng, [5, 3, 4, 2]))


# acceptance summary ------------------------------------------------------------

ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_criterion(name, passed, detail=""):
    ACCEPTANCE.append((name, bool(passed), detail))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
