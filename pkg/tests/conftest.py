import jax.numpy as jnp
import numpy as np
import pytest

from pfxpinn.network import NetworkParams


def make_net(layer_sizes, seed=0, activation="tanh", scale=1.0, slope=1.0, train_slopes=True, bias_std=0.3):
    """Random network built directly, so tests can use shapes the presets would reject."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        ws.append(jnp.asarray(rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b))))
        bs.append(jnp.asarray(rng.normal(0.0, bias_std, size=b)))
    slopes = tuple(jnp.asarray(float(slope)) for _ in range(len(layer_sizes) - 2))
    return NetworkParams(tuple(layer_sizes), tuple(ws), tuple(bs), slopes, float(scale), activation, train_slopes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary --------------------------------------------------------------

ACCEPTANCE: dict[str, list[tuple[str, bool, str]]] = {}


def record_acceptance(criterion: str, part: str, passed: bool, detail: str) -> None:
    """Store one measured part of an acceptance criterion and echo it."""
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(passed), detail))
    print(f"{criterion} {part}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        parts = ACCEPTANCE[crit]
        ok = all(p for _, p, _ in parts)
        detail = "; ".join(f"{name} {'ok' if p else 'FAIL'} ({d})" for name, p, d in parts)
        terminalreporter.write_line(f"{crit} {'PASS' if ok else 'FAIL'}: {detail}")
