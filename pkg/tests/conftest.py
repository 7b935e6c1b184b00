import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vbpomdp.gm import GaussianMixture, MixtureKind  # noqa: E402


def random_spd(rng, n, low=0.3, high=2.0):
    A = rng.normal(size=(n, n))
    Q, _ = np.linalg.qr(A)
    return Q @ np.diag(rng.uniform(low, high, n)) @ Q.T


def random_gm(rng, n, m, kind=MixtureKind.REWARD, spread=2.0, signed=False):
    w = rng.uniform(0.2, 1.0, m)
    if signed:
        w *= rng.choice([-1.0, 1.0], m)
    if kind == MixtureKind.BELIEF:
        w = w / w.sum()
    means = rng.normal(0.0, spread, (m, n))
    covs = np.array([random_spd(rng, n) for _ in range(m)])
    return GaussianMixture(w, means, covs, kind)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def line_model(observation, displacement=0.0, noise=1e-4, discount=0.95, reward=None, transition=None):
    """One-action model over the first axis of ``observation``'s state space."""
    from vbpomdp.model import Action, CPOMDPModel

    n = observation.dimension if hasattr(observation, "dimension") else next(iter(observation.values())).dimension
    d = np.zeros(n)
    d[0] = displacement
    if reward is None:
        reward = GaussianMixture([1.0], [np.zeros(n)], [np.eye(n)], MixtureKind.REWARD)
    return CPOMDPModel([Action("go", d, noise * np.eye(n))], {"go": reward}, observation,
                       transition=transition, discount=discount)


# acceptance report: criterion number -> list of (passed, detail)
ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(criterion, []).append((bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[criterion]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{d} [{'ok' if ok else 'miss'}]" for ok, d in parts)
        terminalreporter.write_line(f"criterion {criterion:2d}: {verdict}  {detail}")
