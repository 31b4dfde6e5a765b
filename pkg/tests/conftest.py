import numpy as np
import pytest

from bidimix.model import Theta
from bidimix.simulate import CovariateSpec, SimSpec, generate

AGE = CovariateSpec("age", "time_linear", offset=0.0, slope=1.0)
SEX = CovariateSpec("sex", "bernoulli", prob=0.5)

# outcome of each acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict = {}


def true_theta() -> Theta:
    """Well-separated 2 x 2 design with a small first-occasion hazard."""
    return Theta(beta=[0.3, 0.5], zeta1=[0.0, 2.0], sigma_y=0.5, gamma=[1.5, 0.5],
                 zeta2=[-8.0, -5.5], Pi=[[0.4, 0.1], [0.15, 0.35]])


def make_spec(seed: int, n: int = 300, T: int = 5, theta: Theta | None = None) -> SimSpec:
    return SimSpec(theta or true_theta(), n, T, (AGE, SEX), (AGE, SEX), seed)


def random_theta(rng: np.random.Generator, p: int, q: int, K1: int, K2: int) -> Theta:
    Pi = rng.dirichlet(np.ones(K1 * K2)).reshape(K1, K2)
    Pi = np.maximum(Pi, 0.02)
    Pi /= Pi.sum()
    return Theta(beta=rng.normal(0, 0.5, p), zeta1=np.sort(rng.normal(0, 1, K1)),
                 sigma_y=float(rng.uniform(0.4, 1.2)), gamma=rng.normal(0, 0.3, q),
                 zeta2=np.sort(rng.normal(-1.5, 1, K2)), Pi=Pi)


def small_dataset(seed: int, n: int, T: int, K1: int = 2, K2: int = 2, p: int = 2, q: int = 1):
    """Random-parameter panel with normal covariates (no redraw trouble)."""
    rng = np.random.default_rng(seed)
    th = random_theta(rng, p, q, K1, K2)
    th = th.replace(zeta2=th.zeta2 - 1.0)
    xs = tuple(CovariateSpec(f"x{j + 1}", "normal", sd=1.0) for j in range(p))
    vs = tuple(CovariateSpec(f"v{j + 1}", "normal", sd=1.0) for j in range(q))
    return generate(SimSpec(th, n, T, xs, vs, seed)), th


@pytest.fixture(scope="session")
def sim_data():
    return generate(make_spec(11, n=300))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
