import numpy as np
import pytest

from expertmatch import model, scenarios


@pytest.fixture
def asym05():
    return scenarios.asymmetric_scenario(0.5, lam=1.0)


@pytest.fixture
def asym05_skills(asym05):
    return asym05.skills


def random_simplex(rng, n: int) -> np.ndarray:
    """Uniform point on the n-simplex (Dirichlet(1))."""
    w = rng.dirichlet(np.ones(n))
    # keep strictly inside to avoid zero-psi edge cases unless a test wants them
    w = np.clip(w, 1e-12, None)
    return w / w.sum()


def random_skills(rng, m: int, n: int, lo: float = 0.05, hi: float = 0.95):
    p = rng.uniform(lo, hi, size=(m, n))
    return model.SkillMatrix(p=p, mu=np.ones(m), labels=())
