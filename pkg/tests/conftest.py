"""Shared test helpers: a central finite-difference oracle and error metrics.

The FD oracle is deliberately independent of the tape: it re-evaluates a
plain callable on perturbed numpy inputs.  Functions containing a
stop-gradient must be probed against a callable in which the stopped
quantity is frozen at its base-point value (that is the function the
stop-gradient semantics define).
"""

import numpy as np
import pytest


def fd_gradient(f, args, wrt, h=1e-5):
    """Central finite differences of scalar f(*args) w.r.t. args[wrt]."""
    args = [np.array(a, dtype=np.float64) for a in args]
    x = args[wrt]
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for j in range(flat_x.size):
        orig = flat_x[j]
        flat_x[j] = orig + h
        fp = float(f(*args))
        flat_x[j] = orig - h
        fm = float(f(*args))
        flat_x[j] = orig
        flat_g[j] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(a, b):
    """Symmetric relative error between two gradient arrays.

    The denominator floor sits well above the FD noise floor (~1e-10 per
    coordinate): gradient content below it is not resolvable by central
    differences at step 1e-5 and counts as agreement.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-3)
    return np.linalg.norm((a - b).ravel()) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
