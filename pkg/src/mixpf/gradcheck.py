"""Finite-difference verification suites for the tape.

Central differences re-evaluate plain callables on perturbed inputs, so
they are independent of the backward pass they certify.  Three suites:
every primitive, randomized composite graphs, and the end-to-end filter
objective gradient under common random numbers.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import filtering as pf
from . import networks as nets
from . import ssm as ssm_mod


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
    """Symmetric relative error with a floor masking FD noise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-3)
    return float(np.linalg.norm((a - b).ravel()) / denom)


def max_rel_err(build, arrays, h=1e-5):
    """Worst leaf-wise disagreement between the tape and central differences."""
    worst = 0.0
    for i in range(len(arrays)):
        tape = ad.Tape()
        leaves = [tape.var(a) for a in arrays]
        g_ad = ad.backward(build(tape, leaves)).wrt(leaves[i])

        def f(*args):
            t2 = ad.Tape()
            ls = [t2.var(a) for a in args]
            return build(t2, ls).value

        worst = max(worst, rel_err(g_ad, fd_gradient(f, arrays, wrt=i, h=h)))
    return worst


# ---------------------------------------------------------------------------
# suite 1: primitives

def primitive_cases(seed=7):
    r = np.random.default_rng(seed)
    x = r.uniform(0.5, 2.0, 5)
    y = r.uniform(0.5, 2.0, 5)
    X = r.standard_normal((4, 3))
    b2 = r.uniform(0.5, 2.0, 2)
    A = r.standard_normal((2, 3))
    M = r.standard_normal((4, 3))
    v3 = r.standard_normal(3)
    w5 = r.standard_normal(5)
    idx = np.array([0, 2, 2, 4, 4])
    rows = np.array([1, 1, 3, 0])
    cols = np.array([2, 0, 0, 1])
    return {
        "add": (lambda t, v: ad.vsum(v[0] + v[1]), [x, y]),
        "subtract": (lambda t, v: ad.vsum(ad.square(v[0] - v[1])), [x, y]),
        "multiply": (lambda t, v: ad.vsum(v[0] * v[1]), [x, y]),
        "divide": (lambda t, v: ad.vsum(v[0] / v[1]), [x, y]),
        "negate": (lambda t, v: ad.vsum(ad.square(-v[0])), [x]),
        "exp": (lambda t, v: ad.vsum(ad.exp(v[0] * 0.5)), [x]),
        "log": (lambda t, v: ad.vsum(ad.log(v[0])), [x]),
        "square": (lambda t, v: ad.vsum(ad.square(v[0])), [x]),
        "sqrt": (lambda t, v: ad.vsum(ad.sqrt(v[0])), [x]),
        "sin": (lambda t, v: ad.vsum(ad.sin(v[0])), [x]),
        "cos": (lambda t, v: ad.vsum(ad.cos(v[0])), [x]),
        "absolute": (lambda t, v: ad.vsum(ad.absolute(v[0] - 1.2)), [x]),
        "relu": (lambda t, v: ad.vsum(ad.relu(v[0] - 1.2)), [x]),
        "matvec": (lambda t, v: ad.vsum(ad.square(ad.matvec(v[0], v[1]))), [A, v3]),
        "linear": (lambda t, v: ad.vsum(ad.square(ad.linear(v[0], v[1], v[2]))), [X, A, b2]),
        "sum_axis": (lambda t, v: ad.vsum(ad.square(ad.vsum(v[0], axis=1))), [X]),
        "concat": (lambda t, v: ad.vsum(ad.square(ad.concat([v[0], v[1]]))), [x, y]),
        "stack_rows": (
            lambda t, v: ad.vsum(ad.logsumexp(ad.stack_rows([v[0], v[1]]), axis=0)),
            [x, y],
        ),
        "gather": (lambda t, v: ad.vsum(ad.square(ad.gather(v[0], idx))), [w5]),
        "gather_rows": (lambda t, v: ad.vsum(ad.square(ad.gather_rows(v[0], rows))), [M]),
        "take_columns": (lambda t, v: ad.vsum(ad.square(ad.take_columns(v[0], cols))), [M]),
        "reshape": (
            lambda t, v: ad.vsum(ad.square(ad.vsum(ad.reshape(v[0], (5, 1)), axis=1))),
            [w5],
        ),
        "softmax": (
            lambda t, v: ad.vsum(ad.softmax(v[0]) * t.constant(np.arange(5.0))),
            [w5],
        ),
        "logsumexp": (lambda t, v: ad.logsumexp(v[0]), [w5]),
        "stop_gradient": (
            lambda t, v: ad.vsum(v[0] + ad.stop_gradient(ad.square(v[0])) * 0.0),
            [x],
        ),
    }


def check_primitives() -> dict:
    return {name: max_rel_err(build, arrays) for name, (build, arrays) in primitive_cases().items()}


# ---------------------------------------------------------------------------
# suite 2: randomized composite graphs

_UNARY = ("neg", "exp_s", "log_s", "sqrt_s", "square", "sin", "cos", "abs",
          "relu_c", "softmax_like", "sg_mix")
_BINARY = ("add", "sub", "mul", "div_s")


def _apply_unary(kind, v, salt):
    if kind == "neg":
        return ad.negate(v)
    if kind == "exp_s":
        return ad.exp(v * 0.25)
    if kind == "log_s":
        return ad.log(ad.absolute(v) + 0.5)
    if kind == "sqrt_s":
        return ad.sqrt(ad.absolute(v) + 0.5)
    if kind == "square":
        return ad.square(v)
    if kind == "sin":
        return ad.sin(v)
    if kind == "cos":
        return ad.cos(v)
    if kind == "abs":
        return ad.absolute(v)
    if kind == "relu_c":
        return ad.relu(v - salt)
    if kind == "softmax_like":
        return ad.softmax(v) if v.value.ndim == 1 else v
    if kind == "sg_mix":
        # stop-gradient side branch whose contribution is identically zero,
        # on the tape and under FD re-evaluation alike
        return v + ad.stop_gradient(ad.square(v)) * 0.0
    raise AssertionError(kind)


def random_graph_case(seed):
    """Sample a composite-graph recipe; returns (leaf arrays, builder)."""
    r = np.random.default_rng(seed)
    n_leaves = int(r.integers(2, 4))
    dim = int(r.integers(2, 9))
    n_ops = int(r.integers(3, 9))
    program = []
    for _ in range(n_ops):
        if r.random() < 0.55:
            program.append(("u", _UNARY[r.integers(len(_UNARY))], float(r.uniform(-0.5, 0.5))))
        else:
            program.append(("b", _BINARY[r.integers(len(_BINARY))], None))
    picks = r.integers(0, 1 << 30, size=2 * n_ops)
    reduce_kind = "lse" if r.random() < 0.5 else "sum"

    def build(tape, leaves):
        pool = list(leaves)
        k = 0
        for op, kind, salt in program:
            if op == "u":
                v = pool[picks[k] % len(pool)]
                k += 1
                pool.append(_apply_unary(kind, v, salt))
            else:
                a_, b_ = pool[picks[k] % len(pool)], pool[picks[k + 1] % len(pool)]
                k += 2
                if kind == "add":
                    pool.append(a_ + b_)
                elif kind == "sub":
                    pool.append(a_ - b_)
                elif kind == "mul":
                    pool.append(a_ * b_)
                else:
                    pool.append(a_ / (ad.absolute(b_) + 0.5))
        total = None
        for v in pool:
            s = ad.logsumexp(v) if reduce_kind == "lse" else ad.vsum(v)
            total = s if total is None else total + s
        return total

    rv = np.random.default_rng(1000 + seed)
    arrays = [
        rv.uniform(0.4, 1.6, (dim,)) * np.where(rv.random(dim) < 0.3, -1.0, 1.0)
        for _ in range(n_leaves)
    ]
    return arrays, build


def check_composites(n=100) -> float:
    worst = 0.0
    for seed in range(n):
        arrays, build = random_graph_case(seed)
        worst = max(worst, max_rel_err(build, arrays))
    return worst


# ---------------------------------------------------------------------------
# suite 3: end-to-end filter objective gradient (CRN)

def check_filter_gradient(T=3, K=4, h=1e-6) -> float:
    model = ssm_mod.LinearGaussian1D(a=0.9, q=0.5, r=0.5)
    traj = ssm_mod.simulate(model, T=T, seed=31)
    base = nets.init_params([2, 6, 2], np.random.default_rng(10))

    def objective(params):
        tape = ad.Tape()
        lifted = nets.lift_params(tape, params)
        proposal = pf.LearnedMixtureModel(lifted, S=1, d_x=1, uses_observation=True)
        res = pf.run_filter(
            transition=pf.TrueKernelModel(model), proposal=proposal,
            observation_logpdf=pf.make_observation_logpdf(model),
            ys=traj.observations, K=K, rng=np.random.default_rng(555),
            init_sampler=pf.gaussian_init_sampler(np.zeros(1), [1.0]),
            differentiable=True, tape=tape,
        )
        return res.objective, lifted

    root, lifted = objective(base)
    grads = ad.backward(root)
    worst = 0.0
    arrays = list(base.named_arrays())
    leaves = list(lifted.leaf_arrays())
    for (name, arr), leaf in zip(arrays, leaves):
        g_ad = grads.wrt(leaf)
        g_fd = np.zeros_like(arr)
        flat, gf = arr.reshape(-1), g_fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = objective(base)[0].value
            flat[j] = orig - h
            fm = objective(base)[0].value
            flat[j] = orig
            gf[j] = (fp - fm) / (2 * h)
        worst = max(worst, rel_err(g_ad, g_fd))
    return worst


def run_all(n_composites=100) -> dict:
    """All three suites; report max relative errors and pass/fail."""
    prim = check_primitives()
    comp = check_composites(n_composites)
    filt = check_filter_gradient()
    report = {
        "primitives_max": max(prim.values()),
        "primitives": prim,
        "composites_max": comp,
        "filter_objective_max": filt,
        "passed": max(prim.values()) < 1e-5 and comp < 1e-5 and filt < 1e-3,
    }
    return report
