"""Diagonal Gaussians and equal-weight Gaussian mixtures on the tape.

Components are parametrised by a mean vector ``mu`` and a raw covariance
scale vector ``c``; the effective covariance is diag(max(|c|, floor))**2.
Mixture weights are structurally 1/S and never stored.

Sampling is reparametrised (mu + c * eps with externally supplied eps) so
gradients reach the component parameters.  Component selection is either a
plain categorical draw treated as data (the default, cheapest) or a
straight-through Gumbel-softmax with hard forward selection.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var

SIGMA_FLOOR = 1e-3
LOG_2PI = float(np.log(2.0 * np.pi))


class DiagGaussian:
    """Mean and raw covariance-scale vectors, each (d,) or batched (n, d)."""

    def __init__(self, mu: Var, c: Var):
        if mu.value.shape != c.value.shape:
            raise ValueError(f"mu shape {mu.value.shape} != c shape {c.value.shape}")
        self.mu = mu
        self.c = c


class GaussianMixture:
    """Equal-weight mixture of diagonal Gaussians (weights are 1/S by construction)."""

    def __init__(self, components: list[DiagGaussian]):
        if not components:
            raise ValueError("a mixture needs at least one component")
        self.components = components

    @property
    def n_components(self) -> int:
        return len(self.components)


def effective_scale(c: Var, floor: float = SIGMA_FLOOR) -> Var:
    """max(|c|, floor): the sign of c is irrelevant (it gets squared) and
    an exact zero would break the density, so small scales are floored."""
    return ad.relu(ad.absolute(c) - floor) + floor


def _reduce_last(v: Var) -> Var:
    if v.value.ndim == 2:
        return ad.vsum(v, axis=1)
    return ad.vsum(v)


def wrap_residual(delta: Var) -> Var:
    """Shift a residual into [-pi, pi) per element (periodic state spaces).

    The 2*pi*k shift is a constant computed from the primal, so gradients
    pass through untouched (the map is piecewise unit-slope).
    """
    two_pi = 2.0 * np.pi
    shift = delta.tape.constant(two_pi * np.round(delta.value / two_pi))
    return delta - shift


def log_density_gaussian(g: DiagGaussian, x: Var, floor: float = SIGMA_FLOOR,
                         periodic: bool = False) -> Var:
    """Diagonal-Gaussian log density, differentiable in x, mu and c.

    x of shape (d,) yields a scalar; (n, d) yields an (n,) batch.  The
    covariance is inverted element-wise, never materialised as a matrix.
    With ``periodic`` the residual is wrapped into [-pi, pi) first, which
    equals the exact wrapped-Gaussian density to machine precision for
    scales well below pi.
    """
    d = g.mu.value.shape[-1]
    if x.value.shape[-1] != d:
        raise ValueError(f"dimension mismatch: x has {x.value.shape[-1]}, mean has {d}")
    s = effective_scale(g.c, floor)
    delta = x - g.mu
    if periodic:
        delta = wrap_residual(delta)
    z = delta / s
    quad = _reduce_last(ad.square(z))
    logdet = _reduce_last(ad.log(s))
    return -0.5 * d * LOG_2PI - logdet - 0.5 * quad


def log_density_mixture(m: GaussianMixture, x: Var, floor: float = SIGMA_FLOOR,
                        periodic: bool = False) -> Var:
    """logsumexp over component log densities minus log S."""
    parts = [log_density_gaussian(comp, x, floor, periodic) for comp in m.components]
    S = len(parts)
    if S == 1:
        return parts[0]
    if parts[0].value.ndim == 0:
        stacked = ad.concat([ad.reshape(p, (1,)) for p in parts])
        return ad.logsumexp(stacked) - np.log(S)
    return ad.logsumexp(ad.stack_rows(parts), axis=0) - np.log(S)


# ---------------------------------------------------------------------------
# reparametrised sampling

def categorical_draws(S: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Equal-weight component indices from n uniforms (inverse CDF)."""
    u = rng.random(n)
    return np.minimum((u * S).astype(np.intp), S - 1)


def _selected_sum(m: GaussianMixture, eps: Var, one_hot: list) -> Var:
    out = None
    for comp, w in zip(m.components, one_hot):
        term = w * (comp.mu + effective_scale(comp.c) * eps)
        out = term if out is None else out + term
    return out


def sample_mixture_stopgrad(m: GaussianMixture, eps: Var, components: np.ndarray) -> Var:
    """Sample mu + c*eps with the component choice treated as data.

    ``components`` are plain integer draws: the categorical selection is
    severed from the gradient, so each sample's gradient flows only into
    the parameters of its selected component.
    """
    S = m.n_components
    if S == 1:
        comp = m.components[0]
        return comp.mu + effective_scale(comp.c) * eps
    components = np.asarray(components)
    if eps.value.ndim == 1:
        comp = m.components[int(components)]
        return comp.mu + effective_scale(comp.c) * eps
    tape = eps.tape
    one_hot = [
        tape.constant((components == s).astype(np.float64)[:, None]) for s in range(S)
    ]
    return _selected_sum(m, eps, one_hot)


def sample_mixture_reparam(
    m: GaussianMixture, eps: Var, uniforms: np.ndarray, temperature: float = 0.5
) -> Var:
    """Gumbel-softmax selection, hard in the forward pass (straight-through).

    The selection weights are hard one-hots plus (soft - stop_gradient(soft)),
    so the primal equals a plain categorical sample while the soft path stays
    on the tape.  With equal fixed mixture weights the soft path carries no
    learnable parameters; it exists so the sampler is a drop-in reparametrised
    alternative to the categorical-as-data default.
    """
    if temperature <= 0:
        raise ValueError("Gumbel-softmax temperature must be positive")
    S = m.n_components
    if S == 1:
        comp = m.components[0]
        return comp.mu + effective_scale(comp.c) * eps
    tape = eps.tape
    uniforms = np.asarray(uniforms, dtype=np.float64)
    n = eps.value.shape[0] if eps.value.ndim == 2 else 1
    gumbels = -np.log(-np.log(uniforms.reshape(S, n)))
    perturbed = (-np.log(S) + gumbels) / temperature
    soft_np = np.exp(perturbed - perturbed.max(axis=0))
    soft_np /= soft_np.sum(axis=0)
    hard = perturbed.argmax(axis=0)
    if eps.value.ndim == 1:
        comp = m.components[int(hard[0])]
        return comp.mu + effective_scale(comp.c) * eps
    soft = tape.var(soft_np)
    straight_through = soft - ad.stop_gradient(soft)
    weights = []
    for s in range(S):
        hard_s = tape.constant((hard == s).astype(np.float64)[:, None])
        st_s = ad.reshape(ad.gather_rows(straight_through, [s]), (n, 1))
        weights.append(hard_s + st_s)
    return _selected_sum(m, eps, weights)


# ---------------------------------------------------------------------------
# plain-numpy helpers (simulation and sampling tests; no tape involved)

def gaussian_logpdf_np(mu: np.ndarray, sigma, x: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density on arrays; sigma is the std (scalar or vector)."""
    mu = np.asarray(mu, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape[-1:])
    z = (x - mu) / sigma
    d = mu.shape[-1]
    return -0.5 * d * LOG_2PI - np.log(sigma).sum() - 0.5 * (z * z).sum(axis=-1)


def sample_mixture_np(
    rng: np.random.Generator, mus: np.ndarray, cs: np.ndarray, n: int,
    floor: float = SIGMA_FLOOR,
) -> np.ndarray:
    """n draws from an equal-weight mixture given (S, d) parameter arrays."""
    S, d = mus.shape
    comps = categorical_draws(S, n, rng)
    eps = rng.standard_normal((n, d))
    scales = np.maximum(np.abs(cs), floor)
    return mus[comps] + scales[comps] * eps


def mixture_logpdf_np(mus, cs, x, floor: float = SIGMA_FLOOR):
    """Equal-weight mixture log density on arrays; x is (d,) or (n, d)."""
    mus = np.atleast_2d(np.asarray(mus, dtype=np.float64))
    cs = np.atleast_2d(np.asarray(cs, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    scales = np.maximum(np.abs(cs), floor)
    d = mus.shape[1]
    z = (x[..., None, :] - mus) / scales
    comp_lp = -0.5 * d * LOG_2PI - np.log(scales).sum(axis=1) - 0.5 * (z * z).sum(axis=-1)
    m = comp_lp.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(comp_lp - m).sum(axis=-1, keepdims=True))).squeeze(-1) - np.log(mus.shape[0])
