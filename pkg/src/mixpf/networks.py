"""Dense feed-forward networks that emit Gaussian-mixture parameters,
plus the ADAM optimiser and a bit-exact JSON checkpoint format.

A network is a plain list of (A_l, b_l) float64 arrays with per-layer
activations; the output layer has dimension 2*S*d_x and is sliced into
alternating (mean, covariance-scale) blocks of d_x per mixture component.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .distributions import DiagGaussian, GaussianMixture

CHECKPOINT_VERSION = 1


@dataclass
class NetworkParams:
    """Per-layer weight matrices A_l (d_l, d_{l-1}) and bias vectors b_l."""

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        for l, (A, b) in enumerate(zip(self.weights, self.biases)):
            if A.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: A rows {A.shape[0]} != b size {b.shape[0]}")
            if l > 0 and A.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input dim {A.shape[1]} breaks the chain")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def n_params(self) -> int:
        return sum(A.size + b.size for A, b in zip(self.weights, self.biases))

    def named_arrays(self):
        for l, (A, b) in enumerate(zip(self.weights, self.biases), start=1):
            yield f"A{l}", A
            yield f"b{l}", b

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [A.copy() for A in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def fingerprint(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for _, arr in self.named_arrays():
            h.update(arr.astype("<f8").tobytes())
        return h.digest()


def init_params(layer_dims, rng: np.random.Generator, activations=None) -> NetworkParams:
    """Uniform(-1/sqrt(d_in), +1/sqrt(d_in)) entries per layer.

    ``layer_dims`` is [d_0, d_1, ..., d_L].  Default activations are relu
    on every hidden layer and identity on the output.
    """
    if any(d <= 0 for d in layer_dims) or len(layer_dims) < 2:
        raise ValueError(f"invalid layer dims {layer_dims}")
    L = len(layer_dims) - 1
    if activations is None:
        activations = ["relu"] * (L - 1) + ["identity"]
    if len(activations) != L:
        raise ValueError("one activation per layer required")
    weights, biases = [], []
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        weights.append(rng.uniform(-bound, bound, (d_out, d_in)))
        biases.append(rng.uniform(-bound, bound, d_out))
    return NetworkParams(weights, biases, list(activations))


@dataclass
class TapeParams:
    """A network's parameters placed on a tape as leaf variables."""

    layers: list
    activations: list

    def leaf_arrays(self):
        for A, b in self.layers:
            yield A
            yield b


def lift_params(tape: ad.Tape, params: NetworkParams) -> TapeParams:
    layers = [(tape.var(A), tape.var(b)) for A, b in zip(params.weights, params.biases)]
    return TapeParams(layers, list(params.activations))


def forward(tp: TapeParams, z: Var) -> Var:
    """Affine + activation chain; z is a single input (d_0,) or a batch (n, d_0)."""
    expected = tp.layers[0][0].value.shape[1]
    if z.value.shape[-1] != expected:
        raise ValueError(f"input dim {z.value.shape[-1]} != network d_0 {expected}")
    batched = z.value.ndim == 2
    for (A, b), act in zip(tp.layers, tp.activations):
        z = ad.linear(z, A, b) if batched else ad.matvec(A, z) + b
        if act == "relu":
            z = ad.relu(z)
        elif act != "identity":
            raise ValueError(f"unknown activation {act!r}")
    return z


def make_mixture(output: Var, S: int, d_x: int) -> GaussianMixture:
    """Slice a 2*S*d_x output into S (mean, scale) component blocks, in order."""
    width = output.value.shape[-1]
    if width != 2 * S * d_x:
        raise ValueError(f"output length {width} != 2*S*d_x = {2 * S * d_x}")
    take = ad.take_columns if output.value.ndim == 2 else ad.gather
    comps = []
    for s in range(S):
        base = 2 * s * d_x
        mu = take(output, np.arange(base, base + d_x))
        c = take(output, np.arange(base + d_x, base + 2 * d_x))
        comps.append(DiagGaussian(mu, c))
    return GaussianMixture(comps)


# ---------------------------------------------------------------------------
# ADAM

@dataclass
class AdamState:
    """First/second-moment accumulators mirroring the parameter arrays."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: NetworkParams, lr: float) -> AdamState:
    shapes = [arr for _, arr in params.named_arrays()]
    return AdamState(
        lr=lr,
        m=[np.zeros_like(a) for a in shapes],
        v=[np.zeros_like(a) for a in shapes],
    )


def adam_step(state: AdamState, params: NetworkParams, grads: list) -> NetworkParams:
    """One descent step; returns new params, mutates only the state moments.

    ``grads`` aligns with ``params.named_arrays()``.  Non-finite gradients
    raise with the offending parameter name so the training loop can decide.
    """
    named = list(params.named_arrays())
    if len(grads) != len(named):
        raise ValueError(f"{len(grads)} gradients for {len(named)} parameters")
    for (name, arr), g in zip(named, grads):
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} != {name} shape {arr.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    new_arrays = []
    for i, ((_, arr), g) in enumerate(zip(named, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        m_hat = state.m[i] / (1 - state.beta1**t)
        v_hat = state.v[i] / (1 - state.beta2**t)
        new_arrays.append(arr - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    weights = new_arrays[0::2]
    biases = new_arrays[1::2]
    return NetworkParams(weights, biases, list(params.activations))


def clip_global_norm(grads: list, max_norm: float):
    """Scale the gradient list so its global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= max_norm or total == 0.0:
        return grads, total, False
    scale = max_norm / total
    return [g * scale for g in grads], total, True


# ---------------------------------------------------------------------------
# checkpoints: versioned JSON, float64 little-endian base64 blobs

def _encode(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
    }


def _decode(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(blob["shape"])


def _net_to_json(params: NetworkParams, S: int) -> dict:
    return {
        "S": S,
        "layer_dims": [params.input_dim] + [A.shape[0] for A in params.weights],
        "activations": list(params.activations),
        "layers": [
            {"A": _encode(A), "b": _encode(b)}
            for A, b in zip(params.weights, params.biases)
        ],
    }


def _net_from_json(blob: dict) -> tuple[NetworkParams, int]:
    weights = [_decode(layer["A"]) for layer in blob["layers"]]
    biases = [_decode(layer["b"]) for layer in blob["layers"]]
    return NetworkParams(weights, biases, list(blob["activations"])), int(blob["S"])


def save_checkpoint(path, *, proposal: NetworkParams, proposal_S: int,
                    transition: NetworkParams | None, transition_S: int | None,
                    d_x: int, d_y: int, extra: dict | None = None) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "d_x": d_x,
        "d_y": d_y,
        "proposal": _net_to_json(proposal, proposal_S),
        "transition": _net_to_json(transition, transition_S) if transition is not None else None,
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    proposal, prop_S = _net_from_json(doc["proposal"])
    out = {
        "d_x": doc["d_x"],
        "d_y": doc["d_y"],
        "proposal": proposal,
        "proposal_S": prop_S,
        "transition": None,
        "transition_S": None,
        "extra": doc.get("extra", {}),
    }
    if doc["transition"] is not None:
        out["transition"], out["transition_S"] = _net_from_json(doc["transition"])
    return out
