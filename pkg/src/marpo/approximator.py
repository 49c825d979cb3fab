"""Dense tanh networks for the shared policy and the centralized critic.

Everything is float64 numpy with hand-written reverse-mode gradients. A
loss is expressed as a *head*: a function of the network outputs (policy
logits and critic values) that returns the scalar loss together with its
derivatives with respect to those outputs. :func:`gradient` runs the
forward passes, calls the head and backpropagates through both networks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonFiniteGradientError, ValidationError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "marpo-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ParamSet:
    """Weights and biases of the policy and value networks.

    Each network is a list ``[W0, b0, W1, b1, ...]`` with ``W`` shaped
    ``(fan_in, fan_out)``. The flat view concatenates policy tensors then
    value tensors, each in row-major order.
    """

    policy: list[np.ndarray]
    value: list[np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        return self.policy + self.value

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors())

    @property
    def obs_dim(self) -> int:
        return self.policy[0].shape[0]

    @property
    def state_dim(self) -> int:
        return self.value[0].shape[0]

    @property
    def n_actions(self) -> int:
        return self.policy[-1].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def with_flat(self, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValidationError(f"flat vector has {flat.size} entries, expected {self.size}")
        out, pos = [], 0
        for t in self.tensors():
            out.append(flat[pos : pos + t.size].reshape(t.shape).copy())
            pos += t.size
        k = len(self.policy)
        return ParamSet(out[:k], out[k:])

    def copy(self) -> "ParamSet":
        return ParamSet([t.copy() for t in self.policy], [t.copy() for t in self.value])


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _init_mlp(rng, sizes: Sequence[int], final_gain: float) -> list[np.ndarray]:
    layers = []
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        gain = final_gain if i == n_layers - 1 else math.sqrt(2.0)
        layers.append(_orthogonal(rng, (sizes[i], sizes[i + 1]), gain))
        layers.append(np.zeros(sizes[i + 1]))
    return layers


def init_params(
    obs_dim: int,
    state_dim: int,
    n_actions: int,
    hidden: Sequence[int] = (64, 64),
    seed: int = 0,
) -> ParamSet:
    """Orthogonal init with gain sqrt(2); the policy output layer uses gain 0.01."""
    rng = np.random.default_rng(seed)
    policy = _init_mlp(rng, [obs_dim, *hidden, n_actions], final_gain=0.01)
    value = _init_mlp(rng, [state_dim, *hidden, 1], final_gain=1.0)
    return ParamSet(policy, value)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def mlp_forward(layers: list[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return the linear output and the activations needed for backprop."""
    acts = [x]
    h = x
    n = len(layers) // 2
    for i in range(n):
        z = h @ layers[2 * i] + layers[2 * i + 1]
        h = np.tanh(z) if i < n - 1 else z
        acts.append(h)
    return h, acts


def mlp_backward(layers: list[np.ndarray], acts: list[np.ndarray], dout: np.ndarray) -> list[np.ndarray]:
    n = len(layers) // 2
    grads: list[np.ndarray] = [None] * len(layers)  # type: ignore[list-item]
    dz = dout
    for i in reversed(range(n)):
        h_in = acts[i]
        grads[2 * i] = h_in.T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ layers[2 * i].T
            dz = dh * (1.0 - acts[i] ** 2)
    return grads


def _as_batch(x: np.ndarray, width: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValidationError(f"{what} has shape {x.shape}, expected width {width}")
    return x, single


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def policy_logits(params: ParamSet, obs: np.ndarray) -> np.ndarray:
    x, _ = _as_batch(obs, params.obs_dim, "observation")
    return mlp_forward(params.policy, x)[0]


def policy_forward(params: ParamSet, obs: np.ndarray) -> np.ndarray:
    """Action probabilities for one observation (1-D) or a batch (2-D)."""
    x, single = _as_batch(obs, params.obs_dim, "observation")
    probs = np.exp(log_softmax(mlp_forward(params.policy, x)[0]))
    return probs[0] if single else probs


def value_forward(params: ParamSet, global_state: np.ndarray):
    """Critic estimate; a float for one state, an array for a batch."""
    x, single = _as_batch(global_state, params.state_dim, "global state")
    v = mlp_forward(params.value, x)[0][:, 0]
    return float(v[0]) if single else v


def log_prob_and_entropy(dist: Sequence[float], action: int) -> tuple[float, float]:
    p = np.asarray(dist, dtype=np.float64)
    if not (isinstance(action, (int, np.integer)) and 0 <= action < p.size):
        raise ValidationError(f"action {action!r} outside support of size {p.size}")
    nz = p[p > 0.0]
    entropy = float(-np.sum(nz * np.log(nz)))
    lp = math.log(p[action]) if p[action] > 0.0 else -math.inf
    return lp, max(entropy, 0.0)


# ---------------------------------------------------------------------------
# Gradient
# ---------------------------------------------------------------------------


@dataclass
class HeadResult:
    """What a loss head reports back.

    ``dlogits`` has the shape of the policy output, ``dvalues`` one entry per
    critic input row, and ``dflat`` an optional direct dependence on the
    flat parameter vector (e.g. weight decay).
    """

    loss: float
    dlogits: Optional[np.ndarray] = None
    dvalues: Optional[np.ndarray] = None
    dflat: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


Head = Callable[[np.ndarray, np.ndarray, np.ndarray], HeadResult]


def gradient(params: ParamSet, obs: np.ndarray, states: np.ndarray, head: Head) -> tuple[HeadResult, np.ndarray]:
    """Evaluate ``head(logits, values, flat)`` and return it with d loss / d flat.

    ``obs`` feeds the policy network and ``states`` the critic; either may
    have zero rows.
    """
    obs = np.asarray(obs, dtype=np.float64).reshape(-1, params.obs_dim)
    states = np.asarray(states, dtype=np.float64).reshape(-1, params.state_dim)
    logits, pacts = mlp_forward(params.policy, obs)
    vout, vacts = mlp_forward(params.value, states)
    flat = params.flat()
    res = head(logits, vout[:, 0], flat)

    if res.dlogits is None:
        pgrads = [np.zeros_like(t) for t in params.policy]
    else:
        pgrads = mlp_backward(params.policy, pacts, np.asarray(res.dlogits, dtype=np.float64))
    if res.dvalues is None:
        vgrads = [np.zeros_like(t) for t in params.value]
    else:
        vgrads = mlp_backward(params.value, vacts, np.asarray(res.dvalues, dtype=np.float64)[:, None])
    grad = np.concatenate([g.ravel() for g in pgrads + vgrads])
    if res.dflat is not None:
        grad = grad + res.dflat
    return res, grad


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = fn(x)
        x[i] = orig - h
        fm = fn(x)
        x[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(floor, |a|)``."""
    return np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **kw)


def sgd_step(
    params: ParamSet,
    grad: np.ndarray,
    lr: float,
    state: Optional[AdamState] = None,
) -> tuple[ParamSet, Optional[AdamState]]:
    """One descent step. Plain gradient descent when ``state`` is None, Adam otherwise.

    Raises NonFiniteGradientError (after logging) without touching either
    the parameters or the optimizer state.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (params.size,):
        raise ValidationError(f"gradient has {grad.size} entries, expected {params.size}")
    if not lr >= 0.0:
        raise ValidationError(f"learning rate must be >= 0, got {lr}")
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite gradient; update skipped")
        raise NonFiniteGradientError("gradient contains NaN or inf")

    flat = params.flat()
    if state is None:
        return params.with_flat(flat - lr * grad), None

    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_flat = flat - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.beta1, state.beta2, state.eps)
    return params.with_flat(new_flat), new_state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ParamSet, path: str | Path) -> None:
    """Plain-text checkpoint; values are written with ``float.hex`` so reads are bit-exact.

    Layout::

        marpo-checkpoint 1
        net policy <n_tensors>
        tensor <ndim> <dim0> [<dim1>]
        <hex values, row-major, space separated>
        ...
        net value <n_tensors>
        ...
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for name, tensors in (("policy", params.policy), ("value", params.value)):
        lines.append(f"net {name} {len(tensors)}")
        for t in tensors:
            lines.append("tensor " + " ".join(str(d) for d in (t.ndim, *t.shape)))
            lines.append(" ".join(float(v).hex() for v in t.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> ParamSet:
    try:
        lines = Path(path).read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from exc
    it = iter(lines)
    try:
        magic, version = next(it).split()
        if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
        nets: dict[str, list[np.ndarray]] = {}
        for _ in range(2):
            tag, name, count = next(it).split()
            if tag != "net" or name not in ("policy", "value"):
                raise ValidationError(f"{path}: malformed net header")
            tensors = []
            for _ in range(int(count)):
                head = next(it).split()
                ndim = int(head[1])
                shape = tuple(int(d) for d in head[2 : 2 + ndim])
                row = next(it).split()
                values = np.array([float.fromhex(v) for v in row], dtype=np.float64)
                tensors.append(values.reshape(shape))
            nets[name] = tensors
    except (StopIteration, ValueError, IndexError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"{path}: malformed checkpoint ({exc})") from exc
    return ParamSet(nets["policy"], nets["value"])
