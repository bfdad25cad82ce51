"""Feed-forward value approximator with exact input and parameter gradients.

The network maps a normalized ``(t, x)`` to a scalar. Hidden layers use
tanh, the output layer is affine. Costate predictions are input gradients,
and the training loss penalizes both value and costate mismatch, so the
parameter gradient differentiates through the input gradient. This is done
by carrying forward-mode input tangents through the network and running a
hand-written reverse sweep over values and tangents together.
"""

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import EmptyDataset, NonFiniteValue

__all__ = [
    "MlpModel",
    "TrainConfig",
    "forward",
    "input_gradient",
    "loss",
    "param_gradient",
    "train",
    "save_model",
    "load_model",
    "history_csv",
]


class MlpModel:
    """tanh multilayer perceptron over normalized ``(t, x)``.

    ``lo`` and ``hi`` bound the training box (time first); inputs are mapped
    affinely to ``[-1, 1]``. ``layers`` is a list of ``(W, b)`` with ``W`` of
    shape ``(fan_out, fan_in)``.
    """

    activation = "tanh"

    def __init__(self, layers, lo, hi):
        self.layers = [(np.array(W, dtype=float), np.array(b, dtype=float)) for W, b in layers]
        self.lo = np.array(lo, dtype=float)
        self.hi = np.array(hi, dtype=float)
        if np.any(self.hi <= self.lo):
            raise ValueError("normalization box must have hi > lo")
        widths = [self.layers[0][0].shape[1]] + [W.shape[0] for W, _ in self.layers]
        if widths[-1] != 1:
            raise ValueError("output width must be 1")
        for (W, b), fan_in in zip(self.layers, widths[:-1]):
            if W.shape[1] != fan_in or b.shape != (W.shape[0],):
                raise ValueError("inconsistent layer shapes")
        if len(self.lo) != widths[0]:
            raise ValueError("normalization box does not match input width")

    @classmethod
    def create(cls, input_dim, hidden=(64, 64, 64), lo=None, hi=None, seed=0):
        rng = np.random.default_rng(seed)
        widths = [input_dim, *hidden, 1]
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            layers.append((rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)))
        lo = -np.ones(input_dim) if lo is None else lo
        hi = np.ones(input_dim) if hi is None else hi
        return cls(layers, lo, hi)

    @classmethod
    def for_problem(cls, ocp, hidden=(64, 64, 64), seed=0):
        lo = np.concatenate([[ocp.t0], ocp.domain_lo])
        hi = np.concatenate([[ocp.tf], ocp.domain_hi])
        return cls.create(ocp.n + 1, hidden, lo, hi, seed)

    @property
    def widths(self):
        return [self.layers[0][0].shape[1]] + [W.shape[0] for W, _ in self.layers]

    @property
    def scale(self):
        """d(normalized input) / d(raw input), per input coordinate."""
        return 2.0 / (self.hi - self.lo)

    def copy(self):
        return MlpModel([(W.copy(), b.copy()) for W, b in self.layers], self.lo, self.hi)

    def get_flat(self):
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        pos = 0
        layers = []
        for W, b in self.layers:
            w_size = W.size
            layers.append(
                (theta[pos : pos + w_size].reshape(W.shape).copy(), theta[pos + w_size : pos + w_size + b.size].copy())
            )
            pos += w_size + b.size
        if pos != theta.size:
            raise ValueError("parameter vector has the wrong length")
        return MlpModel(layers, self.lo, self.hi)

    @property
    def n_params(self):
        return sum(W.size + b.size for W, b in self.layers)

    def normalize(self, inputs):
        z = (np.asarray(inputs, dtype=float) - self.lo) * self.scale - 1.0
        if np.any(np.abs(z) > 2.0):
            warnings.warn("inputs outside twice the normalization box were clipped", RuntimeWarning, stacklevel=3)
            z = np.clip(z, -2.0, 2.0)
        return z

    def _inputs(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (X.shape[0],))
        return np.column_stack([t, X])

    def predict(self, t, X):
        """Values at a batch: ``t`` shape ``(N,)`` or scalar, ``X`` shape ``(N, n)``."""
        a = self.normalize(self._inputs(t, X))
        for W, b in self.layers[:-1]:
            a = np.tanh(a @ W.T + b)
        W, b = self.layers[-1]
        return (a @ W.T + b)[:, 0]

    def predict_with_gradient(self, t, X):
        """Values ``(N,)`` and raw-input gradients ``(N, n + 1)``, time first."""
        z = self.normalize(self._inputs(t, X))
        vals, tangents = _forward_tangents(self, z, np.arange(z.shape[1]))
        return vals, tangents.T * self.scale

    def __repr__(self):
        return f"MlpModel(widths={self.widths})"


def _mm(A, W):
    # (..., i) @ W with the leading axes flattened, so BLAS sees one 2-D product
    return (A.reshape(-1, A.shape[-1]) @ W).reshape(A.shape[:-1] + (W.shape[-1],))


def _forward_tangents(model, z, directions, keep=False):
    """Values and directional derivatives along the given input axes.

    Returns ``(V, G)`` with ``G`` of shape ``(len(directions), N)`` in
    normalized coordinates; with ``keep`` also the per-layer activations
    and tangents needed for the reverse sweep.
    """
    N, d = z.shape
    k = len(directions)
    a = z
    da = np.zeros((k, N, d))
    da[np.arange(k), :, directions] = 1.0
    tape = []
    for W, b in model.layers[:-1]:
        a_next = np.tanh(a @ W.T + b)
        dh = _mm(da, W.T)
        s = 1.0 - a_next * a_next
        if keep:
            tape.append((a, da, a_next, dh, s))
        a, da = a_next, s * dh
    W, b = model.layers[-1]
    V = (a @ W.T + b)[:, 0]
    G = _mm(da, W.T)[..., 0]
    if keep:
        return V, G, (tape, a, da)
    return V, G


def _check_finite(*arrays, where="forward pass"):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"non-finite value in {where}")


def forward(model, t, x):
    """Scalar network value at one ``(t, x)``."""
    return float(model.predict(t, np.atleast_2d(x))[0])


def input_gradient(model, t, x):
    """``(dV/dt, dV/dx)`` at one point, in raw (unnormalized) coordinates."""
    _, g = model.predict_with_gradient(t, np.atleast_2d(x))
    return float(g[0, 0]), g[0, 1:].copy()


def _arrays(data):
    if len(data) == 0:
        raise EmptyDataset("loss needs at least one sample")
    t = np.array([s.t for s in data], dtype=float)
    X = np.array([s.x for s in data], dtype=float)
    v = np.array([s.v for s in data], dtype=float)
    lam = np.array([s.lam for s in data], dtype=float)
    return t, X, v, lam


class _Batch:
    """Training arrays with the normalized inputs precomputed."""

    def __init__(self, model, data):
        if isinstance(data, _Batch):
            self.__dict__.update(data.__dict__)
            return
        t, X, v, lam = _arrays(data)
        self.z = model.normalize(np.column_stack([t, X]))
        self.v = v
        self.lam = lam
        self.n = X.shape[1]


def _loss_and_grad(model, batch, mu, need_grad=True):
    N = batch.z.shape[0]
    sx = model.scale[1:]
    dirs = np.arange(1, batch.n + 1)
    if not need_grad:
        V, G = _forward_tangents(model, batch.z, dirs)
        gx = G.T * sx
        return float(np.mean((V - batch.v) ** 2) + mu * np.sum((gx - batch.lam) ** 2) / N), None
    V, G, (tape, a_last, da_last) = _forward_tangents(model, batch.z, dirs, keep=True)
    gx = G.T * sx
    rv = V - batch.v
    rl = gx - batch.lam
    value = float(np.mean(rv**2) + mu * np.sum(rl**2) / N)

    # adjoints of V (N,) and of the normalized tangents G (k, N)
    V_bar = 2.0 * rv / N
    G_bar = (2.0 * mu / N) * (rl * sx).T

    grads = []
    W, b = model.layers[-1]
    gW = V_bar @ a_last + G_bar.ravel() @ da_last.reshape(-1, da_last.shape[-1])
    grads.append((gW[None, :], np.array([V_bar.sum()])))
    a_bar = np.outer(V_bar, W[0])
    da_bar = G_bar[..., None] * W[0]
    for (W, b), (a_prev, da_prev, a_cur, dh, s) in zip(reversed(model.layers[:-1]), reversed(tape)):
        # a_cur = tanh(h), da_cur = s * dh, s = 1 - a_cur^2
        dh_bar = da_bar * s
        s_bar = (da_bar * dh).sum(axis=0)
        h_bar = (a_bar - 2.0 * a_cur * s_bar) * s
        gW = h_bar.T @ a_prev + dh_bar.reshape(-1, dh_bar.shape[-1]).T @ da_prev.reshape(-1, da_prev.shape[-1])
        grads.append((gW, h_bar.sum(axis=0)))
        a_bar = h_bar @ W
        da_bar = _mm(dh_bar, W)
    grads.reverse()
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return value, flat


def loss(model, data, mu=1.0):
    """Mean squared value error plus ``mu`` times mean squared costate error."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    value, _ = _loss_and_grad(model, _Batch(model, data), mu, need_grad=False)
    return value


def param_gradient(model, data, mu=1.0):
    """Exact gradient of :func:`loss` with respect to the flattened parameters."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    _, grad = _loss_and_grad(model, _Batch(model, data), mu)
    return grad


@dataclass(frozen=True)
class TrainConfig:
    mu: float = 1.0
    adam_steps: int = 2000
    adam_lr: float = 1e-3
    lbfgs_memory: int = 10
    lbfgs_steps: int = 5000
    lbfgs_gtol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.adam_steps < 0 or self.lbfgs_steps < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.adam_lr <= 0 or self.lbfgs_memory < 1 or self.lbfgs_gtol <= 0:
            raise ValueError("invalid optimizer settings")

    def as_dict(self):
        return asdict(self)


class _Tracker:
    """Keeps the best parameters seen and the per-iteration loss history."""

    def __init__(self, theta, value):
        self.best_theta = theta.copy()
        self.best = value
        self.history = [("init", 0, value)]

    def record(self, stage, it, theta, value):
        if not np.isfinite(value):
            raise NonFiniteValue(f"non-finite loss at {stage} iteration {it}", where=it)
        self.history.append((stage, it, value))
        if value < self.best:
            self.best = value
            self.best_theta = theta.copy()


def train(model, data, config=None):
    """Adam warm-up followed by L-BFGS on the full batch.

    Returns ``(best_model, history)`` where ``history`` is a list of
    ``(stage, iteration, loss)``. The best iterate is returned, so the
    training loss never increases.
    """
    config = config or TrainConfig()
    batch = _Batch(model, data)
    mu = config.mu
    theta = model.get_flat()
    value, grad = _loss_and_grad(model, batch, mu)
    _check_finite([value], grad, where="initial loss")
    tracker = _Tracker(theta, value)
    if value == 0.0 or not np.any(grad):
        return model.copy(), tracker.history

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for it in range(1, config.adam_steps + 1):
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        step = config.adam_lr * (m / (1 - b1**it)) / (np.sqrt(v / (1 - b2**it)) + eps)
        theta = theta - step
        value, grad = _loss_and_grad(model.set_flat(theta), batch, mu)
        tracker.record("adam", it, theta, value)
        _check_finite(grad, where=f"gradient at adam iteration {it}")

    if config.lbfgs_steps > 0:
        cache = {}

        def fun(th):
            value, grad = _loss_and_grad(model.set_flat(th), batch, mu)
            if not np.isfinite(value):
                # let the line search back off
                return np.inf, np.zeros_like(th)
            cache["last"] = (th.copy(), value)
            return value, grad

        counter = [0]

        def callback(intermediate_result):
            counter[0] += 1
            tracker.record("lbfgs", counter[0], intermediate_result.x, float(intermediate_result.fun))

        minimize(
            fun,
            tracker.best_theta,
            jac=True,
            method="L-BFGS-B",
            callback=callback,
            options={
                "maxcor": config.lbfgs_memory,
                "maxiter": config.lbfgs_steps,
                "gtol": config.lbfgs_gtol,
                "ftol": 0.0,
                "maxls": 40,
            },
        )
    return model.set_flat(tracker.best_theta), tracker.history


def model_to_dict(model):
    return {
        "widths": model.widths,
        "activation": model.activation,
        "normalization": {"lo": model.lo.tolist(), "hi": model.hi.tolist()},
        "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in model.layers],
    }


def model_from_dict(d):
    if d.get("activation", "tanh") != "tanh":
        raise ValueError(f"unsupported activation {d['activation']!r}")
    model = MlpModel(
        [(layer["W"], layer["b"]) for layer in d["layers"]],
        d["normalization"]["lo"],
        d["normalization"]["hi"],
    )
    if list(d.get("widths", model.widths)) != model.widths:
        raise ValueError("widths do not match the stored layers")
    return model


def save_model(model, path):
    # json writes floats with repr, which round-trips float64 exactly
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def history_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "iteration", "loss"])
    for stage, it, value in history:
        writer.writerow([stage, it, repr(float(value))])
    return buf.getvalue()
