"""From-scratch differentiable building blocks.

B-spline bases via the Cox–de Boor recursion, a one-layer grid of
spline-plus-base activations used as the actor, a small tanh MLP critic,
and a Gaussian policy head with a clamped mean.  Gradients are computed by
hand (reverse mode); no autodiff framework is involved.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import StateError

CHECKPOINT_SCHEMA = "kanlb-checkpoint-v1"

LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# B-spline basis
# --------------------------------------------------------------------------

def bspline_basis(x, knots, order: int) -> np.ndarray:
    """All B-spline basis values at x, by the Cox–de Boor recursion.

    `order` is the classical spline order (polynomial degree + 1): order 1
    gives the piecewise-constant interval indicators, order 4 is cubic.
    Returns shape x.shape + (len(knots) - order,).
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    t = np.asarray(knots, dtype=float)
    if t.size < order + 1:
        raise ValueError("need at least order + 1 knots")
    if np.any(np.diff(t) <= 0):
        raise ValueError("knots must be strictly increasing")
    x = np.asarray(x, dtype=float)
    xe = x[..., None]
    b = ((xe >= t[:-1]) & (xe < t[1:])).astype(float)
    for d in range(1, order):
        left = (xe - t[: -(d + 1)]) / (t[d:-1] - t[: -(d + 1)])
        right = (t[d + 1 :] - xe) / (t[d + 1 :] - t[1:-d])
        b = left * b[..., :-1] + right * b[..., 1:]
    return b


def bspline_basis_deriv(x, knots, order: int) -> np.ndarray:
    """First derivative of each basis function at x."""
    t = np.asarray(knots, dtype=float)
    x = np.asarray(x, dtype=float)
    if order == 1:
        return np.zeros(x.shape + (t.size - 1,))
    deg = order - 1
    lower = bspline_basis(x, t, order - 1)
    d1 = t[deg:-1] - t[: -(deg + 1)]
    d2 = t[deg + 1 :] - t[1:-deg]
    return deg * (lower[..., :-1] / d1 - lower[..., 1:] / d2)


@dataclass(frozen=True)
class GridSpec:
    """Spline grid shared by every activation in a layer.

    `spline_order` follows the KAN convention (polynomial degree; 3 = cubic);
    the classical Cox–de Boor order is spline_order + 1.  The base grid is
    extended by spline_order uniformly spaced knots on each side, so the
    coefficient count is intervals + spline_order.
    """

    lo: float = -1.0
    hi: float = 2.0
    intervals: int = 5
    spline_order: int = 3

    @property
    def order(self) -> int:
        return self.spline_order + 1

    @property
    def n_basis(self) -> int:
        return self.intervals + self.spline_order

    @cached_property
    def knots(self) -> np.ndarray:
        h = (self.hi - self.lo) / self.intervals
        idx = np.arange(-self.spline_order, self.intervals + self.spline_order + 1)
        return self.lo + idx * h

    @cached_property
    def _boundary(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        b_lo = bspline_basis(self.lo, self.knots, self.order)
        d_lo = bspline_basis_deriv(self.lo, self.knots, self.order)
        b_hi = bspline_basis(self.hi, self.knots, self.order)
        d_hi = bspline_basis_deriv(self.hi, self.knots, self.order)
        return b_lo, d_lo, b_hi, d_hi

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "intervals": self.intervals,
                "spline_order": self.spline_order}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(lo=float(d["lo"]), hi=float(d["hi"]), intervals=int(d["intervals"]),
                   spline_order=int(d["spline_order"]))


def effective_basis(x, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Coefficient weights and their x-derivatives, with linear extrapolation.

    Inside [lo, hi] these are the basis values and derivatives.  Outside, the
    spline is continued linearly from the boundary, so the weight on
    coefficient k becomes B_k(edge) + B_k'(edge) * (x - edge).
    """
    x = np.asarray(x, dtype=float)
    xc = np.clip(x, grid.lo, grid.hi)
    b = bspline_basis(xc, grid.knots, grid.order)
    db = bspline_basis_deriv(xc, grid.knots, grid.order)
    b_eff = b + db * (x - xc)[..., None]
    return b_eff, db


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_deriv(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


# --------------------------------------------------------------------------
# KAN activation and layer
# --------------------------------------------------------------------------

class KanActivation:
    """One learnable univariate edge function: w_base*silu(x) + w_spline*spline(x)."""

    def __init__(self, grid: GridSpec, coeffs: np.ndarray, w_base: float,
                 w_spline: float):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (grid.n_basis,):
            raise ValueError(f"expected {grid.n_basis} spline coefficients")
        self.grid = grid
        self.coeffs = coeffs
        self.w_base = float(w_base)
        self.w_spline = float(w_spline)

    def spline(self, x) -> np.ndarray:
        b_eff, _ = effective_basis(x, self.grid)
        return b_eff @ self.coeffs

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.w_base * silu(x) + self.w_spline * self.spline(x)

    def derivative(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        _, db = effective_basis(x, self.grid)
        return self.w_base * silu_deriv(x) + self.w_spline * (db @ self.coeffs)


class KanLayer:
    """Dense layer of univariate spline activations; outputs are plain sums.

    out[q] = sum_p phi_{q,p}(x[p]) with no bias and no output nonlinearity.
    """

    def __init__(self, in_dim: int, out_dim: int, grid: GridSpec | None = None,
                 rng: np.random.Generator | None = None, coeff_std: float = 0.1,
                 w_base_init: float = 1.0, w_spline_init: float = 1.0):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.grid = grid or GridSpec()
        if rng is None:
            coeffs = np.zeros((out_dim, in_dim, self.grid.n_basis))
        else:
            coeffs = rng.normal(0.0, coeff_std, size=(out_dim, in_dim, self.grid.n_basis))
        self.coeffs = coeffs
        self.w_base = np.full((out_dim, in_dim), float(w_base_init))
        self.w_spline = np.full((out_dim, in_dim), float(w_spline_init))
        self._cache = None

    def activation(self, p: int, q: int = 0) -> KanActivation:
        return KanActivation(self.grid, self.coeffs[q, p].copy(),
                             float(self.w_base[q, p]), float(self.w_spline[q, p]))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b_eff, db = effective_basis(x, self.grid)          # (B, in, nb)
        base = silu(x)                                     # (B, in)
        spline = np.einsum("oik,bik->boi", self.coeffs, b_eff)
        contrib = self.w_base[None] * base[:, None, :] + self.w_spline[None] * spline
        out = contrib.sum(axis=2)                          # (B, out)
        self._cache = {"x": x, "b_eff": b_eff, "db": db, "base": base,
                       "spline": spline}
        return out

    def backward(self, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        if self._cache is None:
            raise StateError("backward() before forward()")
        c = self._cache
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))   # (B, out)
        grads = {
            "coeffs": np.einsum("bo,oi,bik->oik", g, self.w_spline, c["b_eff"]),
            "w_base": np.einsum("bo,bi->oi", g, c["base"]),
            "w_spline": np.einsum("bo,boi->oi", g, c["spline"]),
        }
        dspline_dx = np.einsum("oik,bik->boi", self.coeffs, c["db"])
        dx = np.einsum("bo,oi,bi->bi", g, self.w_base, silu_deriv(c["x"])) + np.einsum(
            "bo,oi,boi->bi", g, self.w_spline, dspline_dx
        )
        return grads, dx

    def parameters(self) -> dict[str, np.ndarray]:
        return {"coeffs": self.coeffs, "w_base": self.w_base, "w_spline": self.w_spline}

    def to_dict(self) -> dict:
        return {
            "kind": "kan",
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "grid": self.grid.to_dict(),
            "coeffs": self.coeffs.tolist(),
            "w_base": self.w_base.tolist(),
            "w_spline": self.w_spline.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KanLayer":
        layer = cls(int(d["in_dim"]), int(d["out_dim"]),
                    grid=GridSpec.from_dict(d["grid"]))
        layer.coeffs = np.asarray(d["coeffs"], dtype=float)
        layer.w_base = np.asarray(d["w_base"], dtype=float)
        layer.w_spline = np.asarray(d["w_spline"], dtype=float)
        return layer


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((rows, cols))
    if rows < cols:
        a = a.T
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Mlp:
    """Fully connected tanh network with a linear output layer."""

    def __init__(self, sizes: tuple[int, ...], rng: np.random.Generator | None = None,
                 out_scale: float = 0.01):
        self.sizes = tuple(int(s) for s in sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for li in range(n_layers):
            rows, cols = self.sizes[li + 1], self.sizes[li]
            if rng is None:
                w = np.zeros((rows, cols))
            else:
                gain = out_scale if li == n_layers - 1 else math.sqrt(2.0)
                w = orthogonal(rng, rows, cols, gain)
            self.weights.append(w)
            self.biases.append(np.zeros(rows))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = x
        pre: list[np.ndarray] = []
        post: list[np.ndarray] = [h]
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            pre.append(z)
            h = z if li == last else np.tanh(z)
            post.append(h)
        self._cache = {"pre": pre, "post": post}
        return h

    def backward(self, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        if self._cache is None:
            raise StateError("backward() before forward()")
        pre, post = self._cache["pre"], self._cache["post"]
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        grads: dict[str, np.ndarray] = {}
        last = len(self.weights) - 1
        for li in range(last, -1, -1):
            if li != last:
                g = g * (1.0 - np.tanh(pre[li]) ** 2)
            grads[f"w{li}"] = g.T @ post[li]
            grads[f"b{li}"] = g.sum(axis=0)
            g = g @ self.weights[li]
        return grads, g

    def parameters(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"w{li}"] = w
            params[f"b{li}"] = b
        return params

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "sizes": list(self.sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        net = cls(tuple(d["sizes"]))
        net.weights = [np.asarray(w, dtype=float) for w in d["weights"]]
        net.biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        return net


# --------------------------------------------------------------------------
# Gaussian policy with clamped mean
# --------------------------------------------------------------------------

def clamp(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


class GaussianPolicy:
    """Scalar Gaussian policy: mean = clamp(net(obs)), state-independent std.

    Log-probabilities are evaluated on raw (unclipped) samples; the action
    sent to the environment is the sample clipped to [-1, 1].
    """

    def __init__(self, mean_net, log_std: float = 0.0):
        self.mean_net = mean_net
        self.log_std = np.array(float(log_std))
        self._cache = None

    def forward_mean(self, x: np.ndarray) -> np.ndarray:
        raw = self.mean_net.forward(x)[:, 0]
        mean = clamp(raw)
        self._cache = {"raw": raw, "mean": mean}
        return mean

    def log_prob(self, x: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mean = self.forward_mean(x)
        std = math.exp(float(self.log_std))
        z = (np.asarray(actions, dtype=float) - mean) / std
        self._cache.update({"z": z, "std": std, "actions": np.asarray(actions, float)})
        return -0.5 * z**2 - float(self.log_std) - 0.5 * LOG_2PI

    def last_raw(self) -> np.ndarray:
        """Pre-clamp mean outputs from the most recent forward pass."""
        if self._cache is None:
            raise StateError("no forward pass recorded")
        return self._cache["raw"]

    def backward_log_prob(self, upstream: np.ndarray,
                          raw_grad: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Gradients of sum(upstream * log_prob) w.r.t. policy parameters.

        `raw_grad` adds an extra gradient on the pre-clamp mean (used for the
        saturation penalty, which bypasses the clamp's dead zone).
        """
        if self._cache is None or "z" not in self._cache:
            raise StateError("backward_log_prob() before log_prob()")
        c = self._cache
        u = np.asarray(upstream, dtype=float)
        # d lp / d mean = z / std; the clamp passes gradient only strictly inside.
        inside = (c["raw"] > -1.0) & (c["raw"] < 1.0)
        g_raw = (u * c["z"] / c["std"]) * inside
        if raw_grad is not None:
            g_raw = g_raw + raw_grad
        net_grads, _ = self.mean_net.backward(g_raw[:, None])
        grads = {f"mean.{k}": v for k, v in net_grads.items()}
        grads["log_std"] = np.array(float(np.sum(u * (c["z"] ** 2 - 1.0))))
        return grads

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
        mean = float(self.forward_mean(np.asarray(obs, float)[None])[0])
        std = math.exp(float(self.log_std))
        action = rng.normal(mean, std)
        z = (action - mean) / std
        log_prob = -0.5 * z**2 - float(self.log_std) - 0.5 * LOG_2PI
        return float(action), float(log_prob)

    def act(self, obs: np.ndarray) -> float:
        """Deterministic clamped mean."""
        return float(self.forward_mean(np.asarray(obs, float)[None])[0])

    def entropy(self) -> float:
        return float(self.log_std) + 0.5 * (1.0 + LOG_2PI)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"mean.{k}": v for k, v in self.mean_net.parameters().items()}
        params["log_std"] = self.log_std
        return params


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

class Adam:
    """First-order adaptive-moment optimizer; updates parameters in place."""

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999),
                 eps: float = 1e-5):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g**2
            update = lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
            p -= update


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g) ** 2))
    return math.sqrt(total)


def clip_grads_(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to the given global norm; returns the raw norm."""
    norm = global_norm(grads)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path: str | Path, actor_kind: str, policy: GaussianPolicy,
                    critic: Mlp, meta: dict | None = None) -> Path:
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "actor_kind": actor_kind,
        "actor": policy.mean_net.to_dict(),
        "log_std": float(policy.log_std),
        "critic": critic.to_dict(),
        "meta": meta or {},
    }
    path = Path(path)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[str, GaussianPolicy, Mlp, dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: not a checkpoint file")
    actor_kind = payload["actor_kind"]
    actor_dict = payload["actor"]
    if actor_dict["kind"] == "kan":
        net = KanLayer.from_dict(actor_dict)
    else:
        net = Mlp.from_dict(actor_dict)
    policy = GaussianPolicy(net, log_std=payload["log_std"])
    critic = Mlp.from_dict(payload["critic"])
    return actor_kind, policy, critic, payload.get("meta", {})
