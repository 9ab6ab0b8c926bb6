"""Symbolic controller expressions and both extraction paths.

An expression tree over a monotone basis (x, x^2, x^3, sqrt, exp, log, tanh)
plus arithmetic, with protected operators so evaluation is total.  Extraction
either regresses each trained spline activation onto an affine-wrapped basis
function, or distills a trajectory dataset with a small genetic-programming
search.  Extracted coefficients can be fine-tuned in place with PPO.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .neural import GaussianPolicy, KanLayer, Mlp
from .ppo import NonFiniteLoss, PpoConfig, train_loop
from .simnet import OBS_DIM, OBS_FIELDS

BIG = 1e12          # per-node output bound keeping every evaluation finite
DIV_EPS = 1e-6
LOG_EPS = 1e-6

UNARY_OPS = ("exp", "log", "sqrt", "tanh", "square", "cube")
BINARY_OPS = ("add", "sub", "mul", "div")

#: Monotone basis available to the activation regression.
BASIS_IDS = ("identity", "square", "cube", "sqrt", "exp", "log", "tanh")


# --------------------------------------------------------------------------
# Expression nodes
# --------------------------------------------------------------------------

class Expr:
    __slots__ = ()


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value: float):
        self.value = float(value)


class Input(Expr):
    __slots__ = ("index",)

    def __init__(self, index: int):
        if not 0 <= index < OBS_DIM:
            raise ValueError(f"input index {index} out of range")
        self.index = int(index)


class Unary(Expr):
    __slots__ = ("op", "child")

    def __init__(self, op: str, child: Expr):
        if op not in UNARY_OPS:
            raise ValueError(f"unknown unary op {op!r}")
        self.op = op
        self.child = child


class Binary(Expr):
    __slots__ = ("op", "a", "b")

    def __init__(self, op: str, a: Expr, b: Expr):
        if op not in BINARY_OPS:
            raise ValueError(f"unknown binary op {op!r}")
        self.op = op
        self.a = a
        self.b = b


class Affine(Expr):
    """c * fn(a * child + b) + d — the shape produced by activation regression."""

    __slots__ = ("fn", "a", "b", "c", "d", "child")

    def __init__(self, fn: str, a: float, b: float, c: float, d: float, child: Expr):
        if fn not in BASIS_IDS:
            raise ValueError(f"unknown basis fn {fn!r}")
        self.fn = fn
        self.a = float(a)
        self.b = float(b)
        self.c = float(c)
        self.d = float(d)
        self.child = child


def _apply_fn(fn: str, z: np.ndarray) -> np.ndarray:
    if fn == "identity":
        return z
    if fn == "square":
        return z * z
    if fn == "cube":
        return z * z * z
    if fn == "sqrt":
        return np.sqrt(np.maximum(z, 0.0))
    if fn == "exp":
        return np.exp(z)
    if fn == "log":
        return np.log(np.maximum(z, LOG_EPS))
    if fn == "tanh":
        return np.tanh(z)
    raise ValueError(fn)


def _apply_fn_deriv(fn: str, z: np.ndarray) -> np.ndarray:
    if fn == "identity":
        return np.ones_like(z)
    if fn == "square":
        return 2.0 * z
    if fn == "cube":
        return 3.0 * z * z
    if fn == "sqrt":
        return np.where(z > 1e-12, 0.5 / np.sqrt(np.maximum(z, 1e-12)), 0.0)
    if fn == "exp":
        return np.exp(np.minimum(z, 700.0))
    if fn == "log":
        return np.where(z > LOG_EPS, 1.0 / np.maximum(z, LOG_EPS), 0.0)
    if fn == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    raise ValueError(fn)


def _safe_den(b: np.ndarray) -> np.ndarray:
    return np.where(np.abs(b) < DIV_EPS, np.where(b < 0, -DIV_EPS, DIV_EPS), b)


def _bound(v: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        return np.clip(v, -BIG, BIG)


def eval_raw(expr: Expr, x: np.ndarray) -> np.ndarray:
    """Pre-clip evaluation over a (N, OBS_DIM) observation matrix."""
    with np.errstate(over="ignore"):
        return _eval(expr, x)


def _eval(node: Expr, x: np.ndarray) -> np.ndarray:
    if isinstance(node, Const):
        return np.full(x.shape[0], min(max(node.value, -BIG), BIG))
    if isinstance(node, Input):
        return x[:, node.index]
    if isinstance(node, Unary):
        return _bound(_apply_fn(node.op, _eval(node.child, x)))
    if isinstance(node, Binary):
        a = _eval(node.a, x)
        b = _eval(node.b, x)
        if node.op == "add":
            v = a + b
        elif node.op == "sub":
            v = a - b
        elif node.op == "mul":
            v = a * b
        else:
            v = a / _safe_den(b)
        return _bound(v)
    if isinstance(node, Affine):
        z = node.a * _eval(node.child, x) + node.b
        return _bound(node.c * _apply_fn(node.fn, z) + node.d)
    raise TypeError(f"not an expression node: {node!r}")


def eval_expr(expr: Expr, obs: np.ndarray) -> float | np.ndarray:
    """Evaluate the controller: tree value clipped to [-1, 1]."""
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    x = obs[None] if single else obs
    out = np.clip(eval_raw(expr, x), -1.0, 1.0)
    return float(out[0]) if single else out


def clone(node: Expr) -> Expr:
    if isinstance(node, Const):
        return Const(node.value)
    if isinstance(node, Input):
        return Input(node.index)
    if isinstance(node, Unary):
        return Unary(node.op, clone(node.child))
    if isinstance(node, Binary):
        return Binary(node.op, clone(node.a), clone(node.b))
    if isinstance(node, Affine):
        return Affine(node.fn, node.a, node.b, node.c, node.d, clone(node.child))
    raise TypeError(node)


def children(node: Expr) -> tuple[Expr, ...]:
    if isinstance(node, Unary):
        return (node.child,)
    if isinstance(node, Binary):
        return (node.a, node.b)
    if isinstance(node, Affine):
        return (node.child,)
    return ()


def size(node: Expr) -> int:
    return 1 + sum(size(c) for c in children(node))


def depth(node: Expr) -> int:
    kids = children(node)
    return 1 if not kids else 1 + max(depth(c) for c in kids)


def all_nodes(node: Expr) -> list[Expr]:
    out = [node]
    for c in children(node):
        out.extend(all_nodes(c))
    return out


# --------------------------------------------------------------------------
# Serialization: canonical s-expressions and a python-syntax infix rendering
# --------------------------------------------------------------------------

class ExprParseError(ValueError):
    """Malformed expression text; raised at load time, never at eval time."""


def to_sexpr(node: Expr) -> str:
    if isinstance(node, Const):
        return f"(const {node.value!r})"
    if isinstance(node, Input):
        return f"(input {node.index})"
    if isinstance(node, Unary):
        return f"({node.op} {to_sexpr(node.child)})"
    if isinstance(node, Binary):
        return f"({node.op} {to_sexpr(node.a)} {to_sexpr(node.b)})"
    if isinstance(node, Affine):
        return (f"(affine {node.fn} {node.a!r} {node.b!r} {node.c!r} {node.d!r} "
                f"{to_sexpr(node.child)})")
    raise TypeError(node)


def _tokenize(text: str) -> list[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def parse_sexpr(text: str) -> Expr:
    tokens = _tokenize(text)
    if not tokens:
        raise ExprParseError("empty expression")
    expr, rest = _parse_tokens(tokens)
    if rest:
        raise ExprParseError(f"trailing tokens: {rest[:3]}")
    return expr


def _parse_tokens(tokens: list[str]) -> tuple[Expr, list[str]]:
    if not tokens:
        raise ExprParseError("unexpected end of input")
    tok = tokens[0]
    if tok != "(":
        raise ExprParseError(f"expected '(', got {tok!r}")
    if len(tokens) < 2:
        raise ExprParseError("unexpected end of input")
    head = tokens[1]
    rest = tokens[2:]
    try:
        if head == "const":
            value, rest = _take_number(rest)
            rest = _expect_close(rest)
            return Const(value), rest
        if head == "input":
            value, rest = _take_number(rest)
            rest = _expect_close(rest)
            return Input(int(value)), rest
        if head in UNARY_OPS:
            child, rest = _parse_tokens(rest)
            rest = _expect_close(rest)
            return Unary(head, child), rest
        if head in BINARY_OPS:
            a, rest = _parse_tokens(rest)
            b, rest = _parse_tokens(rest)
            rest = _expect_close(rest)
            return Binary(head, a, b), rest
        if head == "affine":
            if not rest:
                raise ExprParseError("affine needs a basis id")
            fn, rest = rest[0], rest[1:]
            vals = []
            for _ in range(4):
                v, rest = _take_number(rest)
                vals.append(v)
            child, rest = _parse_tokens(rest)
            rest = _expect_close(rest)
            return Affine(fn, *vals, child), rest
    except ValueError as exc:
        raise ExprParseError(str(exc)) from exc
    raise ExprParseError(f"unknown operator {head!r}")


def _take_number(tokens: list[str]) -> tuple[float, list[str]]:
    if not tokens:
        raise ExprParseError("expected a number")
    try:
        return float(tokens[0]), tokens[1:]
    except ValueError as exc:
        raise ExprParseError(f"bad number {tokens[0]!r}") from exc


def _expect_close(tokens: list[str]) -> list[str]:
    if not tokens or tokens[0] != ")":
        raise ExprParseError("expected ')'")
    return tokens[1:]


def _inf(node: Expr) -> str:
    if isinstance(node, Const):
        return repr(node.value) if node.value >= 0 else f"({node.value!r})"
    if isinstance(node, Input):
        return OBS_FIELDS[node.index]
    if isinstance(node, Unary):
        if node.op == "square":
            return f"({_inf(node.child)})**2"
        if node.op == "cube":
            return f"({_inf(node.child)})**3"
        return f"{node.op}({_inf(node.child)})"
    if isinstance(node, Binary):
        sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[node.op]
        return f"({_inf(node.a)} {sym} {_inf(node.b)})"
    if isinstance(node, Affine):
        inner = f"{node.a!r}*{_inf(node.child)} + {node.b!r}"
        if node.fn == "identity":
            wrapped = f"({inner})"
        elif node.fn == "square":
            wrapped = f"({inner})**2"
        elif node.fn == "cube":
            wrapped = f"({inner})**3"
        else:
            wrapped = f"{node.fn}({inner})"
        return f"({node.c!r}*{wrapped} + {node.d!r})"
    raise TypeError(node)


def to_infix(node: Expr) -> str:
    """Human-readable rendering using observation field names; re-parseable."""
    return _inf(node)


_INFIX_CALLS = {"exp", "log", "sqrt", "tanh"}


def parse_infix(text: str) -> Expr:
    """Parse a python-syntax controller expression over the observation names."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExprParseError(str(exc)) from exc
    return _from_ast(tree.body)


def _from_ast(node: ast.AST) -> Expr:
    if isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ExprParseError(f"bad constant {node.value!r}")
        return Const(float(node.value))
    if isinstance(node, ast.Name):
        if node.id in OBS_FIELDS:
            return Input(OBS_FIELDS.index(node.id))
        if node.id.startswith("x") and node.id[1:].isdigit():
            return Input(int(node.id[1:]))
        raise ExprParseError(f"unknown name {node.id!r}")
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        return Binary("sub", Const(0.0), _from_ast(node.operand))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.UAdd):
        return _from_ast(node.operand)
    if isinstance(node, ast.BinOp):
        if isinstance(node.op, ast.Pow):
            if not (isinstance(node.right, ast.Constant) and node.right.value in (2, 3)):
                raise ExprParseError("only **2 and **3 are supported")
            op = "square" if node.right.value == 2 else "cube"
            return Unary(op, _from_ast(node.left))
        ops = {ast.Add: "add", ast.Sub: "sub", ast.Mult: "mul", ast.Div: "div"}
        for ast_op, name in ops.items():
            if isinstance(node.op, ast_op):
                return Binary(name, _from_ast(node.left), _from_ast(node.right))
        raise ExprParseError(f"unsupported operator {node.op!r}")
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _INFIX_CALLS:
            raise ExprParseError("unsupported call")
        if len(node.args) != 1 or node.keywords:
            raise ExprParseError("calls take exactly one argument")
        return Unary(node.func.id, _from_ast(node.args[0]))
    raise ExprParseError(f"unsupported syntax {ast.dump(node)}")


# --------------------------------------------------------------------------
# Built-in reference controllers
# --------------------------------------------------------------------------

_REFERENCE_INFIX = {
    # Utility-oriented additive controller (activation regression lineage).
    "eq3": "1.3 - lam/5 - (0.9*dlam + 1)**2/3 - 2*lam_i/5"
           " + 3*(d_i10 + 0.6)**2/32 - 3*l_i10/32",
    # Loss-oriented additive controller.
    "eq4": "1.9 - 1.1*(2*dlam/3 + 1)**2 - 2*lam_i/5 + d_i10/3 + u_i/10",
    # Utility-oriented compact controller (distillation lineage).
    "eq5": "(2.0 - 8*dlam - 2*d_m10 - l_i10) / exp(lam_i - u_i)",
    # Loss-oriented compact controller.
    "eq6": "exp(-((11*dlam + l_i10)**2) / 4)",
}

REFERENCE_IDS = tuple(sorted(_REFERENCE_INFIX))


def reference_policy(policy_id: str) -> Expr:
    """One of the built-in controller equations, as an expression tree."""
    try:
        return parse_infix(_REFERENCE_INFIX[policy_id])
    except KeyError:
        raise ValueError(f"unknown reference policy {policy_id!r}; "
                         f"choose from {REFERENCE_IDS}") from None


class ExprPolicy:
    """Adapter giving an expression the policy interface."""

    def __init__(self, expr: Expr, policy_id: str = "expr"):
        self.expr = expr
        self.policy_id = policy_id

    def act(self, obs: np.ndarray) -> float:
        return float(eval_expr(self.expr, obs))


# --------------------------------------------------------------------------
# Activation regression (KAN-symbolic)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineSearch:
    """Deterministic grid over the inner affine parameters (a, b)."""

    a_min: float = 0.1
    a_max: float = 5.0
    a_steps: int = 32
    b_min: float = -2.0
    b_max: float = 2.0
    b_steps: int = 33


@dataclass
class ActivationFit:
    input_index: int
    basis: str
    a: float
    b: float
    c: float
    d: float
    r_squared: float
    importance: float = 0.0


def sample_activations(layer: KanLayer, states: np.ndarray,
                       output: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-input (x, phi(x)) samples of the trained activations over states."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] == 0:
        raise ValueError("state set must be non-empty")
    out = []
    for p in range(layer.in_dim):
        act = layer.activation(p, output)
        xs = states[:, p].copy()
        out.append((xs, act.value(xs)))
    return out


def _ls_cd(z: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Closed-form least squares of y ~ c*z + d; returns (c, d, sse)."""
    zm = z.mean()
    ym = y.mean()
    dz = z - zm
    var = float(dz @ dz)
    if var < 1e-18 or not math.isfinite(var):
        d = ym
        resid = y - d
        return 0.0, float(d), float(resid @ resid)
    c = float(dz @ (y - ym)) / var
    d = float(ym - c * zm)
    resid = y - (c * z + d)
    return c, d, float(resid @ resid)


def fit_activation(xs: np.ndarray, ys: np.ndarray,
                   basis_ids: tuple[str, ...] = BASIS_IDS,
                   search: AffineSearch = AffineSearch(),
                   input_index: int = -1) -> ActivationFit:
    """Best affine-wrapped basis fit c*f(a*x+b)+d by grid search over (a, b).

    (c, d) come from closed-form least squares at every grid cell; the best
    cell is refined once with a finer local grid.  Degenerate samples (no
    input or output variance) collapse to a constant fit with R^2 = 1.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 20:
        raise ValueError("need at least 20 samples")
    if float(xs.std()) == 0.0 or float(ys.std()) == 0.0:
        return ActivationFit(input_index, "const", 0.0, 0.0, 0.0,
                             float(ys.mean()), 1.0)

    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    a_grid = np.geomspace(search.a_min, search.a_max, search.a_steps)
    b_grid = np.linspace(search.b_min, search.b_max, search.b_steps)

    def scan(fn: str, a_values: np.ndarray, b_values: np.ndarray):
        best = None
        with np.errstate(over="ignore", invalid="ignore"):
            for a in a_values:
                za = a * xs
                for b in b_values:
                    z = _apply_fn(fn, za + b)
                    if not np.isfinite(z).all():
                        continue
                    c, d, sse = _ls_cd(z, ys)
                    if best is None or sse < best[0]:
                        best = (sse, float(a), float(b), c, d)
        return best

    overall = None
    for fn in basis_ids:
        best = scan(fn, a_grid, b_grid)
        if best is None:
            continue
        # One local refinement pass around the winning cell.
        _, a0, b0, _, _ = best
        a_step = a_grid[1] / a_grid[0]
        b_step = b_grid[1] - b_grid[0]
        fine_a = np.geomspace(max(a0 / a_step, 1e-6), a0 * a_step, 17)
        fine_b = np.linspace(b0 - b_step, b0 + b_step, 17)
        refined = scan(fn, fine_a, fine_b)
        if refined is not None and refined[0] < best[0]:
            best = refined
        if overall is None or best[0] < overall[0]:
            overall = (*best, fn)

    sse, a, b, c, d, fn = overall
    r2 = 1.0 - sse / ss_tot
    return ActivationFit(input_index, fn, a, b, c, d, float(r2))


class ExtractionError(ValueError):
    """Extraction could not produce a usable expression."""


def extract_kan_symbolic(layer: KanLayer, states: np.ndarray,
                         importance_threshold: float = 0.05,
                         search: AffineSearch = AffineSearch(),
                         output: int = 0) -> tuple[Expr, dict]:
    """Fit every input's activation, prune the unimportant ones, sum the rest.

    Importance is the standard deviation of an activation's output over the
    visited states; inputs below threshold * max importance are dropped and
    their mean contribution is folded into a constant so pruning does not
    shift the controller's operating point.
    """
    samples = sample_activations(layer, states, output)
    fits: list[ActivationFit] = []
    means = []
    for p, (xs, ys) in enumerate(samples):
        fit = fit_activation(xs, ys, search=search, input_index=p)
        fit.importance = float(ys.std())
        fits.append(fit)
        means.append(float(ys.mean()))

    max_importance = max(f.importance for f in fits)
    cutoff = importance_threshold * max_importance
    retained_idx = {
        f.input_index for f in fits
        if f.importance >= cutoff and f.basis != "const"
    }
    if not retained_idx:
        raise ExtractionError(
            "all inputs pruned; lower the importance threshold"
        )

    offset = sum(means[f.input_index] for f in fits
                 if f.input_index not in retained_idx)
    terms: list[Expr] = [
        Affine(f.basis, f.a, f.b, f.c, f.d, Input(f.input_index))
        for f in fits if f.input_index in retained_idx
    ]
    expr: Expr = terms[0]
    for term in terms[1:]:
        expr = Binary("add", expr, term)
    if offset != 0.0:
        expr = Binary("add", expr, Const(offset))

    preds = eval_raw(expr, states)
    target = layer.forward(states)[:, output]
    ss_tot = float(((target - target.mean()) ** 2).sum())
    ss_res = float(((target - preds) ** 2).sum())
    report = {
        "method": "kan-symbolic",
        "importance_threshold": importance_threshold,
        "r_squared": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0,
        "terms": [
            {
                "input": f.input_index,
                "field": OBS_FIELDS[f.input_index],
                "basis": f.basis,
                "a": f.a, "b": f.b, "c": f.c, "d": f.d,
                "r_squared": f.r_squared,
                "importance": f.importance,
                "retained": f.input_index in retained_idx,
            }
            for f in fits
        ],
    }
    return expr, report


def uniform_grid_states(lo: np.ndarray | float, hi: np.ndarray | float,
                        n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random observation matrix, the grid-mode sampling source."""
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (OBS_DIM,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (OBS_DIM,))
    return rng.uniform(lo, hi, size=(n, OBS_DIM))


# --------------------------------------------------------------------------
# GP distillation (PPO-DS)
# --------------------------------------------------------------------------

@dataclass
class DistillConfig:
    dataset_size: int = 2000
    population: int = 500
    generations: int = 60
    tournament: int = 5
    max_depth: int = 6
    penalty: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        for name in ("dataset_size", "population", "generations", "tournament"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_depth < 2:
            raise ConfigError("max_depth must be >= 2")
        if self.penalty < 0:
            raise ConfigError("penalty must be non-negative")


def _random_terminal(rng: np.random.Generator) -> Expr:
    if rng.random() < 0.7:
        return Input(int(rng.integers(OBS_DIM)))
    return Const(float(rng.uniform(-2.0, 2.0)))


def _random_expr(rng: np.random.Generator, max_depth: int, full: bool) -> Expr:
    if max_depth <= 1 or (not full and rng.random() < 0.3):
        return _random_terminal(rng)
    if rng.random() < 0.6:
        op = BINARY_OPS[int(rng.integers(len(BINARY_OPS)))]
        return Binary(op, _random_expr(rng, max_depth - 1, full),
                      _random_expr(rng, max_depth - 1, full))
    op = UNARY_OPS[int(rng.integers(len(UNARY_OPS)))]
    return Unary(op, _random_expr(rng, max_depth - 1, full))


def _node_slots(root: Expr) -> list[tuple[Expr | None, str | None, Expr]]:
    """(parent, field, node) triples; the root has no parent."""
    out: list[tuple[Expr | None, str | None, Expr]] = [(None, None, root)]
    stack = [root]
    while stack:
        node = stack.pop()
        if isinstance(node, Unary) or isinstance(node, Affine):
            out.append((node, "child", node.child))
            stack.append(node.child)
        elif isinstance(node, Binary):
            out.append((node, "a", node.a))
            out.append((node, "b", node.b))
            stack.append(node.a)
            stack.append(node.b)
    return out


def _replace_subtree(root: Expr, rng: np.random.Generator, donor: Expr) -> Expr:
    new_root = clone(root)
    slots = _node_slots(new_root)
    parent, fieldname, _ = slots[int(rng.integers(len(slots)))]
    if parent is None:
        return clone(donor)
    setattr(parent, fieldname, clone(donor))
    return new_root


def _crossover(rng: np.random.Generator, p1: Expr, p2: Expr) -> Expr:
    donor_slots = _node_slots(p2)
    donor = donor_slots[int(rng.integers(len(donor_slots)))][2]
    return _replace_subtree(p1, rng, donor)


def _mutate_subtree(rng: np.random.Generator, p: Expr, max_depth: int) -> Expr:
    donor = _random_expr(rng, max(2, max_depth - 2), full=False)
    return _replace_subtree(p, rng, donor)


def _mutate_const(rng: np.random.Generator, p: Expr) -> Expr:
    new = clone(p)
    consts = [n for n in all_nodes(new) if isinstance(n, Const)]
    if not consts:
        return new
    node = consts[int(rng.integers(len(consts)))]
    scale = 10.0 ** rng.uniform(-1.5, 0.5)
    node.value = float(node.value + rng.normal(0.0, scale))
    return new


def _mutate_point(rng: np.random.Generator, p: Expr) -> Expr:
    """Swap one node's operator (or input index) in place, keeping children."""
    new = clone(p)
    node = all_nodes(new)[int(rng.integers(size(new)))]
    if isinstance(node, Binary):
        node.op = BINARY_OPS[int(rng.integers(len(BINARY_OPS)))]
    elif isinstance(node, Unary):
        node.op = UNARY_OPS[int(rng.integers(len(UNARY_OPS)))]
    elif isinstance(node, Input):
        node.index = int(rng.integers(OBS_DIM))
    elif isinstance(node, Const):
        node.value = float(rng.uniform(-2.0, 2.0))
    return new


def _mse(expr: Expr, x: np.ndarray, y: np.ndarray) -> float:
    preds = np.clip(eval_raw(expr, x), -1.0, 1.0)
    err = preds - y
    val = float(err @ err) / y.size
    return val if math.isfinite(val) else float("inf")


def polish_constants(expr: Expr, x: np.ndarray, y: np.ndarray, iters: int = 150,
                     lr: float = 0.05) -> tuple[Expr, float]:
    """Gradient-descent refinement of an expression's numeric constants.

    Deterministic; returns the best constants seen and their clipped MSE.
    Expressions without constants are returned unchanged.
    """
    try:
        net = ExprMeanNet(expr)
    except ValueError:
        return clone(expr), _mse(expr, x, y)
    from .neural import Adam  # local import to avoid a cycle at module load

    opt = Adam(net.parameters(), eps=1e-8)
    consts = net.parameters()["consts"]
    best = (np.inf, consts.copy())
    n = y.size
    for _ in range(iters):
        raw = net.forward(x)[:, 0]
        pred = np.clip(raw, -1.0, 1.0)
        err = pred - y
        loss = float(err @ err) / n
        if not math.isfinite(loss):
            break
        if loss < best[0]:
            best = (loss, consts.copy())
        inside = (raw > -1.0) & (raw < 1.0)
        upstream = (2.0 / n) * err * inside
        grads, _ = net.backward(upstream[:, None])
        if not np.isfinite(grads["consts"]).all():
            break
        opt.step(grads, lr)
    if best[0] < np.inf:
        consts[...] = best[1]
    net.sync_tree()
    polished = net.expression()
    return polished, _mse(polished, x, y)


def distill_ppo_ds(x: np.ndarray, y: np.ndarray,
                   config: DistillConfig) -> tuple[Expr, dict]:
    """Genetic-programming search for a compact expression matching (x, y).

    Selection pressure is pure MSE (ties break toward smaller trees); the
    complexity penalty enters only when the final answer is chosen from the
    per-size archive of best expressions, so the search trajectory does not
    depend on the penalty and a larger penalty can never grow the result.
    """
    config.validate()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] < 500:
        raise ValueError("dataset must hold at least 500 samples")
    rng = np.random.default_rng(config.seed)
    n = y.size

    archive: dict[int, tuple[float, Expr]] = {}

    def record(s: int, fit: float, builder) -> None:
        best = archive.get(s)
        if best is None or fit < best[0]:
            archive[s] = (fit, builder())

    def evaluate(expr: Expr) -> float:
        """Fitness with linear scaling: the candidate's best affine wrap.

        Both the bare expression and, when it helps, the wrapped form
        a*expr + b (with closed-form a, b) are archived under their own
        sizes; selection sees the better of the two scores.
        """
        raw = eval_raw(expr, x)
        err = np.clip(raw, -1.0, 1.0) - y
        direct = float(err @ err) / n
        if not math.isfinite(direct):
            return float("inf")
        s = size(expr)
        record(s, direct, lambda: clone(expr))
        a, b, _ = _ls_cd(raw, y)
        if a != 0.0 and math.isfinite(a) and math.isfinite(b):
            werr = np.clip(a * raw + b, -1.0, 1.0) - y
            wrapped = float(werr @ werr) / n
            if math.isfinite(wrapped) and wrapped < direct:
                record(s + 4, wrapped,
                       lambda: Binary("add", Binary("mul", Const(a), clone(expr)),
                                      Const(b)))
                return wrapped
        return direct

    pop: list[Expr] = []
    depths = list(range(2, config.max_depth + 1))
    for i in range(config.population):
        d = depths[i % len(depths)]
        pop.append(_random_expr(rng, d, full=(i % 2 == 0)))
    fits = [evaluate(e) for e in pop]
    sizes = [size(e) for e in pop]

    def better(i: int, j: int) -> bool:
        if fits[i] != fits[j]:
            return fits[i] < fits[j]
        return sizes[i] < sizes[j]

    def tournament() -> Expr:
        best = int(rng.integers(len(pop)))
        for _ in range(config.tournament - 1):
            cand = int(rng.integers(len(pop)))
            if better(cand, best):
                best = cand
        return pop[best]

    for _ in range(config.generations):
        elite = 0
        for i in range(1, len(pop)):
            if better(i, elite):
                elite = i
        new_pop = [clone(pop[elite])]
        while len(new_pop) < config.population:
            r = rng.random()
            if r < 0.65:
                child = _crossover(rng, tournament(), tournament())
            elif r < 0.80:
                child = _mutate_subtree(rng, tournament(), config.max_depth)
            elif r < 0.90:
                child = _mutate_point(rng, tournament())
            elif r < 0.96:
                child = _mutate_const(rng, tournament())
            else:
                child = _random_expr(rng, config.max_depth, full=False)
            if depth(child) > config.max_depth:
                child = clone(tournament())
            new_pop.append(child)
        pop = new_pop
        fits = [evaluate(e) for e in pop]
        sizes = [size(e) for e in pop]

    # Refine each archived shape's constants before the penalized selection;
    # the refinement reads only (expression, data), never the penalty.
    for s in sorted(archive):
        fit, expr = archive[s]
        polished, polished_fit = polish_constants(expr, x, y)
        if polished_fit < fit and size(polished) == s:
            archive[s] = (polished_fit, polished)

    best_size, (best_mse, best_expr) = min(
        archive.items(), key=lambda kv: (kv[1][0] + config.penalty * kv[0], kv[0])
    )
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - best_mse * y.size / ss_tot if ss_tot > 0 else 1.0
    report = {
        "method": "ppo-ds",
        "mse": best_mse,
        "r_squared": r2,
        "size": best_size,
        "depth": depth(best_expr),
        "penalty": config.penalty,
        "n_train": int(y.size),
    }
    return best_expr, report


# --------------------------------------------------------------------------
# Coefficient fine-tuning via PPO
# --------------------------------------------------------------------------

class ExprMeanNet:
    """Expression tree as a mean network: its constants are the parameters."""

    def __init__(self, expr: Expr):
        self.expr = clone(expr)
        self._slots: list[tuple[Expr, str]] = []
        for node in all_nodes(self.expr):
            if isinstance(node, Const):
                self._slots.append((node, "value"))
            elif isinstance(node, Affine):
                for name in ("a", "b", "c", "d"):
                    self._slots.append((node, name))
        if not self._slots:
            raise ValueError("expression has no numeric constants to tune")
        self._consts = np.array([getattr(n, f) for n, f in self._slots])
        self._cache = None

    @property
    def n_constants(self) -> int:
        return len(self._slots)

    def sync_tree(self) -> None:
        for (node, fieldname), v in zip(self._slots, self._consts):
            setattr(node, fieldname, float(v))

    def expression(self) -> Expr:
        self.sync_tree()
        return clone(self.expr)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"consts": self._consts}

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.sync_tree()
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tape: dict[int, np.ndarray] = {}
        with np.errstate(over="ignore", invalid="ignore"):
            out = self._fwd(self.expr, x, tape)
        self._cache = {"x": x, "tape": tape}
        return out[:, None]

    def backward(self, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], None]:
        if self._cache is None:
            raise RuntimeError("backward() before forward()")
        grads = np.zeros_like(self._consts)
        slot_index = {(id(n), f): i for i, (n, f) in enumerate(self._slots)}
        up = np.atleast_2d(np.asarray(grad_out, dtype=float))[:, 0]
        with np.errstate(over="ignore", invalid="ignore"):
            self._bwd(self.expr, up, self._cache["tape"], self._cache["x"], grads,
                      slot_index)
        return {"consts": grads}, None

    def _fwd(self, node: Expr, x: np.ndarray, tape: dict) -> np.ndarray:
        if isinstance(node, Const):
            out = np.full(x.shape[0], min(max(node.value, -BIG), BIG))
        elif isinstance(node, Input):
            out = x[:, node.index]
        elif isinstance(node, Unary):
            tape[id(node.child)] = self._fwd(node.child, x, tape)
            out = _bound(_apply_fn(node.op, tape[id(node.child)]))
        elif isinstance(node, Binary):
            a = self._fwd(node.a, x, tape)
            b = self._fwd(node.b, x, tape)
            tape[id(node.a)] = a
            tape[id(node.b)] = b
            if node.op == "add":
                out = a + b
            elif node.op == "sub":
                out = a - b
            elif node.op == "mul":
                out = a * b
            else:
                out = a / _safe_den(b)
            out = _bound(out)
        elif isinstance(node, Affine):
            child = self._fwd(node.child, x, tape)
            tape[id(node.child)] = child
            out = _bound(node.c * _apply_fn(node.fn, node.a * child + node.b) + node.d)
        else:
            raise TypeError(node)
        tape[id(node)] = out
        return out

    def _bwd(self, node: Expr, up: np.ndarray, tape: dict, x: np.ndarray,
             grads: np.ndarray, slot_index: dict) -> None:
        up = up * (np.abs(tape[id(node)]) < BIG)
        if isinstance(node, Const):
            grads[slot_index[(id(node), "value")]] += float(up.sum())
            return
        if isinstance(node, Input):
            return
        if isinstance(node, Unary):
            z = tape[id(node.child)]
            self._bwd(node.child, up * _apply_fn_deriv(node.op, z), tape, x,
                      grads, slot_index)
            return
        if isinstance(node, Binary):
            a = tape[id(node.a)]
            b = tape[id(node.b)]
            if node.op == "add":
                ga, gb = up, up
            elif node.op == "sub":
                ga, gb = up, -up
            elif node.op == "mul":
                ga, gb = up * b, up * a
            else:
                den = _safe_den(b)
                live = np.abs(b) >= DIV_EPS
                ga = up / den
                gb = -up * a / (den * den) * live
            self._bwd(node.a, ga, tape, x, grads, slot_index)
            self._bwd(node.b, gb, tape, x, grads, slot_index)
            return
        if isinstance(node, Affine):
            child = tape[id(node.child)]
            z = node.a * child + node.b
            f = _bound(_apply_fn(node.fn, z))
            df = _bound(_apply_fn_deriv(node.fn, z))
            grads[slot_index[(id(node), "c")]] += float((up * f).sum())
            grads[slot_index[(id(node), "d")]] += float(up.sum())
            grads[slot_index[(id(node), "a")]] += float((up * node.c * df * child).sum())
            grads[slot_index[(id(node), "b")]] += float((up * node.c * df).sum())
            self._bwd(node.child, up * node.c * df * node.a, tape, x, grads,
                      slot_index)
            return
        raise TypeError(node)

    def to_dict(self) -> dict:
        return {"kind": "symbolic", "sexpr": to_sexpr(self.expression())}


@dataclass
class FinetuneResult:
    expr: Expr
    reward_before: float
    reward_after: float
    log: list[dict]


def _mean_episode_reward(env, policy_act, config_factory, reward_kind: str,
                         episodes: int, seed_base: int) -> float:
    totals = []
    for i in range(episodes):
        rng = np.random.default_rng(seed_base + i)
        obs = env.reset(config_factory(rng))
        total = 0.0
        done = False
        while not done:
            out = env.step(policy_act(obs))
            total += out.reward_loss if reward_kind == "loss" else out.reward_utility
            obs = out.obs
            done = out.done
        totals.append(total)
    return float(np.mean(totals))


def finetune_coeffs(expr: Expr, env, config: PpoConfig, config_factory,
                    init_log_std: float = 0.0, eval_episodes: int = 20,
                    eval_seed_base: int = 10_000) -> FinetuneResult:
    """Continue PPO on the expression's constants, structure frozen.

    On non-finite training the best-scoring constants seen so far are kept.
    Returns the tuned expression plus mean episode rewards before and after.
    """
    net = ExprMeanNet(expr)
    before = _mean_episode_reward(
        env, lambda obs: float(eval_expr(net.expression(), obs)),
        config_factory, config.reward_kind, eval_episodes, eval_seed_base,
    )

    policy = GaussianPolicy(net, log_std=init_log_std)
    critic = Mlp((OBS_DIM, 64, 64, 1),
                 rng=np.random.default_rng(np.random.SeedSequence([config.seed, 2])))
    try:
        result = train_loop(env, policy, critic, config, config_factory,
                            actor_kind="symbolic")
        log = result.log
    except NonFiniteLoss:
        log = []
    if not np.isfinite(net._consts).all():
        raise ExtractionError("fine-tuning produced non-finite constants")

    tuned = net.expression()
    after = _mean_episode_reward(
        env, lambda obs: float(eval_expr(tuned, obs)),
        config_factory, config.reward_kind, eval_episodes, eval_seed_base,
    )
    return FinetuneResult(tuned, before, after, log)
