"""Scalar expression graphs with symbolic differentiation and reverse-mode gradients.

Expressions are immutable, hash-consed DAG nodes. Differentiation returns a new
expression graph over the same operation set, so it can be applied repeatedly
(derivatives of derivatives) to any order. Evaluation and gradient passes are
iterative and keep their scratch state in caller-owned dictionaries, so shared
graphs can be used from multiple threads.

Simplifications performed by the constructors are exact for finite operands
(identity/zero absorption, constant folding, double negation). No floating
point rewrite that could change rounding is applied.
"""

from __future__ import annotations

import itertools
import math
import weakref
from collections.abc import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expr",
    "ExprError",
    "UnboundVariableError",
    "NonFiniteError",
    "const",
    "input_var",
    "param_var",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "powi",
    "sin",
    "cos",
    "exp",
    "tanh",
    "elu",
    "differentiate",
    "evaluate",
    "gradient",
    "Evaluator",
    "node_count",
    "balanced_sum",
]


class ExprError(Exception):
    """Base error for expression construction and evaluation."""


class UnboundVariableError(ExprError):
    """A variable appearing in the graph was not given a value."""


class NonFiniteError(ExprError):
    """An evaluation or gradient pass produced inf or nan.

    The message names the offending node so singular operations
    (division by zero, overflowing exp) can be located.
    """


# Leaf kinds.
CONST = "const"
INPUT = "input"
PARAM = "param"

# Interior operations. POWI stores its integer exponent in the payload.
ADD, SUB, MUL, DIV = "add", "sub", "mul", "div"
NEG, SQUARE, POWI = "neg", "square", "powi"
SIN, COS, EXP, TANH = "sin", "cos", "exp", "tanh"
ELU = "elu"
# Derivative closure of elu: elu_d(x) = 1 for x >= 0 else e^x, and
# elu_dd(x) = 0 for x >= 0 else e^x (its own derivative thereafter).
ELU_D, ELU_DD = "elu_d", "elu_dd"

_UNARY_OPS = frozenset({NEG, SQUARE, SIN, COS, EXP, TANH, ELU, ELU_D, ELU_DD})
_BINARY_OPS = frozenset({ADD, SUB, MUL, DIV})

_uid_counter = itertools.count()
_pool: weakref.WeakValueDictionary = weakref.WeakValueDictionary()


class Expr:
    """One node of an expression DAG. Construct through the module functions."""

    __slots__ = ("op", "args", "payload", "uid", "__weakref__")

    op: str
    args: tuple["Expr", ...]
    payload: object  # float for consts, str name for variables, int for powi
    uid: int

    def __repr__(self) -> str:
        if self.op == CONST:
            return f"Expr({self.payload!r})"
        if self.op in (INPUT, PARAM):
            return f"Expr({self.op}:{self.payload})"
        return f"Expr({self.op}#{self.uid})"

    @property
    def name(self) -> str | None:
        if self.op in (INPUT, PARAM):
            return self.payload
        return None

    # Arithmetic sugar; floats are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return powi(self, n)


def _wrap(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float)):
        return const(float(value))
    raise TypeError(f"cannot use {type(value).__name__} in an expression")


def _intern(op: str, args: tuple[Expr, ...], payload) -> Expr:
    key = (op, payload, tuple(a.uid for a in args))
    node = _pool.get(key)
    if node is not None:
        return node
    node = Expr.__new__(Expr)
    node.op = op
    node.args = args
    node.payload = payload
    node.uid = next(_uid_counter)
    _pool[key] = node
    return node


def const(value: float) -> Expr:
    return _intern(CONST, (), float(value))


def input_var(name: str) -> Expr:
    """Spatial/input variable, differentiable with respect to."""
    return _intern(INPUT, (), str(name))


def param_var(name: str) -> Expr:
    """Trainable parameter variable."""
    return _intern(PARAM, (), str(name))


def _is_const(e: Expr, v: float | None = None) -> bool:
    if e.op != CONST:
        return False
    return v is None or e.payload == v


def _sorted_pair(a: Expr, b: Expr) -> tuple[Expr, Expr]:
    # Commutative operand ordering improves hash-consing hit rate; swapping
    # the operands of a single add/mul is exact in IEEE arithmetic.
    return (a, b) if a.uid <= b.uid else (b, a)


def add(a: Expr, b: Expr) -> Expr:
    a, b = _wrap(a), _wrap(b)
    if a.op == CONST and b.op == CONST:
        return const(a.payload + b.payload)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    a, b = _sorted_pair(a, b)
    return _intern(ADD, (a, b), None)


def sub(a: Expr, b: Expr) -> Expr:
    a, b = _wrap(a), _wrap(b)
    if a.op == CONST and b.op == CONST:
        return const(a.payload - b.payload)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if a is b:
        return const(0.0)
    return _intern(SUB, (a, b), None)


def mul(a: Expr, b: Expr) -> Expr:
    a, b = _wrap(a), _wrap(b)
    if a.op == CONST and b.op == CONST:
        return const(a.payload * b.payload)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    a, b = _sorted_pair(a, b)
    return _intern(MUL, (a, b), None)


def div(a: Expr, b: Expr) -> Expr:
    a, b = _wrap(a), _wrap(b)
    if a.op == CONST and b.op == CONST and b.payload != 0.0:
        return const(a.payload / b.payload)
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0):
        return const(0.0)
    return _intern(DIV, (a, b), None)


def neg(a: Expr) -> Expr:
    a = _wrap(a)
    if a.op == CONST:
        return const(-a.payload)
    if a.op == NEG:
        return a.args[0]
    return _intern(NEG, (a,), None)


def square(a: Expr) -> Expr:
    a = _wrap(a)
    if a.op == CONST:
        return const(a.payload * a.payload)
    if a.op == NEG:
        a = a.args[0]
    return _intern(SQUARE, (a,), None)


def powi(a: Expr, n: int) -> Expr:
    """Integer power with exponent n >= 0."""
    a = _wrap(a)
    if not isinstance(n, int) or isinstance(n, bool):
        raise ExprError(f"powi exponent must be an integer, got {n!r}")
    if n < 0:
        raise ExprError(f"powi exponent must be >= 0, got {n}")
    if n == 0:
        return const(1.0)
    if n == 1:
        return a
    if a.op == CONST:
        return const(_powi_value(a.payload, n))
    return _intern(POWI, (a,), n)


def _unary(op: str, a: Expr) -> Expr:
    a = _wrap(a)
    if a.op == CONST:
        return const(_UNARY_EVAL[op](a.payload))
    return _intern(op, (a,), None)


def sin(a: Expr) -> Expr:
    return _unary(SIN, a)


def cos(a: Expr) -> Expr:
    return _unary(COS, a)


def exp(a: Expr) -> Expr:
    return _unary(EXP, a)


def tanh(a: Expr) -> Expr:
    return _unary(TANH, a)


def elu(a: Expr) -> Expr:
    return _unary(ELU, a)


def balanced_sum(terms: Sequence[Expr]) -> Expr:
    """Sum a sequence as a balanced binary tree (depth O(log n))."""
    terms = list(terms)
    if not terms:
        return const(0.0)
    while len(terms) > 1:
        nxt = [add(terms[i], terms[i + 1]) for i in range(0, len(terms) - 1, 2)]
        if len(terms) % 2:
            nxt.append(terms[-1])
        terms = nxt
    return terms[0]


def _powi_value(x: float, n: int) -> float:
    # Binary exponentiation; fixed multiply order keeps results reproducible.
    acc = 1.0
    base = x
    while n:
        if n & 1:
            acc *= base
        base *= base
        n >>= 1
    return acc


def _elu_value(x: float) -> float:
    return x if x >= 0.0 else math.exp(x) - 1.0


def _elu_d_value(x: float) -> float:
    return 1.0 if x >= 0.0 else math.exp(x)


def _elu_dd_value(x: float) -> float:
    return 0.0 if x >= 0.0 else math.exp(x)


_UNARY_EVAL = {
    NEG: lambda x: -x,
    SQUARE: lambda x: x * x,
    SIN: math.sin,
    COS: math.cos,
    EXP: math.exp,
    TANH: math.tanh,
    ELU: _elu_value,
    ELU_D: _elu_d_value,
    ELU_DD: _elu_dd_value,
}

_BINARY_EVAL = {
    ADD: lambda a, b: a + b,
    SUB: lambda a, b: a - b,
    MUL: lambda a, b: a * b,
    DIV: lambda a, b: a / b if b != 0.0 else math.inf,
}


def topo_order(root: Expr) -> list[Expr]:
    """All reachable nodes in dependency order (children before parents)."""
    seen: set[int] = set()
    nodes: list[Expr] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.uid in seen:
            continue
        seen.add(node.uid)
        nodes.append(node)
        stack.extend(node.args)
    # Creation order is a topological order: constructors only take built args.
    nodes.sort(key=lambda n: n.uid)
    return nodes


def node_count(root: Expr) -> int:
    return len(topo_order(root))


def differentiate(root: Expr, var: Expr | str) -> Expr:
    """Symbolic derivative of root with respect to one variable.

    The result is an ordinary expression graph, so it can be differentiated
    again (any order, any mix of variables).
    """
    if isinstance(var, Expr):
        if var.op not in (INPUT, PARAM):
            raise ExprError("can only differentiate with respect to a variable")
        var_key = (var.op, var.payload)
    else:
        var_key = var  # match by name against either variable kind

    def is_var(node: Expr) -> bool:
        if node.op not in (INPUT, PARAM):
            return False
        if isinstance(var_key, tuple):
            return (node.op, node.payload) == var_key
        return node.payload == var_key

    d: dict[int, Expr] = {}
    zero = const(0.0)
    for node in topo_order(root):
        if node.op in (CONST, INPUT, PARAM):
            d[node.uid] = const(1.0) if is_var(node) else zero
            continue
        a = node.args[0]
        da = d[a.uid]
        if node.op == ADD:
            b = node.args[1]
            res = add(da, d[b.uid])
        elif node.op == SUB:
            b = node.args[1]
            res = sub(da, d[b.uid])
        elif node.op == MUL:
            b = node.args[1]
            res = add(mul(da, b), mul(a, d[b.uid]))
        elif node.op == DIV:
            b = node.args[1]
            db = d[b.uid]
            res = sub(div(da, b), div(mul(a, db), square(b)))
        elif node.op == NEG:
            res = neg(da)
        elif node.op == SQUARE:
            res = mul(mul(const(2.0), a), da)
        elif node.op == POWI:
            n = node.payload
            res = mul(mul(const(float(n)), powi(a, n - 1)), da)
        elif node.op == SIN:
            res = mul(cos(a), da)
        elif node.op == COS:
            res = neg(mul(sin(a), da))
        elif node.op == EXP:
            res = mul(node, da)
        elif node.op == TANH:
            res = mul(sub(const(1.0), square(node)), da)
        elif node.op == ELU:
            res = mul(_unary(ELU_D, a), da)
        elif node.op == ELU_D:
            res = mul(_unary(ELU_DD, a), da)
        elif node.op == ELU_DD:
            res = mul(_unary(ELU_DD, a), da)
        else:  # pragma: no cover
            raise ExprError(f"unknown operation {node.op}")
        d[node.uid] = res
    return d[root.uid]


def _node_label(node: Expr) -> str:
    if node.op in (INPUT, PARAM):
        return f"{node.op} '{node.payload}'"
    if node.op == CONST:
        return f"const {node.payload!r}"
    return f"{node.op} node #{node.uid}"


class Evaluator:
    """Reusable evaluator for one expression graph.

    Caches the topological order so repeated evaluations (finite-difference
    probes, per-point loops) avoid re-walking the graph. All per-call state
    lives in local dictionaries, so one Evaluator may be shared across threads.
    """

    def __init__(self, root: Expr):
        self.root = root
        self._order = topo_order(root)

    def values(self, bindings: Mapping[str, float]) -> dict[int, float]:
        """Forward pass; returns a map from node uid to value."""
        vals: dict[int, float] = {}
        for node in self._order:
            op = node.op
            if op == CONST:
                v = node.payload
            elif op in (INPUT, PARAM):
                try:
                    v = float(bindings[node.payload])
                except KeyError:
                    raise UnboundVariableError(
                        f"no value bound for {op} '{node.payload}'"
                    ) from None
            elif op == POWI:
                v = _powi_value(vals[node.args[0].uid], node.payload)
            elif op in _BINARY_OPS:
                v = _BINARY_EVAL[op](vals[node.args[0].uid], vals[node.args[1].uid])
            else:
                v = _UNARY_EVAL[op](vals[node.args[0].uid])
            if not math.isfinite(v):
                raise NonFiniteError(f"non-finite value at {_node_label(node)}")
            vals[node.uid] = v
        return vals

    def value(self, bindings: Mapping[str, float]) -> float:
        return self.values(bindings)[self.root.uid]

    def gradient(
        self, bindings: Mapping[str, float], wrt: Sequence[Expr | str]
    ) -> np.ndarray:
        """Reverse-mode gradient with respect to an ordered variable list."""
        vals = self.values(bindings)
        adj: dict[int, float] = {node.uid: 0.0 for node in self._order}
        adj[self.root.uid] = 1.0
        for node in reversed(self._order):
            a_bar = adj[node.uid]
            if a_bar == 0.0:
                continue
            op = node.op
            if op in (CONST, INPUT, PARAM):
                continue
            a = node.args[0]
            va = vals[a.uid]
            if op == ADD:
                b = node.args[1]
                adj[a.uid] += a_bar
                adj[b.uid] += a_bar
            elif op == SUB:
                b = node.args[1]
                adj[a.uid] += a_bar
                adj[b.uid] -= a_bar
            elif op == MUL:
                b = node.args[1]
                adj[a.uid] += a_bar * vals[b.uid]
                adj[b.uid] += a_bar * va
            elif op == DIV:
                b = node.args[1]
                vb = vals[b.uid]
                if vb == 0.0:
                    raise NonFiniteError(
                        f"division by zero in gradient at {_node_label(node)}"
                    )
                adj[a.uid] += a_bar / vb
                adj[b.uid] -= a_bar * va / (vb * vb)
            elif op == NEG:
                adj[a.uid] -= a_bar
            elif op == SQUARE:
                adj[a.uid] += a_bar * 2.0 * va
            elif op == POWI:
                n = node.payload
                adj[a.uid] += a_bar * n * _powi_value(va, n - 1)
            elif op == SIN:
                adj[a.uid] += a_bar * math.cos(va)
            elif op == COS:
                adj[a.uid] -= a_bar * math.sin(va)
            elif op == EXP:
                adj[a.uid] += a_bar * vals[node.uid]
            elif op == TANH:
                t = vals[node.uid]
                adj[a.uid] += a_bar * (1.0 - t * t)
            elif op == ELU:
                adj[a.uid] += a_bar * _elu_d_value(va)
            elif op == ELU_D:
                adj[a.uid] += a_bar * _elu_dd_value(va)
            elif op == ELU_DD:
                adj[a.uid] += a_bar * _elu_dd_value(va)
            if not math.isfinite(adj[a.uid]):
                raise NonFiniteError(f"non-finite adjoint at {_node_label(node)}")
        out = np.empty(len(wrt), dtype=np.float64)
        by_name: dict[str, float] | None = None
        for i, w in enumerate(wrt):
            if isinstance(w, Expr):
                out[i] = adj.get(w.uid, 0.0)
            else:
                if by_name is None:
                    by_name = {}
                    for node in self._order:
                        if node.op in (INPUT, PARAM):
                            by_name[node.payload] = adj[node.uid]
                out[i] = by_name.get(w, 0.0)
        return out


def evaluate(root: Expr, bindings: Mapping[str, float]) -> float:
    """Evaluate the expression with variables bound by name."""
    return Evaluator(root).value(bindings)


def gradient(
    root: Expr, bindings: Mapping[str, float], wrt: Sequence[Expr | str]
) -> np.ndarray:
    """Reverse-mode gradient of root with respect to the listed variables."""
    return Evaluator(root).gradient(bindings, wrt)


def free_variables(root: Expr) -> tuple[list[str], list[str]]:
    """Names of input and parameter variables reachable from root."""
    inputs: list[str] = []
    params: list[str] = []
    for node in topo_order(root):
        if node.op == INPUT:
            inputs.append(node.payload)
        elif node.op == PARAM:
            params.append(node.payload)
    return inputs, params
