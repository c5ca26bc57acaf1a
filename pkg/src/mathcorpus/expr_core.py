"""Tokens, token libraries, expression trees, and the pre-order traversal encoding.

Every other module speaks these types.  A traversal is a sequence of indices
into a Library; it encodes exactly one tree when the running slot count
1 + sum(arity - 1) first hits zero at the end of the sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

OPERATOR = "operator"
VARIABLE = "variable"
CONSTANT = "constant"
PLACEHOLDER = "placeholder"

_KINDS = (OPERATOR, VARIABLE, CONSTANT, PLACEHOLDER)


class ExprError(Exception):
    """Base class for expression-level errors."""


class UnknownToken(ExprError):
    def __init__(self, name):
        super().__init__(f"token {name!r} not in library")
        self.name = name


class IncompleteTraversal(ExprError):
    pass


class InvalidPrefix(ExprError):
    pass


class UnboundVariable(ExprError):
    def __init__(self, name):
        super().__init__(f"variable {name!r} is not bound")
        self.name = name


class _InvalidValue:
    """Sentinel for evaluations that hit a domain error or non-finite value.

    A value rather than an exception so batch evaluation can count invalid
    expressions cheaply.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Invalid"

    def __bool__(self):
        return False


INVALID = _InvalidValue()


@dataclass(frozen=True)
class Token:
    name: str
    arity: int
    kind: str
    infix_form: str | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("token name must be non-empty")
        if self.kind not in _KINDS:
            raise ValueError(f"unknown token kind {self.kind!r}")
        if self.arity < 0:
            raise ValueError("arity must be non-negative")
        if (self.arity == 0) != (self.kind != OPERATOR):
            raise ValueError(
                f"token {self.name!r}: arity 0 iff kind is variable/constant/placeholder"
            )

    @property
    def is_terminal(self):
        return self.arity == 0


class Library:
    """Ordered token collection with name lookup.

    Order matters: MLM and controller logits are indexed by library position.
    """

    def __init__(self, tokens, name="custom"):
        self.tokens = list(tokens)
        self.name = name
        self.index = {}
        for i, tok in enumerate(self.tokens):
            if tok.name in self.index:
                raise ValueError(f"duplicate token name {tok.name!r}")
            self.index[tok.name] = i
        if not any(t.arity == 0 for t in self.tokens):
            raise ValueError("library needs at least one terminal token")

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __contains__(self, name):
        return name in self.index

    def __getitem__(self, i):
        return self.tokens[i]

    def get(self, name):
        try:
            return self.tokens[self.index[name]]
        except KeyError:
            raise UnknownToken(name) from None

    def index_of(self, name):
        try:
            return self.index[name]
        except KeyError:
            raise UnknownToken(name) from None

    def arities(self):
        return [t.arity for t in self.tokens]

    def terminal_indices(self):
        return [i for i, t in enumerate(self.tokens) if t.arity == 0]


@dataclass
class ExprTree:
    root: Token
    children: list["ExprTree"] = field(default_factory=list)

    def __post_init__(self):
        if len(self.children) != self.root.arity:
            raise ValueError(
                f"token {self.root.name!r} has arity {self.root.arity}, "
                f"got {len(self.children)} children"
            )

    def __eq__(self, other):
        if not isinstance(other, ExprTree):
            return NotImplemented
        return self.root == other.root and self.children == other.children

    def __repr__(self):
        if not self.children:
            return self.root.name
        return f"{self.root.name}({', '.join(map(repr, self.children))})"

    def size(self):
        return 1 + sum(c.size() for c in self.children)

    def depth(self):
        if not self.children:
            return 1
        return 1 + max(c.depth() for c in self.children)

    def iter_nodes(self):
        yield self
        for c in self.children:
            yield from c.iter_nodes()


def node(token, *children):
    return ExprTree(token, list(children))


@dataclass(frozen=True)
class Traversal:
    seq: tuple

    def __init__(self, seq):
        object.__setattr__(self, "seq", tuple(seq))

    def __len__(self):
        return len(self.seq)

    def __iter__(self):
        return iter(self.seq)

    def __getitem__(self, i):
        return self.seq[i]

    def token_names(self, lib):
        return [lib[i].name for i in self.seq]


def dangling_slots(t, lib):
    """Running slot count after consuming every token; negative means overrun."""
    d = 1
    for idx in t:
        d += lib[idx].arity - 1
    return d


def is_valid_prefix(t, lib):
    d = 1
    for idx in t:
        if d <= 0:
            return False
        d += lib[idx].arity - 1
    return True


def is_complete(t, lib):
    if len(t) == 0:
        return False
    d = 1
    for k, idx in enumerate(t):
        d += lib[idx].arity - 1
        if d == 0:
            return k == len(t) - 1
        if d < 0:
            return False
    return False


def tree_to_traversal(tree, lib):
    """Pre-order encoding of a tree as library indices."""
    out = []

    def visit(n):
        out.append(lib.index_of(n.root.name))
        for c in n.children:
            visit(c)

    visit(tree)
    return Traversal(out)


def traversal_to_tree(t, lib):
    """Rebuild the unique tree whose pre-order walk is ``t``."""
    seq = list(t)
    if not seq:
        raise IncompleteTraversal("empty traversal")
    pos = 0
    d = 1

    def build():
        nonlocal pos, d
        if pos >= len(seq):
            raise IncompleteTraversal(f"traversal ends with {d} open slot(s)")
        if d <= 0:
            raise InvalidPrefix(f"no open slot at position {pos}")
        tok = lib[seq[pos]]
        pos += 1
        d += tok.arity - 1
        children = [build() for _ in range(tok.arity)]
        return ExprTree(tok, children)

    tree = build()
    if pos != len(seq):
        raise InvalidPrefix(f"traversal complete at position {pos}, trailing tokens remain")
    return tree


# Scalar operator semantics.  Each entry raises or returns a float; domain
# errors surface as ValueError/OverflowError/ZeroDivisionError and are mapped
# to INVALID by evaluate().
_BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "pow": lambda a, b: math.pow(a, b),
}

_UNARY = {
    "neg": lambda a: -a,
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "exp": math.exp,
    "log": math.log,
    "ln": math.log,
    "sqrt": math.sqrt,
    "abs": abs,
}


def constant_value(token):
    """Numeric value of a constant-literal or placeholder token, else None."""
    if token.kind not in (CONSTANT, PLACEHOLDER):
        return None
    if token.name == "pi":
        return math.pi
    try:
        return float(token.name)
    except ValueError:
        return None


def evaluate(tree, bindings):
    """IEEE-double evaluation; INVALID on any domain error or non-finite value."""

    def ev(n):
        tok = n.root
        if tok.kind == VARIABLE:
            if tok.name not in bindings:
                raise UnboundVariable(tok.name)
            return float(bindings[tok.name])
        if tok.kind in (CONSTANT, PLACEHOLDER):
            v = constant_value(tok)
            if v is None:
                raise ExprError(f"constant token {tok.name!r} has no numeric value")
            return v
        args = []
        for c in n.children:
            v = ev(c)
            if v is INVALID:
                return INVALID
            args.append(v)
        fn = _BINARY.get(tok.name) if tok.arity == 2 else _UNARY.get(tok.name)
        if fn is None:
            raise ExprError(f"no evaluation rule for operator {tok.name!r}")
        try:
            out = fn(*args)
        except (ValueError, OverflowError, ZeroDivisionError):
            return INVALID
        if isinstance(out, complex) or not math.isfinite(out):
            return INVALID
        return out

    return ev(tree)


def evaluate_batch(tree, bindings):
    """Vectorized evaluation over numpy arrays of points.

    Returns (values, ok) where ok is False if any point hit a domain error
    or non-finite intermediate.  Used by the search reward; the scalar
    evaluate() is the per-point contract.
    """
    with np.errstate(all="ignore"):
        def ev(n):
            tok = n.root
            if tok.kind == VARIABLE:
                if tok.name not in bindings:
                    raise UnboundVariable(tok.name)
                return np.asarray(bindings[tok.name], dtype=float), True
            if tok.kind in (CONSTANT, PLACEHOLDER):
                v = constant_value(tok)
                if v is None:
                    raise ExprError(f"constant token {tok.name!r} has no numeric value")
                return np.full(_batch_len(bindings), v), True
            args, ok = [], True
            for c in n.children:
                v, o = ev(c)
                ok = ok and o
                args.append(v)
            fn = _NP_BINARY.get(tok.name) if tok.arity == 2 else _NP_UNARY.get(tok.name)
            if fn is None:
                raise ExprError(f"no evaluation rule for operator {tok.name!r}")
            out = fn(*args)
            ok = ok and bool(np.isfinite(out).all())
            return out, ok

        return ev(tree)


def _batch_len(bindings):
    for v in bindings.values():
        return len(np.asarray(v))
    return 1


def _np_ops():
    binary = {
        "add": np.add,
        "sub": np.subtract,
        "mul": np.multiply,
        "div": np.divide,
        "pow": np.power,
    }
    unary = {
        "neg": np.negative,
        "sin": np.sin,
        "cos": np.cos,
        "tan": np.tan,
        "exp": np.exp,
        "log": np.log,
        "ln": np.log,
        "sqrt": np.sqrt,
        "abs": np.abs,
    }
    return binary, unary


_NP_BINARY, _NP_UNARY = _np_ops()


_INFIX_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}


def render_infix(tree):
    """Fully parenthesized infix text, parseable back by the plain-math grammar."""
    tok = tree.root
    if tok.arity == 0:
        return tok.name
    if tok.name in _INFIX_SYMBOL:
        a, b = tree.children
        return f"({render_infix(a)} {_INFIX_SYMBOL[tok.name]} {render_infix(b)})"
    if tok.name == "neg":
        return f"(-{render_infix(tree.children[0])})"
    args = ", ".join(render_infix(c) for c in tree.children)
    return f"{tok.name}({args})"


def default_library(n_vars=2, name=None, extra_tokens=(), with_pow=True):
    """Standard operator/constant/variable library used by corpus and search.

    Variables are named x1..xn; constants are small integer literals.
    """
    toks = [
        Token("add", 2, OPERATOR),
        Token("sub", 2, OPERATOR),
        Token("mul", 2, OPERATOR),
        Token("div", 2, OPERATOR),
    ]
    if with_pow:
        toks.append(Token("pow", 2, OPERATOR))
    toks += [
        Token("neg", 1, OPERATOR),
        Token("sqrt", 1, OPERATOR),
        Token("sin", 1, OPERATOR),
        Token("cos", 1, OPERATOR),
        Token("tan", 1, OPERATOR),
        Token("exp", 1, OPERATOR),
        Token("log", 1, OPERATOR),
    ]
    toks += [Token(str(k), 0, CONSTANT) for k in (0, 1, 2, 3)]
    toks += [Token(f"x{i}", 0, VARIABLE) for i in range(1, n_vars + 1)]
    toks += list(extra_tokens)
    return Library(toks, name=name or f"std{n_vars}")
