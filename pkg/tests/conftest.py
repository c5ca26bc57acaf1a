import numpy as np
import pytest

from mathcorpus.expr_core import (
    CONSTANT,
    ExprTree,
    Library,
    OPERATOR,
    Token,
    VARIABLE,
    default_library,
)


@pytest.fixture
def lib():
    return default_library(n_vars=2)


@pytest.fixture
def tiny_lib():
    # 4 tokens: one binary, one unary, two terminals
    return Library([
        Token("add", 2, OPERATOR),
        Token("sin", 1, OPERATOR),
        Token("x1", 0, VARIABLE),
        Token("1", 0, CONSTANT),
    ], name="tiny")


def random_tree(lib, rng, max_depth=8):
    """Uniform-ish random tree over a library, bounded depth."""
    terminals = [t for t in lib if t.arity == 0]
    if max_depth <= 1:
        tok = terminals[rng.integers(len(terminals))]
        return ExprTree(tok, [])
    tok = lib.tokens[rng.integers(len(lib))]
    return ExprTree(tok, [random_tree(lib, rng, max_depth - 1)
                          for _ in range(tok.arity)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    # repeat the acceptance pass/fail lines where capture cannot hide them
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
