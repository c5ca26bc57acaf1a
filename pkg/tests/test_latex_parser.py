import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mathcorpus.expr_core import (
    default_library,
    evaluate,
    render_infix,
    tree_to_traversal,
)
from mathcorpus.latex_parser import (
    EmptyInput,
    LatexError,
    PlainSyntaxError,
    TotallyUnparseable,
    UnbalancedBraces,
    is_unsupported_marker,
    lex,
    marker_construct,
    normalize,
    parse_latex,
    parse_plain,
)

from conftest import random_tree


def shape(tree):
    """Compact structural signature for assertions."""
    if not tree.children:
        return tree.root.name
    return f"{tree.root.name}({','.join(shape(c) for c in tree.children)})"


class TestLexer:
    def test_power(self):
        stream = lex("x^2")
        kinds = [(l.kind, l.value) for l in stream.lexemes]
        assert kinds == [("symbol", "x"), ("superscript", "^"), ("number", "2")]

    def test_frac_groups(self):
        stream = lex(r"\frac{1}{2}")
        assert stream.lexemes[0].kind == "command"
        assert stream.lexemes[0].value == "frac"
        g1, g2 = stream.lexemes[1], stream.lexemes[2]
        assert g1.kind == "group" and g1.value[0].value == "1"
        assert g2.kind == "group" and g2.value[0].value == "2"

    def test_unmatched_paren_is_not_a_lex_error(self):
        stream = lex(r"\sin(x")
        kinds = [l.kind for l in stream.lexemes]
        assert kinds == ["command", "lparen", "symbol"]

    def test_unbalanced_braces(self):
        with pytest.raises(UnbalancedBraces):
            lex("{x")
        with pytest.raises(UnbalancedBraces):
            lex("x}")

    def test_offsets_increase(self):
        stream = lex("a + b * c^2")
        offs = [l.offset for l in stream.lexemes]
        assert offs == sorted(offs)
        assert len(set(offs)) == len(offs)


class TestParseLatex:
    def test_power_plus_sin(self):
        out = parse_latex(r"x^2 + \sin(x)")
        assert len(out.trees) == 1
        assert shape(out.trees[0]) == "add(pow(x,2),sin(x))"
        assert out.unsupported == []

    def test_relation_split(self):
        out = parse_latex("E = m c^2")
        assert out.relation_split_count == 1
        assert [shape(t) for t in out.trees] == ["E", "mul(m,pow(c,2))"]

    def test_bare_variable(self):
        out = parse_latex("x")
        assert shape(out.trees[0]) == "x"

    def test_integral_becomes_marker(self):
        out = parse_latex(r"\int_0^1 f(x) dx + y")
        assert len(out.trees) == 1
        tree = out.trees[0]
        assert tree.root.name == "add"
        marker = tree.children[0]
        assert is_unsupported_marker(marker.root)
        assert marker_construct(marker.root) == "int"
        assert shape(marker.children[0]) == "mul(f,x)"
        assert out.unsupported[0][0] == "int"

    def test_frac(self):
        out = parse_latex(r"\frac{x+1}{2}")
        assert shape(out.trees[0]) == "div(add(x,1),2)"

    def test_sqrt_and_nth_root(self):
        assert shape(parse_latex(r"\sqrt{x}").trees[0]) == "sqrt(x)"
        assert shape(parse_latex(r"\sqrt[3]{x}").trees[0]) == "pow(x,div(1,3))"

    def test_e_power_is_exp(self):
        assert shape(parse_latex("e^{2x}").trees[0]) == "exp(mul(2,x))"

    def test_subscripted_variable_atomic(self):
        out = parse_latex("x_0 + x")
        assert shape(out.trees[0]) == "add(x_0,x)"

    def test_greek(self):
        assert shape(parse_latex(r"\alpha \beta").trees[0]) == "mul(alpha,beta)"

    def test_implicit_and_explicit_mul_match(self):
        a = parse_latex(r"2 x y").trees[0]
        b = parse_latex(r"2 \cdot x \cdot y").trees[0]
        assert a == b

    def test_unary_minus(self):
        assert shape(parse_latex("-x").trees[0]) == "neg(x)"
        assert shape(parse_latex("--x").trees[0]) == "x"

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            parse_latex("   ")

    def test_totally_unparseable(self):
        with pytest.raises(TotallyUnparseable):
            parse_latex("^")

    def test_split_segments_bounded(self):
        out = parse_latex("a = b = c")
        assert out.relation_split_count == 2
        assert len(out.trees) <= 3


class TestNormalize:
    def test_double_negation(self):
        t = parse_latex("--x").trees[0]
        assert shape(t) == "x"

    def test_mul_one(self):
        assert shape(normalize(parse_plain("1 * x"))) == "x"
        assert shape(normalize(parse_plain("x * 1"))) == "x"

    def test_add_zero(self):
        assert shape(normalize(parse_plain("x + 0"))) == "x"
        assert shape(normalize(parse_plain("0 + x"))) == "x"

    def test_left_fold(self):
        lib = default_library(n_vars=2)
        a = normalize(parse_plain("add(x1, add(x2, 1))", lib))
        b = normalize(parse_plain("add(add(x1, x2), 1)", lib))
        assert tree_to_traversal(a, lib).seq == tree_to_traversal(b, lib).seq

    def test_idempotent_on_random_trees(self, rng):
        lib = default_library(n_vars=2)
        for _ in range(1000):
            t = random_tree(lib, rng, max_depth=6)
            once = normalize(t)
            assert normalize(once) == once


class TestParsePlain:
    def test_simple(self):
        assert shape(parse_plain("(x + 1)")) == "add(x,1)"

    def test_precedence(self):
        # ^ binds tightest and right-assoc; unary minus above mul
        assert shape(parse_plain("2 * x ^ 3")) == "mul(2,pow(x,3))"
        assert shape(parse_plain("x ^ 2 ^ 3")) == "pow(x,pow(2,3))"
        assert shape(parse_plain("-x + 1")) == "add(neg(x),1)"

    def test_benchmark_value(self):
        tree = parse_plain("x^4 - x^3 + 1/2 * y^2 - y")
        assert evaluate(tree, {"x": 1.0, "y": 1.0}) == -0.5

    def test_benchmark_trig(self):
        tree = parse_plain("sin(x^2) * cos(x) - 1")
        assert shape(tree) == "sub(mul(sin(pow(x,2)),cos(x)),1)"

    def test_function_calls(self):
        assert shape(parse_plain("sqrt(x)")) == "sqrt(x)"
        assert shape(parse_plain("pow(x, 2)")) == "pow(x,2)"
        assert shape(parse_plain("ln(x)")) == "log(x)"

    def test_errors(self):
        with pytest.raises(EmptyInput):
            parse_plain("")
        with pytest.raises(PlainSyntaxError):
            parse_plain("x +")
        with pytest.raises(PlainSyntaxError):
            parse_plain("(x")
        with pytest.raises(PlainSyntaxError):
            parse_plain("frobnicate(x)")
        with pytest.raises(PlainSyntaxError):
            parse_plain("sin(x, y)")

    def test_library_terminal_lookup(self):
        lib = default_library(n_vars=1)
        tree = parse_plain("x1 + 2", lib)
        assert tree.children[0].root is lib.get("x1")

    def test_render_roundtrip_random(self, rng):
        lib = default_library(n_vars=2)
        for _ in range(300):
            t = normalize(random_tree(lib, rng, max_depth=6))
            back = parse_plain(render_infix(t), lib)
            assert tree_to_traversal(back, lib).seq == tree_to_traversal(t, lib).seq


class TestFuzz:
    @settings(max_examples=300, deadline=None)
    @given(st.text(max_size=40))
    def test_parse_latex_never_panics(self, text):
        try:
            out = parse_latex(text)
        except LatexError:
            return
        assert out.trees

    @settings(max_examples=200, deadline=None)
    @given(st.text(alphabet="x12+-*/^() \\fracsqrtin{}_", max_size=30))
    def test_latexish_fuzz(self, text):
        try:
            parse_latex(text)
        except LatexError:
            pass
