"""Formula language: parsing, precedence, evaluation, domain errors."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shjb.expr import (
    BinOp,
    Call,
    ExprDomainError,
    ExprSyntaxError,
    Neg,
    Num,
    Var,
    evaluate,
    free_vars,
    parse,
    substitute,
    unparse,
)


def test_free_vars_of_square_plus_tanh():
    assert free_vars(parse("x1^2 + tanh(t)")) == {"x1", "t"}


def test_affine_evaluation():
    assert evaluate(parse("v1*x1 - 0.5"), {"v1": 2.0, "x1": 3.0}) == 5.5


def test_noise_variables_are_detected():
    tree = parse("k1 + w1")
    assert free_vars(tree) == {"k1", "w1"}


@pytest.mark.parametrize(
    "src, expected",
    [
        ("2 + 3*4", 14.0),
        ("2*3^2", 18.0),
        ("-3^2", -9.0),  # unary minus binds looser than power
        ("2^3^2", 512.0),  # power is right associative
        ("(2^3)^2", 64.0),
        ("7 - 2 - 1", 4.0),
        ("12/6/2", 1.0),
        ("min(2, -1) + max(0.5, 0)", -0.5),
        ("abs(-3) * cos(0)", 3.0),
        ("exp(0) + log(1) + sqrt(4) + sin(0)", 3.0),
    ],
)
def test_precedence_and_functions(src, expected):
    assert evaluate(parse(src), {}) == pytest.approx(expected, abs=1e-14)


def test_vectorised_evaluation_broadcasts():
    tree = parse("x1 * v1 + t")
    out = evaluate(tree, {"x1": np.array([1.0, 2.0]), "v1": 3.0, "t": np.array([0.0, 10.0])})
    assert np.allclose(out, [3.0, 16.0])


def test_division_by_zero_is_flagged_with_position():
    src = "1 + x1/(x1 - 1)"
    with pytest.raises(ExprDomainError) as err:
        evaluate(parse(src), {"x1": 1.0})
    assert err.value.pos == src.index("/")


def test_fractional_power_of_negative_base():
    with pytest.raises(ExprDomainError):
        evaluate(parse("(0 - 2)^0.5"), {})
    # integer exponents of negative bases stay legal
    assert evaluate(parse("(0 - 2)^2"), {}) == 4.0


@pytest.mark.parametrize("src", ["log(0)", "log(-1)", "sqrt(-1)"])
def test_function_domain_errors(src):
    with pytest.raises(ExprDomainError):
        evaluate(parse(src), {})


def test_overflow_is_flagged():
    with pytest.raises(ExprDomainError):
        evaluate(parse("exp(exp(x1))"), {"x1": 100.0})


def test_unbound_variable():
    with pytest.raises(ExprDomainError):
        evaluate(parse("x1 + y9"), {"x1": 0.0})


@pytest.mark.parametrize(
    "src",
    ["", "1 +", "(1", "1 2", "foo(1)", "min(1)", "sin(1, 2)", "1 $ 2"],
)
def test_syntax_errors(src):
    with pytest.raises(ExprSyntaxError):
        parse(src)


def test_allowed_vars_rejects_unknown_names():
    parse("x1 + v1", allowed_vars={"x1", "v1"})
    with pytest.raises(ExprSyntaxError):
        parse("x1 + x2", allowed_vars={"x1", "v1"})


def test_substitute_replaces_leaves():
    tree = parse("w1^2 + x1")
    frozen = substitute(tree, {"w1": Var("k1")})
    assert free_vars(frozen) == {"k1", "x1"}
    env = {"k1": 3.0, "x1": 1.0}
    assert evaluate(frozen, env) == 10.0


_LEAF = st.one_of(
    st.floats(min_value=0.0, max_value=1e6, allow_nan=False).map(abs).map(Num),
    st.sampled_from(["t", "x1", "x2", "v1", "w1", "k1", "k2"]).map(Var),
)


def _trees(leaf, depth):
    if depth == 0:
        return leaf
    sub = _trees(leaf, depth - 1)
    return st.one_of(
        sub,
        st.builds(Neg, sub),
        st.builds(lambda op, a, b: BinOp(op, a, b), st.sampled_from("+-*/^"), sub, sub),
        st.builds(lambda fn, a: Call(fn, (a,)), st.sampled_from(["exp", "log", "sqrt", "sin", "cos", "tanh", "abs"]), sub),
        st.builds(lambda fn, a, b: Call(fn, (a, b)), st.sampled_from(["min", "max"]), sub, sub),
    )


@given(_trees(_LEAF, 3))
def test_unparse_parse_round_trip(tree):
    assert parse(unparse(tree)) == tree


@given(_trees(_LEAF, 2), st.floats(min_value=-3, max_value=3, allow_nan=False))
def test_substitution_matches_binding(tree, value):
    """Substituting a literal for a variable equals binding it in the env."""
    env = {name: 1.5 for name in ("t", "x1", "x2", "v1", "w1", "k1", "k2")}
    sub_env = dict(env)
    sub_env["x1"] = value
    replaced = substitute(tree, {"x1": Num(value)})
    try:
        direct = evaluate(tree, sub_env)
    except ExprDomainError:
        with pytest.raises(ExprDomainError):
            evaluate(replaced, env)
        return
    assert evaluate(replaced, env) == direct
