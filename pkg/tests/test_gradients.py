"""Every objective term's analytic gradient against central finite
differences, double precision, over every parameter of tiny models."""

import pytest

import gradcheck


@pytest.mark.parametrize("term", gradcheck.TERMS)
def test_two_model_terms_match_finite_differences(term):
    errors = gradcheck.tia_sweep()
    assert errors[term] <= gradcheck.RTOL, f"{term}: max rel err {errors[term]:.3e}"


@pytest.mark.parametrize("term", ("j_oj", "j_r", "j_d", "total_task"))
def test_single_model_terms_match_finite_differences(term):
    errors = gradcheck.dreamer_sweep()
    assert errors[term] <= gradcheck.RTOL, f"{term}: max rel err {errors[term]:.3e}"


def test_inverse_objective_matches_finite_differences():
    err = gradcheck.inverse_sweep()
    assert err <= gradcheck.RTOL, f"inverse loss: max rel err {err:.3e}"


def test_actor_gradient_matches_finite_differences():
    err = gradcheck.actor_sweep()
    assert err <= gradcheck.RTOL, f"actor: max rel err {err:.3e}"
