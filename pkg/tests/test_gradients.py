import pytest

from gradient_suite import all_cases, run_case

CASES = list(all_cases())


def test_suite_size():
    assert len(CASES) >= 200


@pytest.mark.parametrize("kind,seed", CASES, ids=[f"{k}-{s}" for k, s in CASES])
def test_analytic_gradient_matches_finite_difference(kind, seed):
    bad = run_case(kind, seed)
    assert not bad, bad
