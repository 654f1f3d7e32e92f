import math

import pytest

from trialforge.errors import SpecError
from trialforge.rng import Stream
from trialforge.templates import LOBES, SIZE_BIN_EDGES, size_bin, template

# reference screening-trial constants
NLST = dict(pi=0.040, w=(0.42, 0.38, 0.11, 0.05, 0.03, 0.01), lam=(0.30, 0.08, 0.18, 0.28, 0.16),
            male=0.59, age=("normal_clipped", 61.4, 5.0, 55.0, 74.0))
NELSON = dict(pi=0.022, w=(0.38, 0.40, 0.14, 0.05, 0.02, 0.01), lam=(0.28, 0.08, 0.19, 0.27, 0.18),
              male=0.84, age=("uniform", 50.0, 75.0))


@pytest.mark.parametrize("name,ref", [("NLST", NLST), ("NELSON", NELSON)])
def test_template_constants(name, ref):
    t = template(name)
    assert t.pi == ref["pi"]
    assert t.w == ref["w"]
    assert t.lam == ref["lam"]
    assert t.male_ratio == ref["male"]
    assert t.age.kind == ref["age"][0]
    if t.age.kind == "uniform":
        assert (t.age.lo, t.age.hi) == ref["age"][1:]
    else:
        assert (t.age.a, t.age.b, t.age.lo, t.age.hi) == ref["age"][1:]


@pytest.mark.parametrize("name", ["NLST", "NELSON"])
def test_priors_sum_to_one(name):
    t = template(name)
    assert abs(math.fsum(t.w) - 1.0) <= 1e-9
    assert abs(math.fsum(t.lam) - 1.0) <= 1e-9


def test_unknown_template():
    with pytest.raises(SpecError):
        template("PLCO")


def test_size_bins():
    assert len(SIZE_BIN_EDGES) == 7 and LOBES == ("RUL", "RML", "RLL", "LUL", "LLL")
    assert [size_bin(d) for d in (0.0, 3.99, 4.0, 6.0, 9.99, 10.0, 20.0, 29.9, 30.0, 80.0)] == \
        [0, 0, 1, 2, 2, 3, 4, 4, 5, 5]


@pytest.mark.parametrize("name,lo,hi", [("NLST", 55.0, 74.0), ("NELSON", 50.0, 75.0)])
def test_age_draws_in_support(name, lo, hi):
    t = template(name)
    s = Stream(9)
    ages = [t.draw_demographics(s)[1] for _ in range(2000)]
    assert min(ages) >= lo and max(ages) <= hi
