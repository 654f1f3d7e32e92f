"""Clinical screening-trial templates (prevalence, size prior, lobe prior, demographics)."""

from __future__ import annotations

from dataclasses import dataclass

from trialforge.errors import SpecError
from trialforge.rng import Stream

LOBES = ("RUL", "RML", "RLL", "LUL", "LLL")
SIZE_BIN_EDGES = (0.0, 4.0, 6.0, 10.0, 20.0, 30.0, float("inf"))
SIZE_BIN_NAMES = ("[0,4)", "[4,6)", "[6,10)", "[10,20)", "[20,30)", "[30,inf)")


def size_bin(diameter_mm: float) -> int:
    for i in range(6):
        if SIZE_BIN_EDGES[i] <= diameter_mm < SIZE_BIN_EDGES[i + 1]:
            return i
    raise ValueError(f"diameter {diameter_mm} outside size bins")


@dataclass(frozen=True)
class AgeModel:
    kind: str  # "normal_clipped" or "uniform"
    a: float
    b: float
    lo: float
    hi: float

    def draw(self, stream: Stream) -> float:
        if self.kind == "uniform":
            return stream.uniform_range(self.a, self.b)
        return min(self.hi, max(self.lo, stream.normal(self.a, self.b)))


@dataclass(frozen=True)
class Template:
    name: str
    pi: float
    w: tuple
    lam: tuple
    male_ratio: float
    age: AgeModel

    def draw_demographics(self, stream: Stream) -> tuple:
        sex = "M" if stream.bernoulli(self.male_ratio) else "F"
        age = round(self.age.draw(stream), 1)
        return sex, age


TEMPLATES = {
    "NLST": Template(
        name="NLST",
        pi=0.040,
        w=(0.42, 0.38, 0.11, 0.05, 0.03, 0.01),
        lam=(0.30, 0.08, 0.18, 0.28, 0.16),
        male_ratio=0.59,
        age=AgeModel("normal_clipped", 61.4, 5.0, 55.0, 74.0),
    ),
    "NELSON": Template(
        name="NELSON",
        pi=0.022,
        w=(0.38, 0.40, 0.14, 0.05, 0.02, 0.01),
        lam=(0.28, 0.08, 0.19, 0.27, 0.18),
        male_ratio=0.84,
        age=AgeModel("uniform", 50.0, 75.0, 50.0, 75.0),
    ),
}


def template(name: str) -> Template:
    try:
        return TEMPLATES[name]
    except KeyError:
        raise SpecError(f"unknown template {name!r}; expected one of {sorted(TEMPLATES)}") from None
