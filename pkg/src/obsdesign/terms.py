"""Model term language: main effects, pairwise interactions, and powers.

Terms name covariate columns; they are evaluated either against a plain
mapping of numeric arrays (simulation expressions) or expanded against a
table with categorical dummy coding (see :mod:`obsdesign.propensity`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .errors import SchemaError


@dataclass(frozen=True)
class Main:
    column: str


@dataclass(frozen=True)
class Interaction:
    left: str
    right: str

    def __post_init__(self):
        # products commute; canonical operand order makes duplicates detectable
        if self.right < self.left:
            object.__setattr__(self, "left", self.right)
            object.__setattr__(self, "right", self.left)


@dataclass(frozen=True)
class Power:
    column: str
    exponent: int

    def __post_init__(self):
        if self.exponent < 2:
            raise SchemaError(f"power term on {self.column!r} needs exponent >= 2")


Term = Union[Main, Interaction, Power]


def term_columns(term: Term) -> tuple[str, ...]:
    if isinstance(term, Main):
        return (term.column,)
    if isinstance(term, Interaction):
        return (term.left, term.right)
    if isinstance(term, Power):
        return (term.column,)
    raise TypeError(f"not a term: {term!r}")


def term_label(term: Term) -> str:
    if isinstance(term, Main):
        return term.column
    if isinstance(term, Interaction):
        return f"{term.left}:{term.right}"
    if isinstance(term, Power):
        return f"{term.column}^{term.exponent}"
    raise TypeError(f"not a term: {term!r}")


def term_values(term: Term, columns: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate a term over numeric arrays keyed by column name."""
    try:
        if isinstance(term, Main):
            return np.asarray(columns[term.column], dtype=float)
        if isinstance(term, Interaction):
            return np.asarray(columns[term.left], dtype=float) * np.asarray(
                columns[term.right], dtype=float
            )
        if isinstance(term, Power):
            return np.asarray(columns[term.column], dtype=float) ** term.exponent
    except KeyError as missing:
        raise SchemaError(f"term references unknown column {missing.args[0]!r}") from None
    raise TypeError(f"not a term: {term!r}")


def term_to_json(term: Term) -> dict:
    if isinstance(term, Main):
        return {"kind": "main", "column": term.column}
    if isinstance(term, Interaction):
        return {"kind": "interaction", "left": term.left, "right": term.right}
    if isinstance(term, Power):
        return {"kind": "power", "column": term.column, "exponent": term.exponent}
    raise TypeError(f"not a term: {term!r}")


def term_from_json(doc: dict) -> Term:
    kind = doc.get("kind")
    if kind == "main":
        return Main(doc["column"])
    if kind == "interaction":
        return Interaction(doc["left"], doc["right"])
    if kind == "power":
        return Power(doc["column"], int(doc["exponent"]))
    raise SchemaError(f"unknown term kind: {kind!r}")


@dataclass(frozen=True)
class LinearExpr:
    """intercept + sum of coefficient * term, evaluated per unit."""

    intercept: float = 0.0
    terms: tuple[tuple[Term, float], ...] = ()

    def evaluate(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        n = len(next(iter(columns.values()))) if columns else 0
        out = np.full(n, float(self.intercept))
        for term, coef in self.terms:
            out = out + coef * term_values(term, columns)
        return out

    def to_json(self) -> dict:
        return {
            "intercept": self.intercept,
            "terms": [[term_to_json(t), c] for t, c in self.terms],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LinearExpr":
        terms = tuple(
            (term_from_json(t), float(c)) for t, c in doc.get("terms", [])
        )
        return cls(intercept=float(doc.get("intercept", 0.0)), terms=terms)
