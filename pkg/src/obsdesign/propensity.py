"""Propensity score estimation by logistic regression.

The model is specified through an explicit term language (mains,
pairwise interactions, powers); fitting is Newton's method on the
Bernoulli log-likelihood with step-halving, run on internally
standardized columns for conditioning. The linear score eta = Xb is the
quantity handed to subclassification; probabilities are for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import qr

from .errors import (
    CollinearityError,
    DataDomainError,
    DegenerateColumnError,
    NoContrastError,
    SchemaError,
)
from .table import StudyTable, require_design_table
from .terms import Interaction, Main, Power, Term, term_from_json, term_to_json

EXTREME_PROBABILITY = 1e-10
DIVERGED_COEF_NORM = 1e3


@dataclass(frozen=True)
class ModelSpec:
    """Ordered term list for the assignment model.

    Every referenced column must have the covariate role; duplicate
    terms are rejected. Interactions and nonlinear terms belong here
    whenever treatment decisions could have used them.
    """

    terms: tuple[Term, ...]
    include_intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        seen = set()
        for term in self.terms:
            if term in seen:
                raise SchemaError(f"duplicate model term {term!r}")
            seen.add(term)

    def validate_against(self, table: StudyTable) -> None:
        from .terms import term_columns

        covariates = {c.name for c in table.covariates}
        for term in self.terms:
            for name in term_columns(term):
                if name not in covariates:
                    roles = {c.name: c.role for c in table.columns}
                    if name in roles:
                        raise SchemaError(
                            f"model term references {name!r} which has role "
                            f"{roles[name]!r}, not covariate"
                        )
                    raise SchemaError(f"model term references unknown column {name!r}")
            if isinstance(term, Power) and table.column(term.column).kind != "numeric":
                raise SchemaError(
                    f"power term needs a numeric column, {term.column!r} is "
                    f"{table.column(term.column).kind}"
                )

    def to_json(self) -> dict:
        return {
            "include_intercept": self.include_intercept,
            "terms": [term_to_json(t) for t in self.terms],
        }

    @classmethod
    def from_json(cls, doc) -> "ModelSpec":
        return cls(
            terms=tuple(term_from_json(t) for t in doc.get("terms", [])),
            include_intercept=bool(doc.get("include_intercept", True)),
        )


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray  # n_units x p
    labels: tuple[str, ...]


def _encoded(table: StudyTable, name: str) -> list[tuple[str, np.ndarray]]:
    """Numeric/binary columns pass through; categorical columns expand to
    reference-coded dummies (reference = first level in sorted order)."""
    col = table.column(name)
    if col.kind in ("numeric", "binary"):
        return [(name, col.values.astype(float))]
    dummies = []
    for level in col.levels[1:]:
        indicator = (col.values == level).astype(float)
        dummies.append((f"{name}={level}", indicator))
    return dummies


def expand_design_matrix(table: StudyTable, spec: ModelSpec) -> DesignMatrix:
    """Expand a model spec into a numeric design matrix.

    Column order: intercept first (when included), then the spec's terms
    in order; categorical mains contribute one dummy per non-reference
    level, and interactions multiply every expanded column of one
    operand with every expanded column of the other.
    """
    require_design_table(table, "expand_design_matrix")
    spec.validate_against(table)
    labels: list[str] = []
    columns: list[np.ndarray] = []
    if spec.include_intercept:
        labels.append("intercept")
        columns.append(np.ones(table.n_units))
    for term in spec.terms:
        if isinstance(term, Main):
            expanded = _encoded(table, term.column)
        elif isinstance(term, Interaction):
            expanded = [
                (f"{la}:{lb}", va * vb)
                for la, va in _encoded(table, term.left)
                for lb, vb in _encoded(table, term.right)
            ]
        elif isinstance(term, Power):
            base = table.column(term.column).values.astype(float)
            expanded = [(f"{term.column}^{term.exponent}", base**term.exponent)]
        else:
            raise SchemaError(f"unknown term type {term!r}")
        for label, values in expanded:
            labels.append(label)
            columns.append(values)
    if len(labels) == int(spec.include_intercept):
        raise SchemaError("model expands to no columns beyond the intercept")
    constant = [
        label
        for label, values in zip(labels, columns)
        if label != "intercept" and np.ptp(values) == 0.0
    ]
    if constant:
        raise DegenerateColumnError(
            f"model terms expand to constant columns: {constant}"
        )
    return DesignMatrix(np.column_stack(columns), tuple(labels))


@dataclass(frozen=True)
class PropensityFit:
    """Fitted assignment model.

    probabilities are exactly sigmoid(linear_scores). When converged
    without a separation flag, the score equations sum((w - e) * x_j)
    vanish to reporting precision for every design column.
    """

    coefficients: np.ndarray
    labels: tuple[str, ...]
    linear_scores: np.ndarray
    probabilities: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    separation_flag: bool
    ll_trace: tuple[float, ...]

    def summary_rows(self) -> list[tuple[str, float]]:
        return list(zip(self.labels, (float(b) for b in self.coefficients)))

    def to_json(self) -> dict:
        return {
            "coefficients": {l: float(b) for l, b in zip(self.labels, self.coefficients)},
            "log_likelihood": float(self.log_likelihood),
            "iterations": self.iterations,
            "converged": self.converged,
            "separation_flag": self.separation_flag,
        }


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-eta))


def _bernoulli_ll(eta: np.ndarray, w: np.ndarray) -> float:
    # stable: w*eta - log(1 + exp(eta))
    return float(np.sum(w * eta - np.logaddexp(0.0, eta)))


def _check_rank(matrix: np.ndarray, labels: Sequence[str]) -> None:
    _, r, pivots = qr(matrix, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        raise CollinearityError("empty design matrix")
    tol = diag.max() * max(matrix.shape) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    if rank < matrix.shape[1]:
        dependent = sorted(labels[p] for p in pivots[rank:])
        raise CollinearityError(
            f"design matrix is rank deficient; dependent columns: {dependent}",
            columns=dependent,
        )


def fit_logistic(
    matrix: np.ndarray,
    w: np.ndarray,
    labels: Sequence[str] | None = None,
    max_iter: int = 50,
    ll_tol: float = 1e-10,
    score_tol: float = 1e-8,
) -> PropensityFit:
    """Maximum-likelihood logistic fit of w on the given design matrix.

    Newton iterations with Fisher information run on centered/scaled
    columns; a step that lowers the log-likelihood is halved up to ten
    times, so the trace is monotone. Convergence is declared when the
    largest raw-scale score component falls under ``score_tol`` or the
    relative log-likelihood change falls under ``ll_tol``. Detected
    separation stops the fit and flags it; the partial fit is returned
    rather than silently penalized.

    Raises
    ------
    NoContrastError
        w is all-treated or all-control.
    CollinearityError
        matrix columns are linearly dependent (names the culprits).
    """
    matrix = np.asarray(matrix, dtype=float)
    w = np.asarray(w, dtype=float)
    if matrix.ndim != 2:
        raise SchemaError("design matrix must be two-dimensional")
    n, p = matrix.shape
    if len(w) != n:
        raise SchemaError(f"w has length {len(w)}, matrix has {n} rows")
    if not np.isin(w, (0.0, 1.0)).all():
        raise DataDomainError("treatment vector must contain only 0/1")
    if w.sum() == 0 or w.sum() == n:
        raise NoContrastError("both treatment arms must be nonempty")
    if p > n:
        raise SchemaError(f"more columns ({p}) than rows ({n})")
    if labels is None:
        labels = tuple(f"x{j}" for j in range(p))
    else:
        labels = tuple(labels)
    _check_rank(matrix, labels)

    # standardize for conditioning; constant column (intercept) scales to 1
    means = matrix.mean(axis=0)
    scales = matrix.std(axis=0)
    constant = scales == 0.0
    if constant.sum() > 1:
        raise CollinearityError("multiple constant columns in design matrix")
    has_intercept = bool(constant.any())
    center = np.where(constant, 0.0, means if has_intercept else 0.0)
    scale = np.where(constant, matrix[0], scales)
    scale = np.where(scale == 0.0, 1.0, scale)
    z = (matrix - center) / scale

    beta = np.zeros(p)
    eta = z @ beta
    ll = _bernoulli_ll(eta, w)
    trace = [ll]
    converged = False
    separation = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        prob = _sigmoid(eta)
        weight = prob * (1.0 - prob)
        gradient = z.T @ (w - prob)
        hessian = z.T @ (z * weight[:, None])
        try:
            step = np.linalg.solve(hessian, gradient)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(hessian, gradient, rcond=None)
        candidate = beta + step
        cand_ll = _bernoulli_ll(z @ candidate, w)
        halvings = 0
        while cand_ll < ll and halvings < 10:
            step = step / 2.0
            candidate = beta + step
            cand_ll = _bernoulli_ll(z @ candidate, w)
            halvings += 1
        if cand_ll < ll:
            # no ascent direction left at working precision
            break
        beta = candidate
        eta = z @ beta
        prev_ll, ll = ll, cand_ll
        trace.append(ll)

        prob = _sigmoid(eta)
        raw_beta = _destandardize(beta, center, scale, constant, has_intercept)
        if (
            np.linalg.norm(raw_beta) > DIVERGED_COEF_NORM
            and _any_extreme(prob)
        ):
            separation = True
            break
        raw_score = matrix.T @ (w - prob)
        rel_change = abs(ll - prev_ll) / (abs(ll) + 1e-12)
        if np.max(np.abs(raw_score)) < score_tol or rel_change < ll_tol:
            converged = True
            break

    raw_beta = _destandardize(beta, center, scale, constant, has_intercept)
    eta = np.asarray(eta)
    return PropensityFit(
        coefficients=raw_beta,
        labels=labels,
        linear_scores=eta,
        probabilities=_sigmoid(eta),
        log_likelihood=ll,
        iterations=iterations,
        converged=converged and not separation,
        separation_flag=separation,
        ll_trace=tuple(trace),
    )


def _destandardize(beta, center, scale, constant, has_intercept):
    """Map coefficients from standardized columns back to the raw scale.

    eta = sum_j beta_j (x_j - c_j)/s_j, so raw slopes are beta_j/s_j and
    the constant column (value v, never centered) absorbs the centering
    shift: raw_const = (beta_const - sum_j beta_j c_j/s_j) / v.
    """
    raw = beta / scale
    if has_intercept:
        idx = int(np.flatnonzero(constant)[0])
        shift = float(np.sum(beta * center / scale))  # center is 0 at idx
        raw[idx] = (beta[idx] - shift) / scale[idx]
    return raw


def fit_propensity(table: StudyTable, spec: ModelSpec, **kwargs) -> tuple[DesignMatrix, PropensityFit]:
    """Expand the model against a design table and fit it to the treatment column."""
    design = expand_design_matrix(table, spec)
    fit = fit_logistic(design.matrix, table.treatment_values(), design.labels, **kwargs)
    return design, fit


@dataclass(frozen=True)
class SeparationReport:
    flagged: bool
    coefficient_norm: float
    extreme_units: tuple[int, ...]
    message: str


def detect_separation(fit: PropensityFit) -> SeparationReport:
    """Flag fits whose probabilities have pinned to 0/1 under diverging
    coefficients, the signature of (quasi-)separated data."""
    extreme = np.flatnonzero(
        (fit.probabilities > 1.0 - EXTREME_PROBABILITY)
        | (fit.probabilities < EXTREME_PROBABILITY)
    )
    norm = float(np.linalg.norm(fit.coefficients))
    flagged = bool(extreme.size > 0 and norm > DIVERGED_COEF_NORM)
    if flagged:
        message = (
            f"{extreme.size} unit(s) have fitted probabilities within "
            f"{EXTREME_PROBABILITY:g} of 0/1 while the coefficient norm is "
            f"{norm:.3g}; revise the model specification"
        )
    else:
        message = "no separation detected"
    return SeparationReport(
        flagged=flagged,
        coefficient_norm=norm,
        extreme_units=tuple(int(i) for i in extreme),
        message=message,
    )


def _any_extreme(prob: np.ndarray) -> bool:
    return bool(
        np.any(prob > 1.0 - EXTREME_PROBABILITY) or np.any(prob < EXTREME_PROBABILITY)
    )


BIN_TAGS = ("empty", "control-only", "treated-only", "both-arms")


@dataclass(frozen=True)
class OverlapReport:
    """Equal-width histogram of the linear score by arm.

    Bins tagged single-arm mark score ranges where one arm is simply
    absent: treatment effects there rest entirely on extrapolation, so
    they are candidates for trimming.
    """

    edges: np.ndarray
    treated_counts: np.ndarray
    control_counts: np.ndarray
    tags: tuple[str, ...]
    nonoverlap_ranges: tuple[tuple[float, float, str], ...]
    degenerate: bool = False

    @property
    def n_bins(self) -> int:
        return len(self.tags)


def overlap_histogram(fit: PropensityFit, w: np.ndarray, n_bins: int) -> OverlapReport:
    """Bin the linear scores into equal-width bins and count each arm.

    A constant score collapses to a single-bin degenerate report.
    """
    if n_bins < 2:
        raise DataDomainError("n_bins must be at least 2")
    eta = fit.linear_scores
    w = np.asarray(w)
    lo, hi = float(eta.min()), float(eta.max())
    if lo == hi:
        n_t, n_c = int(w.sum()), int((1 - w).sum())
        tag = _bin_tag(n_t, n_c)
        ranges = ((lo, hi, tag),) if tag in ("treated-only", "control-only") else ()
        return OverlapReport(
            edges=np.array([lo, hi]),
            treated_counts=np.array([n_t]),
            control_counts=np.array([n_c]),
            tags=(tag,),
            nonoverlap_ranges=ranges,
            degenerate=True,
        )
    edges = np.linspace(lo, hi, n_bins + 1)
    treated, _ = np.histogram(eta[w == 1], bins=edges)
    control, _ = np.histogram(eta[w == 0], bins=edges)
    tags = tuple(_bin_tag(int(t), int(c)) for t, c in zip(treated, control))
    ranges = []
    for i, tag in enumerate(tags):
        if tag not in ("treated-only", "control-only"):
            continue
        span = (float(edges[i]), float(edges[i + 1]), tag)
        if ranges and ranges[-1][2] == tag and ranges[-1][1] == span[0]:
            ranges[-1] = (ranges[-1][0], span[1], tag)
        else:
            ranges.append(span)
    return OverlapReport(
        edges=edges,
        treated_counts=treated,
        control_counts=control,
        tags=tags,
        nonoverlap_ranges=tuple(ranges),
    )


def _bin_tag(n_treated: int, n_control: int) -> str:
    if n_treated == 0 and n_control == 0:
        return "empty"
    if n_control == 0:
        return "treated-only"
    if n_treated == 0:
        return "control-only"
    return "both-arms"
