"""Typed study tables with column roles and outcome quarantine.

The data model enforces the discipline that all design work happens
without sight of final outcomes: outcome columns are stripped into a
sealed, digest-protected container at ingest and can only be recovered
once the design protocol has been frozen.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .errors import (
    BlindingViolationError,
    DataDomainError,
    FrozenProtocolError,
    NothingToSealError,
    ParseError,
    SchemaError,
    TamperError,
)

ROLES = ("covariate", "treatment", "intermediate", "outcome", "unit_id")
KINDS = ("numeric", "binary", "categorical")


@dataclass(frozen=True)
class Column:
    """One named, role-tagged column.

    values are float64 for numeric, int64 in {0,1} for binary, and an
    object array of strings for categorical. ``raw`` preserves the
    original cell text from CSV ingestion so re-serialization is
    byte-faithful; it is never part of digests.
    """

    name: str
    role: str
    kind: str
    values: np.ndarray
    levels: tuple[str, ...] | None = None
    raw: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"unknown role {self.role!r} for column {self.name!r}")
        if self.kind not in KINDS:
            raise SchemaError(f"unknown kind {self.kind!r} for column {self.name!r}")
        values = np.asarray(self.values)
        if values.ndim != 1:
            raise SchemaError(f"column {self.name!r} must be one-dimensional")
        if self.kind == "numeric":
            values = values.astype(float)
            if not np.all(np.isfinite(values)):
                raise DataDomainError(f"column {self.name!r} contains non-finite values")
        elif self.kind == "binary":
            values = values.astype(float)
            if not np.isin(values, (0.0, 1.0)).all():
                bad = int(np.flatnonzero(~np.isin(values, (0.0, 1.0)))[0])
                raise DataDomainError(
                    f"binary column {self.name!r} has value outside {{0,1}} at row {bad + 1}"
                )
            values = values.astype(np.int64)
        else:
            values = np.asarray([str(v) for v in values], dtype=object)
            observed = set(values.tolist())
            levels = self.levels if self.levels is not None else tuple(sorted(observed))
            uncovered = observed.difference(levels)
            if uncovered:
                raise SchemaError(
                    f"categorical column {self.name!r} has values outside its levels: "
                    f"{sorted(uncovered)}"
                )
            object.__setattr__(self, "levels", tuple(levels))
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if self.raw is not None and len(self.raw) != len(values):
            raise SchemaError(f"raw text length mismatch in column {self.name!r}")

    def __len__(self):
        return len(self.values)

    def rendered(self) -> list[str]:
        """Canonical decimal-text rendering of the values (digest input)."""
        if self.kind == "numeric":
            return [repr(float(v)) for v in self.values]
        if self.kind == "binary":
            return [str(int(v)) for v in self.values]
        return [str(v) for v in self.values]

    def output_text(self) -> list[str]:
        """Cell text for CSV output; prefers the original ingest text."""
        if self.raw is not None:
            return list(self.raw)
        return self.rendered()

    def take(self, indices: np.ndarray) -> "Column":
        raw = tuple(self.raw[i] for i in indices) if self.raw is not None else None
        return Column(
            self.name, self.role, self.kind, self.values[indices], self.levels, raw
        )


class StudyTable:
    """Immutable units-by-columns table with role-tagged, typed columns.

    Invariants checked at construction: all columns share one length,
    at most one column has the treatment role, and a treatment column
    is binary. (Operations that need a treatment column check for its
    presence themselves, so design tables for encouragement analyses
    may carry assignment and receipt as intermediates instead.)
    """

    def __init__(self, name: str, columns: Sequence[Column]):
        columns = tuple(columns)
        if not columns:
            raise SchemaError("a study table needs at least one column")
        n = len(columns[0])
        if n < 1:
            raise SchemaError("a study table needs at least one row")
        names = [c.name for c in columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names")
        for c in columns:
            if len(c) != n:
                raise SchemaError(
                    f"column {c.name!r} has length {len(c)}, expected {n}"
                )
        treatments = [c for c in columns if c.role == "treatment"]
        if len(treatments) > 1:
            raise SchemaError("more than one treatment column")
        if treatments and treatments[0].kind != "binary":
            raise SchemaError("treatment column must be binary")
        self.name = name
        self.columns = columns
        self.n_units = n
        self._by_name = {c.name: c for c in columns}

    def column(self, name: str) -> Column:
        try:
            return self._by_name[name]
        except KeyError:
            raise SchemaError(f"no column named {name!r}") from None

    def values(self, name: str) -> np.ndarray:
        return self.column(name).values

    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def with_role(self, role: str) -> tuple[Column, ...]:
        return tuple(c for c in self.columns if c.role == role)

    @property
    def covariates(self) -> tuple[Column, ...]:
        return self.with_role("covariate")

    @property
    def outcomes(self) -> tuple[Column, ...]:
        return self.with_role("outcome")

    def treatment_values(self) -> np.ndarray:
        treatments = self.with_role("treatment")
        if not treatments:
            raise SchemaError(f"table {self.name!r} has no treatment column")
        return treatments[0].values

    def drop(self, names: Iterable[str]) -> "StudyTable":
        drop = set(names)
        return StudyTable(self.name, [c for c in self.columns if c.name not in drop])

    def take(self, indices: np.ndarray) -> "StudyTable":
        return StudyTable(self.name, [c.take(indices) for c in self.columns])

    def to_csv(self, path) -> None:
        texts = [c.output_text() for c in self.columns]
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(self.column_names())
            for i in range(self.n_units):
                writer.writerow([t[i] for t in texts])


def require_design_table(table: StudyTable, operation: str) -> None:
    """Refuse outcome-bearing tables in design-phase operations."""
    present = [c.name for c in table.outcomes]
    if present:
        raise BlindingViolationError(
            f"{operation} is a design-phase operation but the table still carries "
            f"outcome columns {present}; quarantine them first"
        )


# ---------------------------------------------------------------------------
# Schema and CSV ingestion
# ---------------------------------------------------------------------------

_DEFAULT_KINDS = {"treatment": "binary", "unit_id": "categorical"}


@dataclass(frozen=True)
class ColumnSpec:
    role: str
    kind: str | None = None
    levels: tuple[str, ...] | None = None


class Schema:
    """Role map for CSV ingestion.

    JSON form::

        {"columns": {"age": {"role": "covariate", "kind": "numeric"},
                     "w":   "treatment",
                     "sex": {"role": "covariate", "kind": "categorical",
                             "levels": ["f", "m"]}}}

    Shorthand string values name the role. Kind defaults: treatment and
    unit_id columns default to binary / categorical respectively, all
    others to numeric. Header columns absent from the schema are ignored.
    """

    def __init__(self, columns: Mapping[str, ColumnSpec | str]):
        specs: dict[str, ColumnSpec] = {}
        for name, spec in columns.items():
            if isinstance(spec, str):
                spec = ColumnSpec(role=spec)
            if spec.role not in ROLES:
                raise SchemaError(f"unknown role {spec.role!r} for column {name!r}")
            kind = spec.kind or _DEFAULT_KINDS.get(spec.role, "numeric")
            if kind not in KINDS:
                raise SchemaError(f"unknown kind {kind!r} for column {name!r}")
            if spec.role == "treatment" and kind != "binary":
                raise SchemaError("treatment columns must be binary")
            specs[name] = ColumnSpec(spec.role, kind, spec.levels)
        self.columns = specs

    @classmethod
    def from_json(cls, doc: Mapping) -> "Schema":
        raw = doc.get("columns")
        if not isinstance(raw, Mapping):
            raise SchemaError('schema JSON needs a "columns" mapping')
        columns: dict[str, ColumnSpec | str] = {}
        for name, spec in raw.items():
            if isinstance(spec, str):
                columns[name] = spec
            elif isinstance(spec, Mapping):
                levels = spec.get("levels")
                columns[name] = ColumnSpec(
                    role=spec.get("role", ""),
                    kind=spec.get("kind"),
                    levels=tuple(levels) if levels is not None else None,
                )
            else:
                raise SchemaError(f"bad schema entry for column {name!r}")
        return cls(columns)

    def to_json(self) -> dict:
        out: dict[str, dict] = {}
        for name, spec in self.columns.items():
            entry: dict = {"role": spec.role, "kind": spec.kind}
            if spec.levels is not None:
                entry["levels"] = list(spec.levels)
            out[name] = entry
        return {"columns": out}


def _parse_numeric(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(
            f"cannot parse {text!r} as a number (row {row}, column {column!r})",
            row=row,
            column=column,
        ) from None
    if not math.isfinite(value):
        raise ParseError(
            f"non-finite value {text!r} (row {row}, column {column!r})",
            row=row,
            column=column,
        )
    return value


def load_csv(path, schema: Schema | Mapping) -> StudyTable:
    """Read an RFC-4180 CSV with a header row into a StudyTable.

    Only schema-named columns are ingested; the rest of the header is
    ignored. Missing cells are rejected outright rather than imputed.

    Raises
    ------
    SchemaError
        A schema-named column is absent from the header.
    ParseError
        A cell is empty or fails to parse; carries row and column.
    DataDomainError
        A treatment/binary cell is outside {0,1}.
    """
    if not isinstance(schema, Schema):
        schema = Schema(schema)
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        rows = list(reader)
    missing = [name for name in schema.columns if name not in header]
    if missing:
        raise SchemaError(f"schema columns missing from header: {missing}")
    if not rows:
        raise ParseError(f"{path}: no data rows")
    width = len(header)
    for i, row in enumerate(rows, start=1):
        if len(row) != width:
            raise ParseError(f"row {i} has {len(row)} cells, expected {width}", row=i)

    columns: list[Column] = []
    for name, spec in schema.columns.items():
        idx = header.index(name)
        cells = [row[idx] for row in rows]
        for i, cell in enumerate(cells, start=1):
            if cell == "":
                raise ParseError(
                    f"missing value (row {i}, column {name!r}); "
                    "incomplete rows are rejected, not imputed",
                    row=i,
                    column=name,
                )
        if spec.kind == "numeric":
            values = np.array(
                [_parse_numeric(c, i, name) for i, c in enumerate(cells, start=1)]
            )
        elif spec.kind == "binary":
            parsed = [_parse_numeric(c, i, name) for i, c in enumerate(cells, start=1)]
            for i, v in enumerate(parsed, start=1):
                if v not in (0.0, 1.0):
                    raise DataDomainError(
                        f"column {name!r} must be 0/1 but row {i} has {cells[i - 1]!r}"
                    )
            values = np.array(parsed)
        else:
            values = np.array(cells, dtype=object)
        columns.append(
            Column(name, spec.role, spec.kind, values, spec.levels, raw=tuple(cells))
        )
    return StudyTable(os.path.basename(str(path)), columns)


# ---------------------------------------------------------------------------
# Quarantine: sealed outcomes and the design protocol
# ---------------------------------------------------------------------------


def _canonical_payload(columns: Sequence[Column]) -> bytes:
    """Serialize outcome columns canonically: name line, then one value
    per line in row order, decimal text. This is both the sealed payload
    and the digest input, so any byte flip is detectable."""
    parts: list[str] = []
    for col in columns:
        parts.append(f"column {col.name}")
        parts.extend(col.rendered())
    return ("\n".join(parts) + "\n").encode("utf-8")


def sha256_hex(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


class SealedOutcomes:
    """Outcome columns held opaque behind a SHA-256 digest.

    The values cannot be read through this object; they come back only
    via :func:`unseal_outcomes` against a frozen protocol. Column names
    and kinds stay visible so reports can say *what* is sealed without
    seeing a single value.
    """

    def __init__(self, column_names, column_kinds, column_levels, payload, digest, sealed_at):
        self.column_names = tuple(column_names)
        self.column_kinds = tuple(column_kinds)
        self.column_levels = tuple(
            tuple(lv) if lv is not None else None for lv in column_levels
        )
        self.payload_digest = digest
        self.sealed_at = sealed_at
        self.__payload = bytes(payload)

    @classmethod
    def seal(cls, columns: Sequence[Column]) -> "SealedOutcomes":
        payload = _canonical_payload(columns)
        return cls(
            column_names=[c.name for c in columns],
            column_kinds=[c.kind for c in columns],
            column_levels=[c.levels for c in columns],
            payload=payload,
            digest=sha256_hex(payload),
            sealed_at=datetime.now(timezone.utc).isoformat(),
        )

    def __repr__(self):
        names = ", ".join(self.column_names)
        return f"<SealedOutcomes [{names}] digest={self.payload_digest[:12]}…>"

    def _payload_bytes(self) -> bytes:
        # internal: used only by unseal_outcomes and persistence
        return self.__payload

    def to_json(self) -> dict:
        import base64

        return {
            "column_names": list(self.column_names),
            "column_kinds": list(self.column_kinds),
            "column_levels": [
                list(lv) if lv is not None else None for lv in self.column_levels
            ],
            "payload_digest": self.payload_digest,
            "sealed_at": self.sealed_at,
            "payload_b64": base64.b64encode(self.__payload).decode("ascii"),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "SealedOutcomes":
        import base64

        return cls(
            column_names=doc["column_names"],
            column_kinds=doc["column_kinds"],
            column_levels=doc["column_levels"],
            payload=base64.b64decode(doc["payload_b64"]),
            digest=doc["payload_digest"],
            sealed_at=doc["sealed_at"],
        )


def quarantine_outcomes(table: StudyTable) -> tuple[StudyTable, SealedOutcomes]:
    """Strip all outcome columns from a table and seal them.

    Intermediate columns (compliance data and the like) stay visible:
    the design phase may inspect them, final outcomes it may not.

    Returns the outcome-free design table and the sealed container.
    """
    outcome_cols = table.outcomes
    if not outcome_cols:
        raise NothingToSealError(f"table {table.name!r} has no outcome columns to seal")
    sealed = SealedOutcomes.seal(outcome_cols)
    design = table.drop([c.name for c in outcome_cols])
    return design, sealed


def _parse_payload(sealed: SealedOutcomes) -> tuple[Column, ...]:
    text = sealed._payload_bytes().decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    blocks: dict[str, list[str]] = {}
    current: list[str] | None = None
    for line in lines:
        if line.startswith("column "):
            current = blocks.setdefault(line[len("column "):], [])
        elif current is not None:
            current.append(line)
        else:
            raise TamperError("sealed payload is malformed")
    columns = []
    for name, kind, levels in zip(
        sealed.column_names, sealed.column_kinds, sealed.column_levels
    ):
        if name not in blocks:
            raise TamperError(f"sealed payload is missing column {name!r}")
        cells = blocks[name]
        if kind == "numeric":
            values = np.array([float(c) for c in cells])
        elif kind == "binary":
            values = np.array([float(c) for c in cells])
        else:
            values = np.array(cells, dtype=object)
        columns.append(Column(name, "outcome", kind, values, levels))
    return tuple(columns)


def unseal_outcomes(sealed: SealedOutcomes, protocol: "DesignProtocol", audit=None):
    """Recover sealed outcome columns once the protocol is frozen.

    The payload digest is recomputed and must match; an audit record is
    appended to ``audit`` (any list-like) if one is supplied.

    Raises
    ------
    BlindingViolationError
        The protocol is not frozen.
    TamperError
        The payload does not hash to the recorded digest.
    """
    record = {
        "event": "unseal",
        "at": datetime.now(timezone.utc).isoformat(),
        "columns": list(sealed.column_names),
        "payload_digest": sealed.payload_digest,
    }
    if not protocol.frozen:
        record["refused"] = "protocol not frozen"
        if audit is not None:
            audit.append(record)
        raise BlindingViolationError(
            "outcomes are sealed until the design protocol is frozen"
        )
    recomputed = sha256_hex(sealed._payload_bytes())
    if recomputed != sealed.payload_digest:
        record["refused"] = "digest mismatch"
        if audit is not None:
            audit.append(record)
        raise TamperError(
            f"sealed payload digest mismatch: stored {sealed.payload_digest[:12]}…, "
            f"recomputed {recomputed[:12]}…"
        )
    columns = _parse_payload(sealed)
    record["freeze_digest"] = protocol.freeze_digest
    if audit is not None:
        audit.append(record)
    return columns


@dataclass(frozen=True)
class SubclassPlan:
    method: str  # "equal_frequency" | "equal_width"
    k: int

    def __post_init__(self):
        if self.method not in ("equal_frequency", "equal_width"):
            raise SchemaError(f"unknown subclassification method {self.method!r}")
        if self.k < 1:
            raise SchemaError("subclass count must be at least 1")


class DesignProtocol:
    """The analysis plan assembled during design, immutable once frozen.

    Freezing binds the model specification, the subclassification plan,
    and the unit-level subclass labels under one reproducible digest;
    after that, any attribute assignment raises.
    """

    def __init__(self, model_spec, subclass_plan: SubclassPlan, balance_thresholds=None):
        self.model_spec = model_spec
        self.subclass_plan = subclass_plan
        self.balance_thresholds = balance_thresholds
        self.labels: tuple[int, ...] | None = None
        self.freeze_digest: str | None = None
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def __setattr__(self, key, value):
        if getattr(self, "_frozen", False):
            raise FrozenProtocolError(
                f"protocol is frozen; cannot assign {key!r}"
            )
        super().__setattr__(key, value)

    def _digest_doc(self) -> dict:
        model = self.model_spec.to_json() if self.model_spec is not None else None
        return {
            "model_spec": model,
            "subclass_plan": {"method": self.subclass_plan.method, "k": self.subclass_plan.k},
            "labels": list(self.labels) if self.labels is not None else None,
        }

    def freeze(self, labels: Sequence[int]) -> str:
        """Freeze the protocol over the given subclass labels; returns the digest."""
        if self._frozen:
            raise FrozenProtocolError("protocol is already frozen")
        self.labels = tuple(int(v) for v in labels)
        doc = json.dumps(self._digest_doc(), sort_keys=True, separators=(",", ":"))
        self.freeze_digest = sha256_hex(doc.encode("utf-8"))
        self._frozen = True
        return self.freeze_digest

    def verify_digest(self) -> bool:
        if not self._frozen:
            return False
        doc = json.dumps(self._digest_doc(), sort_keys=True, separators=(",", ":"))
        return sha256_hex(doc.encode("utf-8")) == self.freeze_digest

    def to_json(self) -> dict:
        doc = self._digest_doc()
        doc["balance_thresholds"] = (
            self.balance_thresholds.to_json() if self.balance_thresholds else None
        )
        doc["frozen"] = self._frozen
        doc["freeze_digest"] = self.freeze_digest
        return doc

    @classmethod
    def from_json(cls, doc: Mapping, model_spec=None, balance_thresholds=None):
        from .propensity import ModelSpec

        plan = SubclassPlan(doc["subclass_plan"]["method"], int(doc["subclass_plan"]["k"]))
        if model_spec is None and doc.get("model_spec") is not None:
            model_spec = ModelSpec.from_json(doc["model_spec"])
        protocol = cls(model_spec, plan, balance_thresholds)
        if doc.get("frozen"):
            protocol.labels = tuple(int(v) for v in doc["labels"])
            protocol.freeze_digest = doc["freeze_digest"]
            protocol._frozen = True
            if not protocol.verify_digest():
                raise TamperError("stored freeze digest does not match protocol contents")
        return protocol


# ---------------------------------------------------------------------------
# Sample-size adequacy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdequacyVerdict:
    achieved_power: float
    required_n_per_arm: int
    passed: bool
    n_treated: int
    n_control: int
    effect_size: float
    alpha: float
    power_target: float


def adequacy_check(
    n_treated: int,
    n_control: int,
    effect_size: float,
    alpha: float = 0.05,
    power_target: float = 0.8,
) -> AdequacyVerdict:
    """Two-sample normal-approximation power check.

    Achieved power for a two-sided level-``alpha`` test of a
    standardized mean difference ``effect_size``:
    ``power = Phi(effect_size / sqrt(1/n_t + 1/n_c) - z_{1-alpha/2})``;
    the per-arm requirement for equal arms is
    ``n = 2 (z_{1-alpha/2} + z_{power})^2 / effect_size^2``, rounded up.
    """
    if n_treated < 1 or n_control < 1:
        raise DataDomainError("arm counts must be at least 1")
    if not (0 < alpha < 1) or not (0 < power_target < 1):
        raise DataDomainError("alpha and power_target must lie in (0, 1)")
    if effect_size <= 0:
        raise DataDomainError("effect_size must be positive")
    z_alpha = norm.ppf(1 - alpha / 2)
    z_power = norm.ppf(power_target)
    se = math.sqrt(1 / n_treated + 1 / n_control)
    achieved = float(norm.cdf(effect_size / se - z_alpha))
    required = math.ceil(2 * (z_alpha + z_power) ** 2 / effect_size**2)
    return AdequacyVerdict(
        achieved_power=achieved,
        required_n_per_arm=int(required),
        passed=achieved >= power_target,
        n_treated=int(n_treated),
        n_control=int(n_control),
        effect_size=float(effect_size),
        alpha=float(alpha),
        power_target=float(power_target),
    )


def table_digest(table: StudyTable) -> str:
    """SHA-256 over the canonical serialization of every column."""
    return sha256_hex(_canonical_payload(table.columns))
