"""Exception hierarchy for obsdesign.

Every failure mode callers are expected to branch on gets its own class;
the CLI maps these onto process exit codes.
"""


class ObsDesignError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(ObsDesignError):
    """A schema, column role map, or grouped-data layout is invalid."""


class ParseError(ObsDesignError):
    """A CSV cell could not be parsed; carries its location."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DataDomainError(ObsDesignError):
    """A value is outside its permitted domain (e.g. treatment not in {0,1})."""


class NothingToSealError(ObsDesignError):
    """Quarantine was requested on a table with no outcome columns."""


class BlindingViolationError(ObsDesignError):
    """Outcome data was touched, or requested, before the design was frozen."""


class TamperError(ObsDesignError):
    """Sealed payload bytes do not match the recorded digest."""


class FrozenProtocolError(ObsDesignError):
    """Attempted mutation of a frozen design protocol."""


class NoContrastError(ObsDesignError):
    """An estimator needs both arms but only one is present."""


class CollinearityError(ObsDesignError):
    """Design matrix is rank deficient; names the dependent columns."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class DegenerateColumnError(ObsDesignError):
    """A model term expands to a constant column."""


class InfeasibleSubclassError(ObsDesignError):
    """Requested subclass count exceeds what the scores can support."""


class DegenerateScoreError(ObsDesignError):
    """Scores are constant where variation is required."""


class TotalNonOverlapError(ObsDesignError):
    """No subclass contains units from both arms."""


class EmptyRestrictionError(ObsDesignError):
    """A range restriction removed every row."""


class ConstantCovariateError(ObsDesignError):
    """Standardized difference is undefined: pooled SD is zero."""


class WeakInstrumentError(ObsDesignError):
    """Estimated complier share is zero or negative; no compliers estimable."""

    def __init__(self, message, always_taker=None, never_taker=None):
        super().__init__(message)
        self.always_taker = always_taker
        self.never_taker = never_taker


class DegenerateMixtureError(ObsDesignError):
    """Expected complier counts are undefined for a degenerate mixture."""


class SimulationSpecError(ObsDesignError):
    """A simulation specification is internally inconsistent."""


class WorkspaceError(ObsDesignError):
    """Workspace directory is missing, locked, or structurally broken."""
