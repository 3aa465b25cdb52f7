"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, StageError -> 3,
BudgetExhaustedError -> 4.
"""


class BPMinerError(Exception):
    """Base class for all bpminer errors."""


class ConfigError(BPMinerError):
    """Invalid configuration (bad file, missing path, bad template)."""


class TemplateError(ConfigError):
    """Prompt template violates its contract (placeholder count, schema)."""


class IngestError(BPMinerError):
    """A baseline file could not be parsed (bad gzip or XML)."""

    def __init__(self, source_file, message, position=None):
        self.source_file = source_file
        self.position = position
        where = f" at {position}" if position else ""
        super().__init__(f"{source_file}{where}: {message}")


class TransportError(BPMinerError):
    """Backend unreachable after the configured retries."""

    def __init__(self, message, pmid=None, retries=0):
        self.pmid = pmid
        self.retries = retries
        detail = f" (pmid={pmid}, retries={retries})" if pmid else f" (retries={retries})"
        super().__init__(message + detail)


class EmptyAnswerError(BPMinerError):
    """The backend returned a refusal or an empty answer."""

    def __init__(self, pmid=None):
        self.pmid = pmid
        super().__init__(f"backend returned an empty answer (pmid={pmid})")


class FitError(BPMinerError):
    """A mixture fit could not be performed (too few points, all fits failed)."""


class NumericError(BPMinerError):
    """Numerical failure during fitting (singular covariance, decreasing LL)."""


class StageError(BPMinerError):
    """A pipeline stage failed; the manifest records which one."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {message}")


class BudgetExhaustedError(BPMinerError):
    """The remote-request budget was exhausted; the run halted cleanly."""

    def __init__(self, budget):
        self.budget = budget
        super().__init__(f"backend request budget exhausted ({budget} requests)")
