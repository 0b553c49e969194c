"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto
its documented exit statuses without a lookup table.
"""


class GSTError(Exception):
    exit_code = 4


class ConfigError(GSTError):
    exit_code = 2


class ProviderError(GSTError):
    """Remote LLM or embedding service failed after all retries."""

    exit_code = 3


class ParseFailure(ProviderError):
    def __init__(self, message, raw=None):
        super().__init__(message)
        self.raw = raw


class ContractError(GSTError, ValueError):
    """Input violates an operation's preconditions."""


class DimensionMismatch(ContractError):
    pass


class ZeroVectorError(ContractError):
    pass


class DegenerateInput(ContractError):
    pass


class MissingEmbedding(ContractError, KeyError):
    def __init__(self, *ids):
        self.ids = list(ids)
        super().__init__(", ".join(map(str, ids)))

    def __str__(self):
        return "missing embeddings for ids: " + ", ".join(map(str, self.ids))


class DuplicateId(ContractError):
    pass


class StoreCorrupt(GSTError):
    pass


class TrainingDiverged(GSTError):
    pass


class FixtureMissing(ProviderError):
    """Mock fixture has no response for a (kind, key) pair."""
