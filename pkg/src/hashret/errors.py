"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: input problems (bad files,
bad references, bad arguments) exit 2, empty retrieval results exit 3,
and numeric failures during training exit 4.
"""


class HashretError(Exception):
    """Base class for all package-specific errors."""


class CorpusError(HashretError):
    """Corpus file is malformed or violates a corpus invariant."""


class FormatError(HashretError):
    """A binary artifact (embeddings, head, codes) is malformed."""


class EmptyResultError(HashretError):
    """A retrieval or assembly step produced nothing to work with."""


class NumericError(HashretError):
    """Training produced a non-finite value."""
