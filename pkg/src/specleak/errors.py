"""Exception types shared across the testbed."""


class SpecleakError(Exception):
    """Base class for all testbed errors."""


class UnknownWordError(SpecleakError):
    """A word is not in the vocabulary and the UNK policy is disabled."""

    def __init__(self, word: str):
        super().__init__(f"unknown word: {word!r} (UNK policy disabled)")
        self.word = word


class CorpusError(SpecleakError):
    """Corpus file is empty, unreadable, or malformed."""


class ConfigError(SpecleakError):
    """Invalid experiment or session configuration."""


class PaddingOverflowError(ConfigError):
    """A payload exceeds the constant-pad target size."""

    def __init__(self, seq: int, payload_len: int, target_size: int):
        super().__init__(
            f"packet seq={seq} payload of {payload_len} bytes exceeds "
            f"constant pad target of {target_size} bytes"
        )
        self.seq = seq
        self.payload_len = payload_len
        self.target_size = target_size


class MitigatedSessionError(SpecleakError):
    """An attack that needs per-iteration token counts was given a mitigated session."""


class SessionError(SpecleakError):
    """Transport failure while serving; the partial log is preserved."""

    def __init__(self, message: str, partial_log=None):
        super().__init__(message)
        self.partial_log = partial_log
