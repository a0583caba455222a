"""Exception types shared across the toolkit."""


class CrossganError(Exception):
    """User-facing error: bad input, bad config, missing file."""


class NonFiniteLossError(CrossganError):
    """Training aborted because a loss went NaN/inf; a diagnostic checkpoint was written."""

    def __init__(self, message, checkpoint_dir=None):
        super().__init__(message)
        self.checkpoint_dir = checkpoint_dir
