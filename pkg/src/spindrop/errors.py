class SpinDropError(Exception):
    pass


class DimensionError(SpinDropError, ValueError):
    pass


class ParameterError(SpinDropError, ValueError):
    pass


class ConfigurationError(SpinDropError, ValueError):
    pass


class FormatError(SpinDropError, ValueError):
    """Malformed dataset, checkpoint or layout file.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IllegalTransitionError(SpinDropError, RuntimeError):
    pass


class DivergedTrainingError(SpinDropError, RuntimeError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: objective={value!r}")
        self.epoch = epoch
        self.batch = batch
        self.value = value
