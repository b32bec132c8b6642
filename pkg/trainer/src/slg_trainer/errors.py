class TrainerError(Exception):
    """Base class for everything this package raises on purpose."""


class DatasetMismatchError(TrainerError):
    """A manifest dataset is missing, malformed, or labeled for the wrong expert.

    Raised during up-front validation, before any training starts, so a bad
    manifest never produces partial artifacts.
    """


class TrainingFailedError(TrainerError):
    """Training aborted mid-run. Completed adapters stay on disk.

    ``completed`` names the adapters that finished before the failure.
    """

    def __init__(self, message: str, completed: tuple[str, ...] = ()):
        super().__init__(message)
        self.completed = completed
