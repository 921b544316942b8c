"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to a
category-coded process status.
"""


class CladError(Exception):
    exit_code = 1
    category = "error"


class InputError(CladError, ValueError):
    exit_code = 2
    category = "input"


class ConfigError(CladError, ValueError):
    exit_code = 3
    category = "config"


class IngestionError(CladError):
    exit_code = 4
    category = "ingestion"

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class FormatError(CladError, ValueError):
    exit_code = 5
    category = "format"


class DecodeError(FormatError):
    """Token stream ended in the middle of a token."""


class StateError(CladError):
    exit_code = 6
    category = "state"


class LoadError(CladError):
    exit_code = 7
    category = "load"


class TrainingError(CladError):
    exit_code = 8
    category = "training"


class MissingArtifactError(CladError):
    exit_code = 9
    category = "missing-artifact"
