"""Exception hierarchy. The CLI maps each class to its own exit code."""


class TensorMatchError(Exception):
    code = 1
    name = "error"


class ConfigurationError(TensorMatchError, ValueError):
    code = 2
    name = "configuration"


class MissingFileError(TensorMatchError, FileNotFoundError):
    code = 3
    name = "missing_file"


class VolumeFormatError(TensorMatchError, ValueError):
    code = 4
    name = "malformed_file"


class DegenerateTemplateError(TensorMatchError, ValueError):
    code = 5
    name = "degenerate_template"
