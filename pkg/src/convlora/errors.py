"""Failure classes shared across modules, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Bad run configuration or unusable inputs (CLI exit code 2)."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradients during optimization (CLI exit code 3)."""


class CompatibilityError(ValueError):
    """Mismatched shapes, configs, or class vocabularies (CLI exit code 4)."""
