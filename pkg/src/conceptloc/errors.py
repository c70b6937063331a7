"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation/configuration/argument
problems exit 1, capability gaps exit 2, runtime failures exit 3.
"""


class ConceptLocError(Exception):
    exit_code = 3


class ArgumentError(ConceptLocError, ValueError):
    exit_code = 1


class ConfigurationError(ConceptLocError, ValueError):
    exit_code = 1


class ValidationError(ConceptLocError, ValueError):
    """Raised with the complete list of violations, never just the first."""

    exit_code = 1

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class CapabilityError(ConceptLocError, RuntimeError):
    exit_code = 2


class TrainingStepError(ConceptLocError, RuntimeError):
    exit_code = 3

    def __init__(self, message, component=None):
        self.component = component
        super().__init__(message)


class DegenerateLayerError(ConceptLocError, ValueError):
    exit_code = 3

    def __init__(self, layer):
        self.layer = layer
        super().__init__(f"layer {layer!r} has zero norm; weight change rate undefined")
