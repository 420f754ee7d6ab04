"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process exit codes without a lookup table.
"""


class CpsAttackError(Exception):
    exit_code = 1


class SchemaError(CpsAttackError, ValueError):
    exit_code = 2


class CapabilityMissing(CpsAttackError):
    exit_code = 3

    def __init__(self, missing, attack_class=None):
        self.missing = frozenset(missing)
        self.attack_class = attack_class
        names = ", ".join(sorted(str(c) for c in self.missing))
        prefix = f"{attack_class}: " if attack_class else ""
        super().__init__(f"{prefix}missing capability {names}")


class DivergedResponse(CpsAttackError):
    """Raised when a simulated signal leaves the divergence bound.

    ``partial`` holds whatever was simulated up to and including the
    offending sample (a list of outputs, or a partial trace object).
    """

    exit_code = 4

    def __init__(self, message, partial=None, step=None):
        super().__init__(message)
        self.partial = partial
        self.step = step


class OptimizationFailure(CpsAttackError):
    exit_code = 5


# lti-core
class InvalidTransferFunction(SchemaError):
    pass


class InvalidSample(CpsAttackError, ValueError):
    pass


class ZeroReference(CpsAttackError, ValueError):
    pass


# netloop
class ConflictingFault(SchemaError):
    pass


# identification
class PoorExcitation(OptimizationFailure):
    pass


class OrderMismatch(CpsAttackError, ValueError):
    exit_code = 2


class InjectionDenied(CapabilityMissing):
    pass


class MixedOrders(CpsAttackError, ValueError):
    pass


class InvalidWindow(CpsAttackError, ValueError):
    pass


# model-based attacks
class GoalUnreachable(OptimizationFailure):
    pass


class HorizonTooLarge(CpsAttackError, ValueError):
    exit_code = 2


# defense
class AlignmentError(CpsAttackError, ValueError):
    pass
