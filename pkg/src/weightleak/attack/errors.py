class AttackError(RuntimeError):
    pass


class Unreachable(AttackError):
    """No probed magnitude up to the exponent bound saturates the neuron."""


class LostBracket(AttackError):
    """Observations along a search line are not consistent with one monotone crossing."""


class InsufficientThresholdDiversity(AttackError):
    """All convergence sets of a neuron sit on the same threshold value."""


class RankDeficient(AttackError):
    pass


class TargetUnreachable(AttackError):
    pass


class NoClassChange(AttackError):
    pass


class SignAmbiguous(AttackError):
    """Only sign-unknown convergence sets are available, so solving is declined."""
