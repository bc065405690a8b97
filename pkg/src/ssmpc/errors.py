"""Exception types raised across the package."""


class SsmpcError(Exception):
    """Base class for all errors raised by ssmpc."""


class NumericBlowup(SsmpcError):
    def __init__(self, msg="numeric blowup"):
        super().__init__(msg)


class InfeasibleInput(SsmpcError):
    def __init__(self, msg="infeasible input"):
        super().__init__(msg)


class InsufficientSamples(SsmpcError):
    def __init__(self, msg="insufficient samples"):
        super().__init__(msg)


class RankDeficient(SsmpcError):
    def __init__(self, msg="rank deficient"):
        super().__init__(msg)


class IllPosed(SsmpcError):
    def __init__(self, msg="ill-posed"):
        super().__init__(msg)


class UnstableLinearPart(SsmpcError):
    """Fitted linear dynamics have an eigenvalue with non-negative real part."""

    def __init__(self, eigenvalues, msg="unstable linear part"):
        self.eigenvalues = eigenvalues
        super().__init__(f"{msg}: max Re(eig) = {max(e.real for e in eigenvalues):.3e}")


class Unidentifiable(SsmpcError):
    def __init__(self, msg="unidentifiable"):
        super().__init__(msg)


class PredictionBlowup(SsmpcError):
    def __init__(self, msg="prediction blowup"):
        super().__init__(msg)


class DimensionMismatch(SsmpcError, ValueError):
    def __init__(self, msg="dimension mismatch"):
        super().__init__(msg)
