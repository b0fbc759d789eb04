"""Exception hierarchy shared by every stage of the pipeline."""


class TrainProveError(Exception):
    """Base class for all errors raised by this package."""

    code = "internal"


class DomainError(TrainProveError, ValueError):
    code = "domain_error"


class InsufficientBatches(TrainProveError, ValueError):
    """A Grubbs reference set needs at least three values."""

    code = "insufficient_batches"


class ZeroVariance(TrainProveError, ArithmeticError):
    """The reference set has zero sample standard deviation."""

    code = "zero_variance"

    def __init__(self, message, reference_mean=None, candidate_mean=None):
        super().__init__(message)
        self.reference_mean = reference_mean
        self.candidate_mean = candidate_mean


class InvalidLogits(TrainProveError, ValueError):
    code = "invalid_logits"


class ZeroVector(TrainProveError, ValueError):
    code = "zero_vector"


class SpecMismatch(TrainProveError, ValueError):
    code = "spec_mismatch"


class MissingClass(TrainProveError, ValueError):
    code = "missing_class"


class NumericalOverflow(TrainProveError, ArithmeticError):
    code = "numerical_overflow"

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class QueryFailed(TrainProveError, RuntimeError):
    code = "query_failed"

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class UndefinedF1(TrainProveError, ZeroDivisionError):
    code = "undefined_f1"


class OneClassOnly(TrainProveError, ValueError):
    code = "one_class_only"
