"""Exception hierarchy shared by every neurotext module.

Library code raises these; only the command line entry point catches them.
"""


class NeurotextError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(NeurotextError, ValueError):
    """A shape, range or precondition contract was broken by the caller."""


class AutogradError(ContractViolation):
    """Misuse of the tape: non-scalar backward, or backward over a released graph."""


class ConfigurationError(NeurotextError):
    """Invalid configuration, unknown key, or a missing upstream artifact."""


class CorpusError(NeurotextError):
    """The corpus cannot be used as given (empty, out-of-vocabulary tokens)."""


class GenerationError(NeurotextError):
    """The synthetic corpus generator cannot satisfy the requested configuration."""


class LeakageError(NeurotextError):
    """A pair id appears in more than one split."""


class TrainingDiverged(NeurotextError):
    """A training loss became NaN or infinite."""

    def __init__(self, stage, epoch, step, loss):
        self.stage = stage
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"{stage}: loss diverged to {loss} at epoch {epoch}, step {step}")


class InvariantViolation(NeurotextError):
    """A frozen parameter was modified or received gradient."""


class CheckpointError(NeurotextError):
    """A checkpoint file is malformed or inconsistent."""


class RunLockedError(NeurotextError):
    """Another command currently holds the run directory lock."""
