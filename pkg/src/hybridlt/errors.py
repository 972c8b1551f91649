"""
Exception hierarchy for the hybrid long-tail toolkit.
"""

from typing import Optional


class HybridLTError(Exception):
    """Base class for every error raised by hybridlt"""


class ConfigurationError(HybridLTError):
    """Invalid configuration, shapes or arguments"""


class StateError(HybridLTError):
    """Operation called in the wrong order (e.g. backward before forward)"""


class DegenerateInputError(HybridLTError):
    """Row norm below epsilon where a unit vector is required"""

    def __init__(self, message: str, row: Optional[int] = None,
                 class_id: Optional[int] = None, prototype_id: Optional[int] = None):
        super().__init__(message)
        self.row = row
        self.class_id = class_id
        self.prototype_id = prototype_id


class BatchCompositionError(HybridLTError):
    """Contrastive batch violates its composition contract"""

    def __init__(self, message: str, anchor: Optional[int] = None):
        super().__init__(message)
        self.anchor = anchor


class ScheduleRangeError(HybridLTError):
    """Curriculum queried outside [0, t_max]"""


class NonFiniteError(HybridLTError):
    """NaN or inf in a loss or gradient"""

    def __init__(self, message: str, parameter: Optional[str] = None,
                 epoch: Optional[int] = None, step: Optional[int] = None):
        super().__init__(message)
        self.parameter = parameter
        self.epoch = epoch
        self.step = step


class DataFormatError(HybridLTError):
    """Malformed dataset file"""

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message)
        self.offset = offset


class CheckpointError(HybridLTError):
    """Checkpoint cannot be read back"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field
