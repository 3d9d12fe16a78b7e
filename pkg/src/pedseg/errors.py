"""Exception and warning types raised by the pipeline."""


class PedsegError(Exception):
    """Base class for all pipeline errors."""


class MissingFileError(PedsegError):
    """A referenced input file does not exist."""


class ShapeMismatchError(PedsegError):
    """Arrays that must share a shape do not."""


class HeaderMismatchError(PedsegError):
    """Spatial metadata disagrees across modalities beyond tolerance."""


class UnknownLabelError(PedsegError):
    """A label map contains a value outside its vocabulary."""


class NestingViolationError(PedsegError):
    """Region masks violate the ET within TC within WT hierarchy."""


class MisalignedPairError(PedsegError):
    """Image and label grids are not spatially aligned."""


class UnknownVariantError(PedsegError):
    """Requested model variant name is not one of the canonical eight."""


class InvalidSpecError(PedsegError):
    """Architecture description fails its invariants."""


class IndivisibleShapeError(PedsegError):
    """Spatial dims are not divisible by the network's downsampling factor."""


class EmptyDatasetError(PedsegError):
    """Training requested on a manifest with no labeled cases."""


class DivergedLossError(PedsegError):
    """Training loss became non-finite."""


class EmptyGroupError(PedsegError):
    """An ensemble fusion group contains no members."""


class OOMShapeError(PedsegError):
    """Requested inference window is too large for memory."""


class EmptyMaskError(PedsegError):
    """A surface-distance metric received an empty mask."""


class EmptyCohortError(PedsegError):
    """Cohort evaluation requested on zero cases."""


class ConfigError(PedsegError):
    """Pipeline configuration failed schema validation."""


class UntrainedModelWarning(UserWarning):
    """Inference requested from a model that has never been trained."""
