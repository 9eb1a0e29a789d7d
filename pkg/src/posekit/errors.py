"""Exception types raised across the package."""


class PosekitError(Exception):
    """Base class for all posekit errors."""


class NoLabeledKeypoints(PosekitError):
    """Ground-truth pose has no keypoint with v > 0."""


class InvalidArea(PosekitError):
    """Area must be strictly positive."""


class DegeneratePose(PosekitError):
    """Pose has too few usable keypoints to span a box."""


class CenterUndefined(PosekitError):
    """Requested anatomical center cannot be derived from the labeled keypoints."""


class InvalidKernel(PosekitError):
    """Gaussian kernel sigma must be strictly positive."""


class OutOfBounds(PosekitError):
    """Coordinate falls outside the grid."""


class NoOverlap(PosekitError):
    """Two poses share no mutually labeled keypoint."""


class NotNormalized(PosekitError):
    """Feature vector is not unit-norm within tolerance."""


class EmptyGroup(PosekitError):
    """Pose group has no members."""


class ShapeError(PosekitError):
    """Tensor or vector dimensions do not match."""


class EmptyDataset(PosekitError):
    """Training requires at least one sample."""


class InvalidDrop(PosekitError):
    """Ground-truth drop request would remove every annotation."""


class ModelMissing(PosekitError):
    """A trained model file is required but absent."""


class UsageError(PosekitError):
    """Invalid command-line or config usage."""
