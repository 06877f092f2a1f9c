class TopoFusionError(Exception):
    """Base class for pipeline errors."""


class BlendDegenerate(TopoFusionError):
    """Dual quaternion blend with (near) zero real part."""


class DanglingSupport(TopoFusionError):
    """A surfel references a support node that is not in the graph."""


class SolverDiverged(TopoFusionError):
    """Gauss-Newton could not make progress even after raising the damping."""


class EmptyGraph(TopoFusionError):
    """An operation that needs graph nodes was called on an empty graph."""


class InitializationFailed(TopoFusionError):
    """First frame does not contain enough surfels to bootstrap the model."""


class SceneError(TopoFusionError):
    """Malformed scene script."""


class ParamsError(TopoFusionError):
    """Malformed or out of range parameter file."""
