"""Exception hierarchy shared by all hybridsim modules.

Every error carries a short machine-readable ``code`` so the CLI and the
HTTP service can report failures uniformly (``CODE: message``).
"""


class HybridSimError(Exception):
    """Base class for all user-facing errors."""

    code = "ERROR"


class ConfigError(HybridSimError):
    """Malformed or inconsistent configuration document."""

    code = "CONFIG_INVALID"


class ConfigNotFoundError(ConfigError):
    """A referenced configuration file does not exist."""

    code = "CONFIG_NOT_FOUND"


class TopologyError(ConfigError):
    """Topology document violates a structural invariant."""

    code = "TOPOLOGY_INVALID"


class CatalogError(ConfigError):
    """Catalog document violates a structural invariant."""

    code = "CATALOG_INVALID"


class WorkloadError(ConfigError):
    """Workload specification violates a structural invariant."""

    code = "WORKLOAD_INVALID"


class ControllerConfigError(ConfigError):
    """Controller configuration is dimensionally or structurally inconsistent."""

    code = "CONTROLLER_INVALID"


class PlacementError(HybridSimError):
    """A placement fails validation against catalog and topology."""

    code = "PLACEMENT_INVALID"


class NoRouteError(HybridSimError):
    """No route exists for a (client_class, target_node) pair."""

    code = "NO_ROUTE"


class CapacityError(HybridSimError):
    """A capacity schedule violates a node's vm_min/vm_max bounds."""

    code = "CAPACITY_INVALID"


class IdentificationError(HybridSimError):
    """Least-squares model fit failed (insufficient excitation)."""

    code = "IDENTIFICATION_FAILED"


class NoStableGainError(HybridSimError):
    """Gain tuning found no candidate with a stable closed loop."""

    code = "NO_STABLE_GAIN"


class EnumerationTooLargeError(HybridSimError):
    """Exhaustive placement search would exceed the instance guard."""

    code = "INSTANCE_TOO_LARGE"


class InternalInvariantError(Exception):
    """A simulator self-check failed; indicates a bug, not a user error."""

    code = "INTERNAL"
