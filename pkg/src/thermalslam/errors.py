"""Exception types shared across the toolkit.

The CLI maps these onto its exit-code contract: InputError -> 2,
EmptyResultError -> 3, anything else unexpected -> 1.
"""


class ThermalSlamError(Exception):
    pass


class InputError(ThermalSlamError):
    """Unusable input: missing files, unparseable formats, bad config keys."""


class EmptyResultError(ThermalSlamError):
    """A computation produced no usable result (e.g. zero associations)."""


class DegenerateOverlapError(ThermalSlamError):
    """Direct pose estimation ended with too little image overlap to trust."""
