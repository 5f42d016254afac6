"""Joint-based face rig with learned linear and neural skinning weights."""

__version__ = "0.1.0"
