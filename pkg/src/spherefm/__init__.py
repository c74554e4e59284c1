"""Flow matching on products of hyperspheres, with directional feature alignment tools."""

__version__ = "0.1.0"
