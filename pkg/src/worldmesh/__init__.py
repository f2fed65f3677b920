"""worldmesh: geometry-first mesh scaffolds for multi-room scene synthesis."""

__version__ = "0.1.0"
