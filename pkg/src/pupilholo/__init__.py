"""Pupil-adaptive 3D computer-generated holography at desk scale."""

__version__ = "0.1.0"
