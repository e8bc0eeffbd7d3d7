"""Occlusion-aware memory-based refinement for video lane detection, at desk scale."""

__version__ = "0.1.0"
