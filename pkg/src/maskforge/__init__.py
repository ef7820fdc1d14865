"""Coarse-to-fine weakly supervised segmentation: GrabCut enhancement and recursive pseudo-label refinement."""

__version__ = "0.1.0"
