"""Desk-scale scene flow: disparity, warping and flow with 3D correlation."""

__version__ = "0.1.0"
