"""Layered video decomposition with editable time-independent textures.

A video is decomposed into per-layer texture maps, per-frame soft masks,
and multiplicative lighting residuals by small coordinate networks over
hash-grid encodings. Edits made once in texture space propagate to every
frame, with a precomputed decomposition cache for real-time re-rendering.
"""

__version__ = "0.1.0"
