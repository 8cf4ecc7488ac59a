"""Desk-scale audio-visual generation and separation on synthetic data.

Train a split-embedding separator on mixed harmonic signals, align its
halves contrastively with frozen reference embeddings, and render composite
or per-source glyph scenes from the halves.
"""

from .config import RunConfig, load_config
from .errors import MixsceneError
from .tensor import GradGraph, Tensor

__all__ = ["GradGraph", "MixsceneError", "RunConfig", "Tensor", "load_config"]
__version__ = "0.1.0"
