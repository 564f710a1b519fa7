"""Iterative decoding laboratory.

Sequence-to-sequence tasks (string editing, Cartesian products, query
parsing) with step-wise supervision, a small encoder-decoder transformer
built on a numpy autodiff substrate, and the training / prediction /
evaluation tooling around them.
"""

__version__ = "0.1.0"
