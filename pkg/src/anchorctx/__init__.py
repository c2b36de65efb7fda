"""Anchor-context action detection with class-conditional diffusion refinement.

Modules:

* :mod:`anchorctx.autograd` - float64 reverse-mode differentiation on numpy
* :mod:`anchorctx.dataset`, :mod:`anchorctx.synthetic` - frame records and a planted-cue generator
* :mod:`anchorctx.acd` - anchor-keyed spatial/temporal attention detector
* :mod:`anchorctx.ccd` - prior-shifted diffusion over class prototypes, interval widths
* :mod:`anchorctx.metrics` - frame mAP and confidence tables
* :mod:`anchorctx.cli` - command-line workflow
"""

__version__ = "0.1.0"
