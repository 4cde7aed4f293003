"""
attn_margin
===========

Max-margin token selection for single-layer softmax attention: the attention
model and its exact gradients, the max-margin programs that characterize where
gradient descent on the attention weights points, and the geometric diagnostics
and reference experiments that check the two against each other.
"""

from importlib.metadata import PackageNotFoundError, version


try:
    __version__ = version("attn-margin")
except PackageNotFoundError:  # pragma: no cover - occurs in local dev before install
    __version__ = "0.0.0"

__all__ = ["__version__"]
