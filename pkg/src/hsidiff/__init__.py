"""Hyperspectral image classification with a differential-attention transformer.

The package is a self-contained toolkit: a small reverse-mode autodiff
core (``tensor``), a hyperspectral data pipeline (``data``), the
transformer model itself (``model``), training (``train``), evaluation
metrics (``metrics``), figure rendering (``plots``), built-in
diagnostics (``selftest``), and a command-line front end (``cli``).
"""

__version__ = "0.1.0"
