"""Adversarial attacks on longitudinal two-exam image classifiers.

A Source (single-exam) classifier is attacked in the white-box sense and the
resulting adversarial Current exams are transferred to a Target model that
consumes (Prior, Current) pairs. The package ships a small float64 autodiff
engine, the two model architectures, gradient-sign and optimization attacks
plus distance-guided and knowledge-guided variants, a synthetic longitudinal
cohort generator, and a cross-validated transfer-evaluation harness.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward  # noqa: F401
