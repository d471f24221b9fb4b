"""Multimodal prediction and personalization of photo-edit sliders.

Conditional Gaussian-mixture VAEs over (image features, slider vector)
pairs, a hierarchical variant that clusters users by editing style, the
unimodal and mixture-density baselines they are compared against, a
synthetic ground-truth generator with an exact likelihood oracle, and the
evaluation protocols tying them together.
"""

__version__ = "0.1.0"
