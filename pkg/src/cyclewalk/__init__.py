"""Fully convolutional cycle-consistency learning on space-time graphs.

Subpackages and modules:

- ``autodiff``: small reverse-mode tensor engine (conv, softmax, grid sampling)
- ``encoder``: convolutional encoder producing unit-norm node features
- ``transforms``: random crop/flip affine transforms, feature warping, validity masks
- ``walk``: transition matrices and the masked multi-length cycle loss
- ``data``: synthetic clip generator, augmentation, PNM and clip I/O
- ``propagation``: top-k label propagation and match/region scoring
- ``diagnostics``: diagonality, position probe and PCA exports
- ``train``, ``evaluate``, ``experiments``, ``cli``: training loop and tooling
"""

__version__ = "0.1.0"
