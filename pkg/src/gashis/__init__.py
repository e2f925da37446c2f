"""Two-branch histopathology image classifier built on a small numpy autograd engine.

Modules:

* :mod:`gashis.tensor` - reverse-mode autograd tensors and differentiable ops
* :mod:`gashis.nn` - parameter containers and basic layers
* :mod:`gashis.attention` - multi-head self-attention with 2D relative positions
* :mod:`gashis.model` - the global (attention) and local (Inception) branches, head, fp16 variant
* :mod:`gashis.checkpoint` - binary checkpoint container
* :mod:`gashis.preprocess` - normalization, augmentation, tiling, splitting, synthetic data
* :mod:`gashis.training` - AdamW, plateau schedule, training loop
* :mod:`gashis.evaluation` - confusion matrices, criteria, feature export
* :mod:`gashis.robustness` - attacks, noise and epsilon sweeps
* :mod:`gashis.cli` - the ``gashis`` command
"""

__version__ = "0.1.0"
