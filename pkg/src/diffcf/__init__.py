"""Diffusion-based collaborative filtering conditioned on multi-hop
user-item connectivity, built on a self-contained reverse-mode autodiff
core. See the module docstrings for the layer-by-layer story:

- dataset:  parsing, holdout splits, binary matrix format
- graph:    hop-distance level sets, context encoding, cache format
- ndtensor: tape autodiff, Adam, gradient checking, checkpoints
- schedule: noise schedule and closed-form corruption/posterior
- camae:    the cross-attention multi-hop autoencoder denoiser
- train:    objective, epoch loop, fit driver
- eval:     iterative denoising inference and ranking metrics
- bench:    scaling and attention-compression probes
- cli:      subcommands over all of the above
"""

__version__ = "0.1.0"
