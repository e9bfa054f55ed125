"""Multi-domain LiDAR range-image diffusion pipeline.

Subpackages cover the full desk-scale pipeline: a numpy autodiff core,
point-cloud/range-image geometry, multi-domain dataset construction,
a text/domain-conditioned denoiser, diffusion training and sampling,
and occupancy-histogram distribution metrics.
"""

__version__ = "0.1.0"
