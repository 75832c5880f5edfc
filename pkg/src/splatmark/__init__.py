"""Kinematic-aware watermarking of dynamic Gaussian-splat scenes.

Submodules:
  kinematics    trajectory derivatives, curvature, gating weights
  transport     entropic optimal transport between frame populations
  energy        gated spatio-temporal consistency energy and gradients
  splat_field   orthographic splat renderer with exact appearance Jacobian
  watermark     Haar pyramids, frozen decoder, losses, embedding loop
  attacks       image-space distortion suite and bit accuracy
  diffusion_pde anisotropic diffusion-reaction steady-state verification
  pipeline      scene synthesis, experiment orchestration, reports
"""

from . import (attacks, diffusion_pde, energy, kinematics, pipeline,
               splat_field, transport, watermark)

__version__ = "0.1.0"
