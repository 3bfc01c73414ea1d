"""Diffeomorphic cardiac motion estimation with latent diffusion refinement.

The pipeline: geodesic-shooting registration estimates initial velocity
fields between a reference frame and each later frame of a cine sequence;
an encoder compresses those motions into latent features; a denoising
diffusion model with spatially smoothed noise refines the latents; a
motion decoder reconstructs dense displacement fields; strain analytics
summarize the recovered deformation over the myocardium.
"""

__version__ = "0.1.0"
