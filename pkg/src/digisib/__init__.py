"""Digital-sibling cohorts from a latent diffusion model, at phantom scale."""
from .core import Cohort, LabelMap, Latent, LatentMask, Provenance, RngStream, TissueId

__version__ = "0.1.0"

__all__ = ["Cohort", "LabelMap", "Latent", "LatentMask", "Provenance", "RngStream", "TissueId"]
