"""Latent identification from sparse perturbations."""

from ._sparsepert import *  # noqa: F401,F403
from ._sparsepert import __version__  # noqa: F401
