"""Property- and text-conditioned protein sequence generation at desk scale.

Pipeline: amino-acid descriptors -> sequence CVAE -> text/descriptor
aligner -> latent diffusion -> decoded sequences, plus sequence metrics.
"""
__version__ = "0.1.0"

from .aligner import BioAligner  # noqa: E402
from .cvae import SequenceCVAE  # noqa: E402
from .diffusion import LatentDiffusion  # noqa: E402
from .features import PhyschemFeaturizer  # noqa: E402

__all__ = ["PhyschemFeaturizer", "SequenceCVAE", "BioAligner", "LatentDiffusion", "__version__"]
