"""Attribute concealment in speaker-embedding vectors, with privacy and
utility evaluation.

Submodules
----------
corpus        data model, synthetic generator, corpus files
preprocess    standardisation + length normalisation
classifier    the pre-trained linear attribute scorer
calibration   PAV isotonic calibration, score files
autoencoder   adversarial disentangling autoencoder, protection transform
metrics       AUC/EER/Cllr/ECE, zero-evidence report, mutual information
plda          LDA + two-covariance PLDA speaker-verification backend
cli           end-to-end pipeline commands
backend       compiled-vs-python kernel selection
"""

from .backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
