"""Iterative self-supervised speaker embedding learning on synthetic data.

Contrastive pretraining, k-means pseudo labels with confidence purification,
and repeated cross-entropy retraining, all in numpy.
"""

__version__ = "0.1.0"
