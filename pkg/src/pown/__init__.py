"""Prototypical open-world node classification for homophilic graphs.

The library learns one prototype vector per known and per potential new
class on top of a graph-convolutional encoder, trained with a weighted
combination of a supervised prototype loss, a graph-infomax loss, a
pseudo-label loss driven by weighted label propagation, and a spread
regularizer. Evaluation uses Hungarian-matched accuracies against GCN,
DGI+k-means, and spectral-clustering baselines.
"""

from . import (
    baselines,
    encoder,
    evaluation,
    experiment,
    graphdata,
    infomax,
    ndtensor,
    prototypes,
    pseudolabel,
    trainer,
)

__version__ = "0.1.0"
