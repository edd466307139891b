"""Spatio-temporal AU relational graph learning for facial action unit detection."""
from .data import AU_NAMES
from .encoder import EncoderConfig, FrameSequence, MaskedAutoencoder, MaskSpec, sample_mask
from .graph import AUDetector, STGLConfig, build_knn_graph, sc_scores
from .objectives import AUPredictions, ConfusionCounts, asymmetric_au_loss, f1_scores, masked_mse_loss

__version__ = "0.1.0"

__all__ = [
    "AU_NAMES", "EncoderConfig", "FrameSequence", "MaskedAutoencoder", "MaskSpec", "sample_mask",
    "AUDetector", "STGLConfig", "build_knn_graph", "sc_scores",
    "AUPredictions", "ConfusionCounts", "asymmetric_au_loss", "f1_scores", "masked_mse_loss",
]
