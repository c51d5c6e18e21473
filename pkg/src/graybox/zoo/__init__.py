from .classifier import (EXTRACTORS, FUSIONS, MultimodalModel, Prediction, clean_accuracy,
                         encode_texts, train_classifier)
from .detector import Detector, extract_region_features, pretrain_detector, top_cells
from .layers import TrainingFailure
from .public import PublicModel, train_public

__all__ = [
    "EXTRACTORS", "FUSIONS", "Detector", "MultimodalModel", "Prediction", "PublicModel",
    "TrainingFailure", "clean_accuracy", "encode_texts", "extract_region_features",
    "pretrain_detector", "top_cells", "train_classifier", "train_public",
]
