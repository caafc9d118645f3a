"""Boosted cascade detectors for character information (carriage numbers,
digits 0-9) built on non-local binary-pattern features.
"""

from ._backend import NAME as BACKEND
from .boosting import TrainConfig, TrainingHalted, train_cascade, train_strong, train_weak
from .classifiers import (
    Cascade, StrongClassifier, WeakClassifier, eval_cascade, eval_strong, eval_weak,
    load_cascade, save_cascade,
)
from .features import (
    CS, DIGIT_APERTURE, HAAR, LBP, NUMBER_APERTURE, Aperture, FeatureDescriptor, census_code,
    enumerate_features, haar_response, lbp_code,
)
from .imaging import IntegralImage, Rect, build_integral, to_grayscale

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Aperture", "Cascade", "CS", "DIGIT_APERTURE", "FeatureDescriptor", "HAAR",
    "IntegralImage", "LBP", "NUMBER_APERTURE", "Rect", "StrongClassifier", "TrainConfig",
    "TrainingHalted", "WeakClassifier", "build_integral", "census_code", "enumerate_features",
    "eval_cascade", "eval_strong", "eval_weak", "haar_response", "lbp_code", "load_cascade",
    "save_cascade", "to_grayscale", "train_cascade", "train_strong", "train_weak",
]
