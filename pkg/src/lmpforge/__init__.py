"""GAN-based spatio-temporal forecasting of real-time locational marginal prices.

A small numpy autodiff engine drives a convolutional generator that maps a
window of price matrices to the next one, trained adversarially against a
discriminator, with moving-average bias calibration at forecast time.
"""

from .data import FEATURES, FeatureSet, GridMap, NormalizationParams, PriceTensor
from .models import GAN, ModelConfig
from .trainer import TrainConfig

__all__ = ["FEATURES", "FeatureSet", "GAN", "GridMap", "ModelConfig", "NormalizationParams", "PriceTensor", "TrainConfig"]
__version__ = "0.1.0"
