"""Deconvolutional generative model: rendering, CNN inference, EM training and bound checks."""

from .estimator import DGMClassifier
from .inference import forward, posterior, reconstruct
from .model import Architecture, DgmParams, LayerSpec, init_params, load_params, mnist_stack, save_params
from .training import TrainConfig, em_train, evaluate

__all__ = ["Architecture", "DGMClassifier", "DgmParams", "LayerSpec", "TrainConfig", "em_train", "evaluate",
           "forward", "init_params", "load_params", "mnist_stack", "posterior", "reconstruct", "save_params"]
