"""Convolutional-autoencoder pre-processing layers for FCN-8s segmentation, on numpy."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import VOID, Dataset, SegSample, SyntheticSpec, generate_synthetic
from .errors import CaeplError
from .kernels import BACKEND
from .layers import ModelGraph, he_normal_init
from .metrics import ConfusionMatrix, mean_iou, pixel_accuracy
from .models import (AESpec, FCNSpec, build_autoencoder, build_fcn8s, build_variant, compose_caepl,
                     count_parameters, search_ae_config, transfer_encoder_weights)
from .tensor import RngStream, Tensor
from .training import TrainConfig, train_autoencoder, train_segmenter

__version__ = "0.1.0"
