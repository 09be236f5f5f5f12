"""Cluster-guided all-in-one image restoration at desk scale."""
from .degradations import degrade, make_dataset, procedural_images
from .errors import ClusIRError, NumericalError, ParameterError, ShapeError, StateError, TrainingError
from .metrics import ms_ssim, psnr, ssim
from .model import ClusIR, ModelConfig, load_checkpoint, restore, save_checkpoint
from .training import TrainConfig, evaluate, run_ablation, train
from .wavelets import amp_phase, dwt2, idwt2, recompose

__version__ = "0.1.0"
