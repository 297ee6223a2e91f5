"""Dual-stream aorta segmentation with a Bayesian Laplacian-of-Gaussian stream."""
from .voxelio import (LabeledCrop, LabeledVolume, PhantomSpec, Volume, augment, crop_blocks,
                      load_volume, make_phantom, normalize, resample, write_volume)
from .logkernel import LoGKernel, convolve3, discretize, gaussian3, log3, make_bank
from .bayeslayer import ElboTerms, VariationalKernel, elbo, kl_divergence, sample_weights
from .network import LoGBNet, ModelOutput, NetworkConfig, predict
from .gate import BalancedBatch, GateState, fg_ratio, gate_bypass, gate_push
from .trainer import (Checkpoint, TrainConfig, dice_loss, load_checkpoint, save_checkpoint,
                      total_loss, train)
from .metrics import MetricsReport, asd, dice, evaluate, hausdorff, surface_voxels
from .uqinfer import (PredictionEnsemble, UncertaintyMap, boundary_width_stat, confidence_bounds,
                      export_surface, mc_predict)

__version__ = "0.1.0"
