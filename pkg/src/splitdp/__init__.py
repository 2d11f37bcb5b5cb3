"""Laplace perturbation of split-inference feature maps and the white-box
reconstruction attack against it."""

from .errors import ConfigurationError, IngestionError, InputError, NumericalError
from .splitnet import (ArchitectureSpec, ConvLayer, SplitCase, SplitModel, build_model,
                       forward_local, forward_remote, input_gradient, install_local,
                       load_checkpoint, pretrain_local, save_checkpoint)
from .privacy import (BoundEstimate, PrivacyParams, clip, estimate_bound, laplace_sample,
                      nullify, perturb)
from .training import (AccuracyReport, TrainConfig, evaluate, noisy_finetune,
                       train_baseline)
from .attack import (AttackConfig, ReconstructionResult, attack_batch, attack_loss,
                     reconstruct, total_variation)
from .metrics import MetricsRecord, SsimParams, mse, psnr, ssim
from .data import DatasetSpec, ImageDataset, load_dataset, synthetic_dataset
from .harness import (ExperimentConfig, ExperimentRecord, export_grid, read_results, run_cell,
                      sweep, write_results)

__version__ = "0.1.0"
