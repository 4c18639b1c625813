"""MIMO U-Net: uncertainty-aware pixel-wise regression.

Multiple subnetworks trained inside one U-Net produce an implicit ensemble
in a single forward pass.  Each subnetwork predicts per-pixel Laplace
parameters; aggregation yields a posterior mean plus an aleatoric/epistemic
variance split, evaluated with calibration, sparsification, entropy-shift
and adversarial-robustness harnesses against MC-dropout and deep-ensemble
comparators.
"""

from .arch import (ArchConfig, MimoUNet, SubnetworkOutput, build_model,
                   checkpoint_hash, load_checkpoint, param_count,
                   save_checkpoint)
from .adversarial import AttackConfig, fgsm
from .baselines import (DropoutConfig, EnsembleConfig, dropout_predict,
                        ensemble_predict)
from .batching import (MimoBatch, RepetitionPolicy, make_eval_batch,
                       make_train_batch)
from .config import ConfigError, RunConfig, load_run_config, parse_run_config
from .data_io import (DatasetError, DatasetManifest, SynthTaskConfig,
                      SyntheticDataset, compute_ndvi, generate_synthetic,
                      load_dataset, mask_classes)
from .metrics import (CalibrationReport, SparsificationCurve, calibration,
                      entropy_histogram, mae, rmse, sparsification)
from .predictive import (LaplaceField, UncertaintyDecomposition,
                         decompose_variance, entropy_maps, laplace_cdf,
                         laplace_nll, mimo_loss, mixture_cdf, mixture_nll,
                         posterior_mean, to_laplace)
from .sync import SyncState, apply_weights, push_and_weight, softmax_weights
from .trainer import (EvalResult, TrainConfig, TrainingDiverged, TrainResult,
                      evaluate, per_submodel_nll, train)

__version__ = "0.1.0"
