"""
hybridlt: hybrid supervised-contrastive / cross-entropy training for
long-tailed classification on a hand-wired numpy MLP.
"""

from .config import DataConfig, ExperimentConfig, TrainConfig, load_experiment_config
from .data import (ClassBalancedSampler, Dataset, LongTailSpec, RandomSampler, class_counts,
                   compose_sc_batch, load_cifar_binary, make_views, sample_class_balanced,
                   sample_random, subsample_longtail, synth_gaussian_longtail)
from .errors import (BatchCompositionError, CheckpointError, ConfigurationError, DataFormatError,
                     DegenerateInputError, HybridLTError, NonFiniteError, ScheduleRangeError,
                     StateError)
from .experiments import run_experiment_matrix
from .losses import (CurriculumSchedule, EmbeddingBatch, LogitsBatch, ce_loss, curriculum_alpha,
                     hybrid_loss, mpsc_loss, psc_affinity_gradients, psc_loss, sc_loss)
from .metrics import EvalReport, evaluate
from .model import HybridNetwork, ModelConfig, PrototypeBank, renormalize_prototypes
from .numerics import (DenseLayer, L2Normalize, ParamTensor, ReLU, SgdConfig, dense_forward,
                       finite_diff_gradient, l2_normalize_rows, sgd_step)
from .training import HybridTrainer, RunReport, train, train_two_stage

__version__ = "0.1.0"
