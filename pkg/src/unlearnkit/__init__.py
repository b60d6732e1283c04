"""Machine unlearning toolkit.

Unlearns designated samples from a trained classifier by perturbing retained
data away from the forgotten data's feature distribution via entropic
optimal transport, with a dynamic-forgetting loop, membership-inference-based
forgetting scores, a combined utility/forgetting score, and a synthetic data
generator with a controllable identity/task feature overlap.
"""

__version__ = "0.1.0"

from .data import Dataset, DatasetSplits, GenConfig, generate, load_dataset, make_splits, save_dataset
from .engine import (AccessLog, IterationRecord, MethodKind, RunHistory, UnlearnConfig,
                     dlfd_run, errormax_run, finetune_run, linear_weight, neggrad_run,
                     one_epoch_iterations, perturb_batch, retrain_run)
from .errors import ConfigError, ConsistencyError, DataFormatError, NumericError
from .metrics import (HistogramBin, LossDistribution, MiaResult, NomusReport,
                      classification_accuracy, loss_histogram, make_nomus_report,
                      mia_forgetting_evaluator, nomus, sample_losses, train_mia)
from .nn import (ForwardTrace, GradientBundle, MlpModel, backward, cross_entropy,
                 feature_extract, feature_vjp, forward, init_model, load_model,
                 model_from_bytes, model_to_bytes, save_model, sgd_step)
from .ot import (CostMatrix, SinkhornConfig, TransportPlan, cost_matrix,
                 exact_ot_bruteforce, ot_loss, ot_loss_grad_features, sinkhorn_plan,
                 uniform_marginal)
