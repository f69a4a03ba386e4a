"""EATA and EATA-C test-time adaptation on a numpy autodiff core, with a desk-scale benchmark."""

from .autodiff import NonFiniteError, ShapeError, Tensor, backward, grad
from .data import CORRUPTIONS, CorruptionSpec, DatasetSpec, corrupt, domain_stream, generate_dataset
from .engine import (METHODS, SCENARIOS, AdaptConfig, AdaptationError, Adapter, Batch, adapt_batch_eata,
                     adapt_batch_eatac, run_stream)
from .fisher import FisherMap, estimate_fisher, regularizer
from .metrics import EceAccumulator, RunReport, disagreement_audit, ece, forgetting_probe
from .network import Architecture, Model, SubNetworkMask, adaptable_parameters, predict, sample_subnetwork
from .selection import (SelectionConfig, SelectionState, combined_score_eata, combined_score_eatac,
                        diversity_weight, entropy_weight, update_moving_average)
from .training import train_source

__version__ = "0.1.0"
