"""Per-head low-rank factorization of attention projections with Fisher weighting, quantization and a traffic-counting decoder."""

from .costmodel import CostInputs, gamma_eta, rho
from .errors import ConfigError, NumericalError
from .factorize import HeadFactors, RankPlan, allocate_ranks, per_head_svd, weighted_finetune
from .fisher import FisherScores, accumulate_fisher
from .linalg import SvdResult, cayley, hadamard, svd, truncate
from .model import AttentionWeights, ModelConfig, forward, generate_calibration, init_weights
from .quant import QuantSpec, RotationPair, local_qat, quantize_weight

__version__ = "0.1.0"
