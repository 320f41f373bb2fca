"""Variational Online Gauss-Newton and friends on a small numpy network core."""
from .data import Dataset, make_synthetic
from .network import Network, mlp
from .optimizers import Hyperparams, Prior, adam_step, noisy_kfac_step, ogn_step, sgd_step, vogn_step
from .parallel import WorkerPlan, parallel_step
from .posterior import GaussianPosterior, KroneckerPosterior, predict_mc, sample_weights
from .tensor import RngStream
from .training import OPTIMIZERS, train

__version__ = "0.1.0"
