"""Unsupervised data sharing for offline RL with kernel function approximation."""

from udskernel.dataset import Dataset, Transition, concat, read_dataset, write_dataset
from udskernel.envs import CartPoleEnv, RingGaussianEnv, TabularEnv, generate_dataset, make_env
from udskernel.exceptions import DatasetError, InputError, NumericalError, UnsupportedError
from udskernel.kernels import (
    GramFactor,
    KernelSpec,
    eval_kernel,
    factorize,
    gram_matrix,
    information_gain,
    posterior_variance,
    solve_coefficients,
    zeta_information_amount,
)
from udskernel.pevi import FoldPlan, KernelPEVI, split_folds
from udskernel.reward import PessimisticKernelRidge, RewardRelabeler

__version__ = "0.1.0"

__all__ = [
    "CartPoleEnv",
    "Dataset",
    "DatasetError",
    "FoldPlan",
    "GramFactor",
    "InputError",
    "KernelPEVI",
    "KernelSpec",
    "NumericalError",
    "PessimisticKernelRidge",
    "RewardRelabeler",
    "RingGaussianEnv",
    "TabularEnv",
    "Transition",
    "UnsupportedError",
    "concat",
    "eval_kernel",
    "factorize",
    "generate_dataset",
    "gram_matrix",
    "information_gain",
    "make_env",
    "posterior_variance",
    "read_dataset",
    "solve_coefficients",
    "split_folds",
    "write_dataset",
    "zeta_information_amount",
]
