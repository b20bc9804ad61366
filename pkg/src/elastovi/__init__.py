"""Bayesian inversion of elastic material fields from displacement data.

Weighted residuals of the equilibrium equations act as virtual observations,
so the posterior over material and displacement coefficients is inferred by
stochastic variational optimization without ever solving a forward model.
A small FEM solver ships alongside for synthetic data and black-box
baselines.
"""

from .autodiff import Tape, Var
from .config import Config, ConfigError, config_from_dict, load_config
from .constitutive import (NonInvertibleDeformationError, stress_linear,
                           stress_neohookean)
from .datagen import Dataset, ground_truth_field, make_dataset, snr_to_tau
from .elbo import ElboConfig, VariationalParams, elbo_estimate, subsample_residuals
from .estimator import PosteriorSummary, posterior_field_samples, summarize
from .fem import assemble_and_solve_linear, solve_neohookean
from .mesh import Mesh, build_structured_mesh, jump_operator, shape_gradients
from .residual import (ResidualProblem, WeightFunction, generate_weight_functions,
                       residual_gradients, standard_problem, weighted_residual)
from .trainer import AdamState, Checkpoint, CostCounter, TrainConfig, adam_step, train
from .variational import (ConditionalGaussian, LowRankGaussian, MLP,
                          logdet_lowrank, mlp_forward, sample_x_given_y, sample_y)

__version__ = "0.1.0"
