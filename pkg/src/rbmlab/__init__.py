"""Numerical laboratory for high-dimensional RBM training on spiked data.

Modules
-------
spiked_data       linear/nonlinear spiked covariance generators, binary container
effective_model   the eta1/eta2 objective, gradients, exact tiny-d oracle
amp               denoisers, Onsager-corrected iteration, stationarity check
state_evolution   deterministic k x k tracking recursion and recovery threshold
gd_dmft           gradient ascent and its asymptotic process with memory kernels
gordon            rank-1 saddle system for the global optimum, replicon stability
baselines         overlap metrics, SVD baseline and theory curve, CD training
experiments, cli  config-driven reproducible pipelines
"""

from .effective_model import (EffectiveModel, HiddenPrior, effective_grad,
                              effective_loglik, eta1, eta2, exact_loglik_small,
                              grad_eta1, grad_eta2, stationarity_residual)
from .spiked_data import (Nonlinearity, SpikePrior, SpikedDataset,
                          information_coefficient, load_dataset, sample_nonlinear,
                          sample_spiked, save_dataset)
from .amp import AmpConfig, AmpTrace, amp_run, denoiser_f, denoiser_g
from .state_evolution import (GaussHermiteEngine, MonteCarloEngine, SeProblem,
                              SeState, bbp_threshold, linearized_se_gain,
                              se_fixed_point, se_init, se_overlap, se_run,
                              se_step, weak_recovery)
from .gd_dmft import GdConfig, GdTrace, dmft_fixed_point_overlap, dmft_predict, gd_run
from .gordon import (SaddlePoint, ScalarObjectivePair, moreau, potential,
                     quadratic_pair, rbm_pair, replicon_stability,
                     saddle_residuals, solve_saddle, warm_start_from_se)
from .baselines import (cd_train, matched_overlap, overlap_matrix, svd_baseline,
                        svd_theory_overlap_degenerate_r2)

__version__ = "0.1.0"
