"""Quantitative entropic central limit diagnostics for Wiener chaos.

Finite-basis chaos algebra, Malliavin operators, Gaussian-interpolation
scores, relative entropy estimators and the explicit entropy bounds that
link them to the fourth-moment discrepancy.
"""

from .bounds import (BoundInputs, bound_entropy_1d, bound_entropy_multi, carbery_wright_envelope, delta_fourth,
                     det_gamma_envelope, stein_discrepancy, stein_tv_bound, sum_example, tv_shift_estimate,
                     tv_shift_fit)
from .chaos import (ChaosElement, ChaoticVector, MultiIndex, SampleBatch, chaos_product, evaluate_chaos,
                    exact_moment, hermite_eval, sample_batch)
from .entropy import (EntropyReport, FisherCurve, QuadConfig, de_bruijn_entropy, fisher_standardized,
                      gaussian_entropy, gaussian_kl_closed_form, pinsker_tv, relative_entropy_direct,
                      stein_integral_entropy, trace_sandwich_check)
from .errors import (DegenerateSampleError, DimensionMismatchError, HypothesisViolation, OrderCapError,
                     SampleSizeError, UnreliableRegionError)
from .malliavin import (apply_L, apply_L_inverse, apply_ou_semigroup, expected_det_gamma, gamma_matrix,
                        malliavin_derivative, stein_coupling_exact, stein_matrix_regress)
from .smoothing import (InterpolationPoint, make_interpolation, score_density_route, score_stein_route,
                        smoothed_density)

__version__ = "0.1.0"
