"""Phase tracking and reduced stochastic dynamics for periodic 1-D patterns."""

from .spectral import (Field, Grid, GridMismatchError, LinearOp, SpectralField,
                       apply_op, apply_semigroup, dealias, deriv, from_spectral,
                       inner, norm, norm_e, shift, to_spectral)
from .models import (ModelSpec, eval_D2N, eval_DN, eval_N, eval_V,
                     nagumo_comoving, neural_field_ring)
from .flow import (DivergenceError, FlowConfig, evolve, evolve_linearized,
                   evolve_second_variation, measure_decay_rate)
from .manifold import (ManifoldFrame, adjoint_null, build_frame,
                       compute_stationary, heaviside_bump_guess,
                       kink_pair_guess, load_frame, save_frame)

__version__ = "0.1.0"
