"""cnslab: spectral tools for barotropic compressible flow on periodic boxes.

Layers, bottom to top:

- ``fourier``      grids, coefficient conventions, multipliers, vector calculus
- ``dyadic``       smooth frequency-band decomposition and Besov-type norms
- ``paraproduct``  dealiased products, low-high splittings, composition
- ``linearized``   heat/transport/elasticity flows and the 2x2 acoustic modes
- ``compressible`` the nonlinear solver, monitors, scaling experiments
- ``flowmaps``     Lagrangian coordinates: flows, Jacobians, fixed points
- ``harness``      configs, reports, CSV/snapshot output, slope fitting
"""

from .fourier import (TorusGrid, SpectralField, make_grid, transform,
                      FourierSymbol, apply_symbol, gradient, divergence,
                      laplacian, helmholtz_project, lebesgue_norm,
                      random_field, set_fft_workers)
from .dyadic import (build_cutoffs, resolvable_range, dyadic_block, low_cut,
                     decompose, DyadicBlocks, NormSpec, besov_norm,
                     hybrid_norm, split_low_high, tilde_norm, tilde_hybrid_norm)
from .paraproduct import (dealias_product, advect, paraproduct, remainder,
                          bony_decompose, BonyTriple, compose,
                          transport_commutator)
from .linearized import (heat_solve, transport_solve, lame_solve, mode_matrix,
                         mode_spectrum, mode_semigroup, mode_semigroup_matrix,
                         mode_propagate, lyapunov_sq,
                         lyapunov_dissipation_residual, lyapunov_decay_check,
                         linear_decay_profile, LYAPUNOV_EQUIV_C0,
                         LYAPUNOV_RATE_C)
from .compressible import (CnsParams, CnsState, nonlinear_rhs, CnsIntegrator,
                           cns_run, Monitors, effective_velocity,
                           local_iteration_scheme, incompressible_run,
                           low_mach_experiment, decay_run, rescale_state)
from .flowmaps import (flow_map, jacobian_adjugate, change_coords,
                       piola_residual, lagrangian_rhs_terms,
                       lagrangian_fixed_point_solve)

__version__ = "0.1.0"

__all__ = [
    "TorusGrid", "SpectralField", "make_grid", "transform", "FourierSymbol",
    "apply_symbol", "gradient", "divergence", "laplacian", "helmholtz_project",
    "lebesgue_norm", "random_field", "set_fft_workers",
    "build_cutoffs", "resolvable_range", "dyadic_block", "low_cut", "decompose",
    "DyadicBlocks", "NormSpec", "besov_norm", "hybrid_norm", "split_low_high",
    "tilde_norm", "tilde_hybrid_norm",
    "dealias_product", "advect", "paraproduct", "remainder", "bony_decompose",
    "BonyTriple", "compose", "transport_commutator",
    "heat_solve", "transport_solve", "lame_solve", "mode_matrix",
    "mode_spectrum", "mode_semigroup", "mode_semigroup_matrix",
    "mode_propagate", "lyapunov_sq", "lyapunov_dissipation_residual",
    "lyapunov_decay_check", "linear_decay_profile", "LYAPUNOV_EQUIV_C0",
    "LYAPUNOV_RATE_C",
    "CnsParams", "CnsState", "nonlinear_rhs", "CnsIntegrator", "cns_run",
    "Monitors", "effective_velocity", "local_iteration_scheme",
    "incompressible_run", "low_mach_experiment", "decay_run", "rescale_state",
    "flow_map", "jacobian_adjugate", "change_coords", "piola_residual",
    "lagrangian_rhs_terms", "lagrangian_fixed_point_solve",
    "__version__",
]
