"""Finite-volume Hall conductance, adiabatic currents and Nenciu expansions for magnetic Hamiltonians."""
__version__ = "0.1.0"

from .model import (LatticeSpec, MagneticModel, ModelError, PotentialSpec, SwitchFunction, build_hofstadter,
                    build_landau_truncated, commutator_with, constant_switch, current_operator, load_model,
                    make_switch, save_model)
from .spectral import (EigenSystem, FermiProjector, NoGap, diagonalize, fermi_projector, largest_spacing_energy,
                       riesz_sandwich, spectral_function)
from .kubo import (ConductanceResult, bulk_gap, bulk_window, calibrate_convention, chern_fhs,
                   kubo_streda_trace, lambda_stability_sweep, tknn_hall)
from .adiabatic import (DrivingProfile, IntegratorDominated, accumulated_charge, driving_profile, evolve,
                        instantaneous_current, tau_sweep)
from .nenciu import b_terms, calibrate_kappa, kubo_from_b1, static_frame_terms, truncation_remainder
from .diagnostics import (BoundaryReflection, energy_bound_check, kernel_decay, lightcone_check,
                          projector_locality)
from .fitting import FitResult, loglog_fit
