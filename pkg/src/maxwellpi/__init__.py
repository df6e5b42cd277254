"""Physics-constrained parallel MRI reconstruction.

Coil sensitivities are expanded on a basis of free-space magnetic fields
sampled inside the field of view (:mod:`maxwellpi.basis`, optionally Tucker
compressed by :mod:`maxwellpi.tucker`). Density and coil coefficients are
estimated jointly by regularized Gauss-Newton (:mod:`maxwellpi.irgn`); the
density can then be refined by noise-constrained TV minimization
(:mod:`maxwellpi.admm`).
"""

__version__ = "0.1.0"

from .admm import AdmmConfig, AdmmResult, admm_reconstruct, project_ball, prox_tv
from .basis import (BasisError, DipoleSet, FieldBasis, FovGrid, SampleMatrix, circular_polarization,
                    compute_basis, h_field_of_dipole, place_boundary_dipoles, project,
                    sample_random_fields, scalar_green)
from .encoding import (CartesianMask, KSpaceData, PoissonDisc, Radial, add_noise, adjoint_fs,
                       estimate_eps, forward_fs, forward_model, make_trajectory, normal_fs, simulate)
from .irgn import IrgnConfig, IrgnResult, irgn_reconstruct
from .phantoms import birdcage_sens, max_coil_projection_error, nrmse, shepp_logan
from .tucker import TuckerBasis, compress_basis, hosvd, kmode_product, tucker_apply, tucker_apply_adjoint
