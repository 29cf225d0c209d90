"""Backend selection for the density kernel.

The compiled extension is used when it was built; setting the environment
variable ``MRPWEIGHT_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

import numpy as np

from ._kernel_py import DensityKernel as PyDensityKernel

try:
    from ._kernel import DensityKernel as CDensityKernel
except ImportError:  # extension not built
    CDensityKernel = None

if CDensityKernel is not None and not os.environ.get("MRPWEIGHT_PURE_PYTHON"):
    DensityKernel = CDensityKernel
else:
    DensityKernel = PyDensityKernel

BACKEND = DensityKernel.backend


def coefficient_support(frame, spec) -> np.ndarray:
    """Sample units behind each coefficient (units in cells sharing its levels)."""
    support = np.zeros(spec.n_coef)
    occ = np.flatnonzero(frame.n > 0)
    if spec.n_coef and occ.size:
        gidx = spec.cell_coef_index(frame.variables, frame.codes[occ])
        np.add.at(support, gidx.ravel(), np.repeat(frame.n[occ].astype(float), gidx.shape[1]))
    return support


def kernel_for(frame, spec, prior_only=False, backend=None, centered=None):
    """Build a density kernel for the occupied cells of ``frame``.

    ``backend`` may be ``"python"`` or ``"cython"`` to override the default.
    ``centered`` marks coefficients sampled on their own scale instead of
    standardized.
    """
    cls = {None: DensityKernel, "python": PyDensityKernel, "cython": CDensityKernel}[backend]
    if cls is None:
        raise RuntimeError("compiled kernel is not available")
    occ = np.flatnonzero(frame.n > 0)
    if prior_only:
        occ = occ[:0]
    gidx = spec.cell_coef_index(frame.variables, frame.codes[occ])
    return cls(
        frame.n[occ].astype(float),
        np.nan_to_num(frame.y_bar[occ]),
        frame.ss[occ],
        gidx,
        spec.coef_scale_index,
        spec.n_scale,
        spec.intercept_scale,
        spec.sigma_scale,
        spec.sigma_y_scale,
        centered,
    )
