"""Backend selection for the hot kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise, or when
``XDOMAINMIX_PURE_PYTHON=1`` is set, the numpy versions in ``_pykernels`` are
used. ``BACKEND`` names the active one.
"""

import os

from . import _pykernels

try:
    if os.environ.get("XDOMAINMIX_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("compiled kernels disabled by XDOMAINMIX_PURE_PYTHON")
    from . import _kernels as _impl

    BACKEND = "compiled"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

SAME_AS_I = _pykernels.SAME_AS_I
SAME_CLASS_DIFF_DOMAIN = _pykernels.SAME_CLASS_DIFF_DOMAIN
DIFF_CLASS_SAME_DOMAIN = _pykernels.DIFF_CLASS_SAME_DOMAIN
DIFF_CLASS_DIFF_DOMAIN = _pykernels.DIFF_CLASS_DIFF_DOMAIN

nearest_rank_masks = _impl.nearest_rank_masks
pair_indices = _impl.pair_indices
gaussian_kernel_means = _impl.gaussian_kernel_means
median_pairwise_distance = _impl.median_pairwise_distance


def compiled_module():
    """The compiled extension module, or None when it is not built."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
