"""Text/embedding-driven 3D garment generation at desk scale."""

import warnings as _warnings

# numba's TBB probe warns on older TBB builds; the fallback layer is fine.
_warnings.filterwarnings("ignore", message=".*TBB.*")

__version__ = "0.1.0"
