import numpy as np
from sklearn.utils.validation import check_array

from .tensor import ShapeError


def check_feature_map(x, name="feature map"):
    """Validate one ``h x w x c`` float map and return it as float64."""
    x = check_array(x, allow_nd=True, ensure_2d=False, dtype=np.float64,
                    ensure_all_finite=True, input_name=name)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise ShapeError(f"{name} must be h x w x c, got shape {x.shape}")
    return np.ascontiguousarray(x)


def check_feature_list(xs):
    if isinstance(xs, np.ndarray) and xs.ndim == 3:
        xs = [xs]
    xs = [check_feature_map(x, f"feature map {i}") for i, x in enumerate(xs)]
    if not xs:
        raise ValueError("need at least one feature map")
    return xs


def check_index_map(j, n_regions=None):
    j = np.asarray(j)
    if j.ndim != 2:
        raise ShapeError(f"index map must be 2-D, got shape {j.shape}")
    if not np.issubdtype(j.dtype, np.integer):
        if not np.all(j == np.round(j)):
            raise ValueError("index map must hold integer labels")
    j = j.astype(np.int64)
    if j.min() < 1:
        raise ValueError("region labels are 1-based")
    if n_regions is not None and j.max() > n_regions:
        raise ValueError(f"label {j.max()} exceeds region count {n_regions}")
    return j.astype(np.uint32)
