"""Middle-layer which defines the array types used by the library.

The point of this module is to create aliases to the numerical backends, so
that the rest of the library does not have to care where a tensor or an array
comes from. Everything which takes part in gradient based optimisation is a
torch tensor in double precision; rasterisation, grouping and metrics work on
numpy arrays.
"""

import numpy as np
import numpy.typing as npt
import torch

# Aliases for typing
Tensor = torch.Tensor
Array = npt.NDArray[np.float64]
IndexArray = npt.NDArray[np.int64]
ArrayLike = Tensor | npt.ArrayLike

# Per-image conditioning feature of the flow, a 1-D tensor
ConditionVector = torch.Tensor

DTYPE = torch.float64


def as_tensor(value: ArrayLike) -> Tensor:
    """Convert an array-like into a double precision tensor.

    Tensors are returned as they are, apart from a dtype cast, so the autograd
    graph is kept.

    Parameters
    ----------
    value : ArrayLike
        The value to convert.

    Returns
    -------
    Tensor
        A float64 tensor.

    """
    if isinstance(value, torch.Tensor):
        return value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


def as_array(value: ArrayLike) -> Array:
    """Convert a tensor or array-like into a float64 numpy array.

    Parameters
    ----------
    value : ArrayLike
        The value to convert.

    Returns
    -------
    Array
        A detached float64 array.

    """
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy().astype(np.float64)
    return np.asarray(value, dtype=np.float64)
