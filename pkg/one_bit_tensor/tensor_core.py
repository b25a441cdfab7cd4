"""
Dense tensors, CP factor sets, expansion, matricization and elementary norms.

Conventions used throughout the package:

- indices and mode numbers are 0-based (file formats are 1-based, see 'io');
- the linear order of tensor entries is first-index-fastest (Fortran order);
- matricization enumerates the rows (and columns) lexicographically over the
  listed modes, i.e. the last listed mode varies fastest.
"""
from typing import Optional, Sequence, Tuple, List
from dataclasses import dataclass
from itertools import combinations

import numpy as np

Shape = Tuple[int, ...]


def check_shape(dims: Sequence[int]) -> Shape:
    """
    Validate tensor dimensions.

    :param dims: Sequence[int], sizes (N_1,...,N_d) of the tensor modes
    :return: Shape, the dimensions as a tuple of Python ints
    """
    shape: Shape = tuple(int(n) for n in dims)
    if len(shape) < 2:
        raise ValueError(f"check_shape(): tensor order must be at least 2, got {len(shape)}")
    if any(n < 1 for n in shape):
        raise ValueError(f"check_shape(): all dimensions must be positive: {shape}")
    if np.prod(shape, dtype=np.float64) >= np.iinfo(np.int64).max:
        raise ValueError(f"check_shape(): total size of {shape} overflows a machine integer")
    return shape


def check_indices(indices: np.ndarray, shape: Shape) -> np.ndarray:
    """
    Validate an m x d array of 0-based tensor indices against a shape.

    :param indices: array-like, one index tuple per row
    :param shape: Shape, tensor dimensions
    :return: np.ndarray, the indices as an int64 array of shape (m, d)
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx.reshape(1, -1)
    if idx.ndim != 2 or idx.shape[1] != len(shape):
        raise ValueError(f"check_indices(): expected indices of width {len(shape)}, got array of shape {idx.shape}")
    if idx.size and (np.any(idx < 0) or np.any(idx >= np.asarray(shape))):
        bad = int(np.flatnonzero(np.any((idx < 0) | (idx >= np.asarray(shape)), axis=1))[0])
        raise IndexError(f"check_indices(): index {tuple(idx[bad])} is out of range for shape {shape}")
    return idx


@dataclass(frozen=True, eq=False)
class DenseTensor:
    """
    An order-d array of finite real entries.
    """
    entries: np.ndarray

    def __post_init__(self):
        data = np.array(self.entries, dtype=np.float64)
        check_shape(data.shape)
        if not np.all(np.isfinite(data)):
            raise ValueError("DenseTensor(): all entries must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "entries", data)

    @classmethod
    def from_flat(cls, shape: Sequence[int], values: Sequence[float]) -> "DenseTensor":
        """
        Build a tensor from entries listed in the first-index-fastest linear order.
        """
        shape = check_shape(shape)
        flat = np.asarray(values, dtype=np.float64).ravel()
        if flat.size != int(np.prod(shape)):
            raise ValueError(f"DenseTensor.from_flat(): {flat.size} values do not fill shape {shape}")
        return cls(flat.reshape(shape, order="F"))

    @property
    def shape(self) -> Shape:
        return tuple(self.entries.shape)

    @property
    def order(self) -> int:
        return self.entries.ndim

    @property
    def size(self) -> int:
        return int(self.entries.size)

    def flat(self) -> np.ndarray:
        """Entries in the first-index-fastest linear order."""
        return self.entries.ravel(order="F")

    def at(self, indices: np.ndarray) -> np.ndarray:
        """Entries at an m x d array of 0-based indices."""
        idx = check_indices(indices, self.shape)
        return self.entries[tuple(idx.T)]

    def __sub__(self, other: "DenseTensor") -> "DenseTensor":
        if self.shape != other.shape:
            raise ValueError(f"DenseTensor: shape mismatch {self.shape} vs {other.shape}")
        return DenseTensor(self.entries - other.entries)

    def scaled(self, factor: float, offset: float = 0.0) -> "DenseTensor":
        return DenseTensor(self.entries * factor + offset)


@dataclass(frozen=True, eq=False)
class CpFactorSet:
    """
    The d factor matrices V_1,...,V_d of a CP factorization; V_j has shape N_j x k.
    """
    factors: Tuple[np.ndarray, ...]

    def __post_init__(self):
        mats: List[np.ndarray] = []
        for j, factor in enumerate(self.factors):
            mat = np.array(factor, dtype=np.float64)
            if mat.ndim == 1:
                mat = mat.reshape(-1, 1)
            if mat.ndim != 2:
                raise ValueError(f"CpFactorSet(): factor {j} is not a matrix")
            if not np.all(np.isfinite(mat)):
                raise ValueError(f"CpFactorSet(): factor {j} has non-finite entries")
            mat.setflags(write=False)
            mats.append(mat)
        if len(mats) < 2:
            raise ValueError(f"CpFactorSet(): need at least 2 factors, got {len(mats)}")
        ranks = {mat.shape[1] for mat in mats}
        if len(ranks) != 1:
            raise ValueError(
                f"CpFactorSet(): mismatched column counts {[mat.shape[1] for mat in mats]}"
            )
        check_shape([mat.shape[0] for mat in mats])
        object.__setattr__(self, "factors", tuple(mats))

    @property
    def k(self) -> int:
        return self.factors[0].shape[1]

    @property
    def shape(self) -> Shape:
        return tuple(mat.shape[0] for mat in self.factors)

    @property
    def order(self) -> int:
        return len(self.factors)

    def replace(self, mode: int, factor: np.ndarray) -> "CpFactorSet":
        """Copy of the factor set with the factor of one mode swapped out."""
        mats = list(self.factors)
        mats[mode] = factor
        return CpFactorSet(tuple(mats))


def cp_expand(factors: CpFactorSet) -> DenseTensor:
    """
    Materialize T(w) = sum_c prod_j V_j(i_j, c).

    :param factors: CpFactorSet
    :return: DenseTensor of shape (N_1,...,N_d)
    """
    partial = factors.factors[0]
    for factor in factors.factors[1:]:
        # outer product along the leading modes, shared column axis last
        partial = partial[..., np.newaxis, :] * factor
    return DenseTensor(partial.sum(axis=-1))


def partner_products(factors: CpFactorSet, indices: np.ndarray, skip: Optional[int] = None) -> np.ndarray:
    """
    Row-wise products prod_{l != skip} V_l(i_l, :) for each sampled index.

    :return: np.ndarray of shape (m, k)
    """
    idx = check_indices(indices, factors.shape)
    product = np.ones((idx.shape[0], factors.k))
    for mode, factor in enumerate(factors.factors):
        if mode != skip:
            product *= factor[idx[:, mode]]
    return product


def cp_eval_entries(factors: CpFactorSet, indices: np.ndarray) -> np.ndarray:
    """Vectorized cp_eval_entry over an m x d index array."""
    return partner_products(factors, indices).sum(axis=1)


def cp_eval_entry(factors: CpFactorSet, index: Sequence[int]) -> float:
    """
    One entry of the CP expansion, without materializing the tensor.

    :param factors: CpFactorSet
    :param index: Sequence[int], 0-based index (i_1,...,i_d)
    :return: float
    """
    return float(cp_eval_entries(factors, np.asarray([index]))[0])


def _check_row_modes(order: int, row_modes: Sequence[int]) -> Tuple[List[int], List[int]]:
    rows = [int(mode) for mode in row_modes]
    if not rows or len(rows) >= order:
        raise ValueError(f"matricize(): row_modes must be a nonempty proper subset of modes, got {list(row_modes)}")
    if len(set(rows)) != len(rows) or any(mode < 0 or mode >= order for mode in rows):
        raise ValueError(f"matricize(): invalid row_modes {list(row_modes)} for an order {order} tensor")
    cols = [mode for mode in range(order) if mode not in rows]
    return rows, cols


def matricize(tensor: DenseTensor, row_modes: Sequence[int]) -> DenseTensor:
    """
    Unfold a tensor into a matrix with the listed modes indexing the rows and
    the remaining modes (ascending) indexing the columns.

    :param tensor: DenseTensor
    :param row_modes: Sequence[int], 0-based modes mapped to rows
    :return: DenseTensor of order 2
    """
    rows, cols = _check_row_modes(tensor.order, row_modes)
    n_rows = int(np.prod([tensor.shape[mode] for mode in rows]))
    return DenseTensor(np.transpose(tensor.entries, rows + cols).reshape(n_rows, -1))


def unmatricize(matrix: DenseTensor, shape: Sequence[int], row_modes: Sequence[int]) -> DenseTensor:
    """Inverse placement of matricize()."""
    shape = check_shape(shape)
    rows, cols = _check_row_modes(len(shape), row_modes)
    permuted = matrix.entries.reshape([shape[mode] for mode in rows + cols])
    return DenseTensor(np.transpose(permuted, np.argsort(rows + cols)))


def matricize_indices(indices: np.ndarray, shape: Sequence[int], row_modes: Sequence[int]) -> np.ndarray:
    """
    Map tensor indices to (row, column) indices of matricize(T, row_modes).

    :return: np.ndarray of shape (m, 2)
    """
    shape = check_shape(shape)
    idx = check_indices(indices, shape)
    rows, cols = _check_row_modes(len(shape), row_modes)
    row = np.ravel_multi_index(tuple(idx[:, rows].T), [shape[mode] for mode in rows])
    col = np.ravel_multi_index(tuple(idx[:, cols].T), [shape[mode] for mode in cols])
    return np.stack([row, col], axis=1).astype(np.int64)


def unmatricize_indices(rows_cols: np.ndarray, shape: Sequence[int], row_modes: Sequence[int]) -> np.ndarray:
    """Inverse of matricize_indices()."""
    shape = check_shape(shape)
    rows, cols = _check_row_modes(len(shape), row_modes)
    pairs = np.asarray(rows_cols, dtype=np.int64).reshape(-1, 2)
    idx = np.empty((pairs.shape[0], len(shape)), dtype=np.int64)
    idx[:, rows] = np.stack(np.unravel_index(pairs[:, 0], [shape[mode] for mode in rows]), axis=1)
    idx[:, cols] = np.stack(np.unravel_index(pairs[:, 1], [shape[mode] for mode in cols]), axis=1)
    return idx


def balanced_row_modes(shape: Sequence[int]) -> List[int]:
    """
    The most balanced rearrangement of a tensor into a matrix: the proper mode
    subset (containing mode 0) whose row count is closest to the column count.

    :param shape: Sequence[int], tensor dimensions
    :return: List[int], 0-based row modes
    """
    shape = check_shape(shape)
    logs = np.log(np.asarray(shape, dtype=np.float64))
    total = logs.sum()
    best: Optional[Tuple[float, Tuple[int, ...]]] = None
    for size in range(1, len(shape)):
        for subset in combinations(range(len(shape)), size):
            if 0 not in subset:
                continue
            imbalance = abs(2.0 * logs[list(subset)].sum() - total)
            # exact ties resolve to the lexicographically smallest subset
            if best is None or imbalance < best[0] - 1e-12 or \
                    (abs(imbalance - best[0]) <= 1e-12 and subset < best[1]):
                best = (imbalance, subset)
    return list(best[1])


def frobenius_norm(tensor: DenseTensor) -> float:
    return float(np.linalg.norm(tensor.entries.ravel()))


def infinity_norm(tensor: DenseTensor) -> float:
    return float(np.max(np.abs(tensor.entries)))


def row_norms(matrix: np.ndarray) -> np.ndarray:
    """l2 norms of the rows of a matrix."""
    return np.linalg.norm(np.asarray(matrix, dtype=np.float64), axis=1)


def factor_max_qnorm(factors: CpFactorSet) -> float:
    """
    Product of the l2,inf norms (largest row norm) of the factors, which upper
    bounds the max-qnorm of the expanded tensor.
    """
    return float(np.prod([row_norms(factor).max() for factor in factors.factors]))
