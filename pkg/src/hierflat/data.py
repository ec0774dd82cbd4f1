"""Sparse example storage, svmlight I/O, tf-idf weighting and splitting."""
from __future__ import annotations

import gzip
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.datasets import load_svmlight_file
from sklearn.utils.validation import check_array, check_is_fitted


class DataError(ValueError):
    """Malformed input data."""


@dataclass(frozen=True)
class Dataset:
    """Examples stored row-wise in a CSR matrix with integer leaf labels.

    Feature index ``j`` in svmlight files (1-based) is column ``j - 1`` here.
    """

    X: sp.csr_matrix
    y: np.ndarray

    def __post_init__(self):
        X = sp.csr_matrix(self.X, dtype=np.float64)
        X.sort_indices()
        y = np.asarray(self.y, dtype=np.int64).ravel()
        if X.shape[0] != y.shape[0]:
            raise DataError(f"{X.shape[0]} rows but {y.shape[0]} labels")
        if not np.all(np.isfinite(X.data)):
            raise DataError("non-finite feature value")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.X[idx], self.y[idx])

    def with_dim(self, dim: int) -> Dataset:
        """Zero-pad (never truncate) the feature space to ``dim`` columns."""
        if dim < self.dim:
            raise DataError(f"cannot shrink dimension {self.dim} to {dim}")
        if dim == self.dim:
            return self
        X = sp.csr_matrix((self.X.data, self.X.indices, self.X.indptr),
                          shape=(self.X.shape[0], dim))
        return Dataset(X, self.y)

    def concat(self, other: Dataset) -> Dataset:
        dim = max(self.dim, other.dim)
        a, b = self.with_dim(dim), other.with_dim(dim)
        return Dataset(sp.vstack([a.X, b.X], format="csr"), np.concatenate([a.y, b.y]))


def parse_svmlight(source, dim_hint: int | None = None) -> Dataset:
    """Parse "label idx:val ..." lines into a :class:`Dataset`.

    ``source`` may be bytes, str, a binary file object or a path. Gzip input is
    detected by magic number. Labels must be integers (leaf node ids);
    indices are 1-based and strictly ascending within a line.
    """
    raw = _read_bytes(source)
    if not raw.strip():
        raise DataError("empty data file")
    try:
        X, y = load_svmlight_file(io.BytesIO(raw), n_features=None,
                                  zero_based=False, dtype=np.float64)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if not np.all(y == np.round(y)):
        raise DataError("labels must be integer node ids")
    ds = Dataset(X, y.astype(np.int64))
    if dim_hint is not None and dim_hint > ds.dim:
        ds = ds.with_dim(int(dim_hint))
    return ds


def read_svmlight(path, dim_hint: int | None = None) -> Dataset:
    return parse_svmlight(Path(path), dim_hint)


def read_svmlight_or_empty(path, dim_hint: int | None = None) -> Dataset | None:
    """Like :func:`read_svmlight` but returns ``None`` for an empty file."""
    raw = _read_bytes(Path(path))
    if not raw.strip():
        return None
    return parse_svmlight(raw, dim_hint)


def serialize_svmlight(ds: Dataset) -> bytes:
    """svmlight text with shortest round-trip float formatting.

    ``sklearn.datasets.dump_svmlight_file`` writes ``%.16g``, which is not
    always exact for doubles; ``repr`` is.
    """
    X = ds.X
    lines = []
    for i in range(len(ds)):
        lo, hi = X.indptr[i], X.indptr[i + 1]
        feats = " ".join(f"{j + 1}:{v!r}" for j, v in
                         zip(X.indices[lo:hi].tolist(), X.data[lo:hi].tolist()))
        lines.append(f"{int(ds.y[i])} {feats}".rstrip() + "\n")
    return "".join(lines).encode()


def write_svmlight(ds: Dataset, path) -> None:
    Path(path).write_bytes(serialize_svmlight(ds))


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif isinstance(source, Path):
        raw = source.read_bytes()
    elif isinstance(source, str):
        # plain strings are file contents; wrap paths in pathlib.Path
        raw = source.encode()
    else:
        raw = source.read()
        if isinstance(raw, str):
            raw = raw.encode()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def tfidf_l2(ds: Dataset) -> Dataset:
    """Weight raw term counts by ``ln(N / df)`` then scale rows to unit norm."""
    return Dataset(apply_tfidf(ds.X, idf_weights(ds.X)), ds.y)


def idf_weights(X: sp.csr_matrix) -> np.ndarray:
    """``ln(N / df)`` per column; zero for columns no example uses."""
    if X.data.size and X.data.min() < 0:
        raise DataError("term counts must be nonnegative")
    n = X.shape[0]
    df = np.bincount(X.indices[X.data > 0], minlength=X.shape[1])
    idf = np.zeros(X.shape[1])
    seen = df > 0
    idf[seen] = np.log(n / df[seen])
    return idf


def apply_tfidf(X: sp.csr_matrix, idf: np.ndarray) -> sp.csr_matrix:
    """Scale columns by ``idf`` and rows to unit l2 norm (zero rows stay zero)."""
    if X.data.size and X.data.min() < 0:
        raise DataError("term counts must be nonnegative")
    W = sp.csr_matrix(X @ sp.diags(idf), dtype=np.float64)
    norms = np.sqrt(np.asarray(W.multiply(W).sum(axis=1)).ravel())
    scale = np.zeros_like(norms)
    scale[norms > 0] = 1.0 / norms[norms > 0]
    W = sp.csr_matrix(sp.diags(scale) @ W)
    W.eliminate_zeros()
    return W


class TfidfL2Transformer(TransformerMixin, BaseEstimator):
    """Unsmoothed tf-idf with l2 row normalisation.

    Unlike :class:`sklearn.feature_extraction.text.TfidfTransformer`, the idf
    is exactly ``ln(N / df)`` with no ``+1`` offset, so a term present in every
    document gets weight zero.
    """

    def fit(self, X, y=None):
        X = check_array(X, accept_sparse="csr")
        self.idf_ = idf_weights(sp.csr_matrix(X))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "idf_")
        X = check_array(X, accept_sparse="csr")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return apply_tfidf(sp.csr_matrix(X), self.idf_)


def split_train_validation(ds: Dataset, ratio: float = 0.9, seed: int = 0
                           ) -> tuple[Dataset, Dataset]:
    """Stratified, seeded train/validation split.

    Classes with a single example always go to the training side. For the
    rest, the validation count ``round((1 - ratio) * n_eligible)`` is shared
    across classes by largest remainder, never taking a class's last example.
    """
    train_idx, valid_idx = split_indices(ds.y, ratio, seed)
    return ds.subset(train_idx), ds.subset(valid_idx)


def split_indices(y, ratio: float = 0.9, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    y = np.asarray(y)
    if y.shape[0] < 2:
        raise DataError("need at least two examples to split")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(y, return_counts=True)
    eligible = counts >= 2
    quota = np.zeros(len(classes), dtype=np.int64)
    if eligible.any():
        target = int(round((1.0 - ratio) * counts[eligible].sum()))
        share = np.where(eligible, counts * (1.0 - ratio), 0.0)
        quota = np.floor(share).astype(np.int64)
        cap = np.where(eligible, counts - 1, 0)
        quota = np.minimum(quota, cap)
        remainder = share - quota
        # random tie-break between equal remainders
        order = np.lexsort((rng.random(len(classes)), -remainder))
        left = target - quota.sum()
        for i in order:
            if left <= 0:
                break
            if quota[i] < cap[i]:
                quota[i] += 1
                left -= 1

    train, valid = [], []
    for c, q in zip(classes, quota):
        members = np.flatnonzero(y == c)
        members = rng.permutation(members)
        valid.append(members[:q])
        train.append(members[q:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(valid))
