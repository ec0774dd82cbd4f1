"""Error-correcting output codes over leaf categories."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, split_train_validation
from .linreg import TrainConfig, train
from .metrics import macro_f1
from .topdown import default_C

MIN_BITS, MAX_BITS = 32, 1024


@dataclass(frozen=True)
class CodeBook:
    """Binary codewords, one row per class in ``class_ids`` order."""

    bits: np.ndarray
    class_ids: tuple
    seed: int | None = None

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 2 or bits.shape[0] != len(self.class_ids):
            raise ValueError("codebook needs one row per class")
        if not np.all(bits <= 1):
            raise ValueError("codewords must be 0/1")
        if len(np.unique(bits, axis=0)) != bits.shape[0]:
            raise ValueError("codewords must be distinct")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))

    @property
    def n_bits(self) -> int:
        return self.bits.shape[1]

    @classmethod
    def random(cls, class_ids, n_bits: int, seed: int = 0, max_attempts: int = 100):
        """I.i.d. fair-coin codewords; regenerates until all rows differ."""
        class_ids = sorted(int(c) for c in class_ids)
        if n_bits < 1:
            raise ValueError("need at least one bit")
        rng = np.random.default_rng(seed)
        for _ in range(max_attempts):
            bits = rng.integers(0, 2, size=(len(class_ids), n_bits), dtype=np.uint8)
            if len(np.unique(bits, axis=0)) == len(class_ids):
                return cls(bits, tuple(class_ids), seed)
        raise ValueError(
            f"could not draw {len(class_ids)} distinct {n_bits}-bit codewords "
            f"in {max_attempts} attempts"
        )

    @classmethod
    def identity(cls, class_ids):
        class_ids = sorted(int(c) for c in class_ids)
        return cls(np.eye(len(class_ids), dtype=np.uint8), tuple(class_ids), None)

    def codeword(self, c: int) -> np.ndarray:
        return self.bits[self.class_ids.index(c)]

    def to_text(self) -> str:
        lines = [f"seed {self.seed if self.seed is not None else 'none'}",
                 f"bits {self.n_bits}"]
        for c, row in zip(self.class_ids, self.bits):
            lines.append(f"{c} " + "".join(map(str, row.tolist())))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> CodeBook:
        lines = [ln.split() for ln in text.splitlines() if ln.strip()]
        seed = None if lines[0][1] == "none" else int(lines[0][1])
        n_bits = int(lines[1][1])
        ids, rows = [], []
        for c, word in lines[2:]:
            if len(word) != n_bits:
                raise ValueError(f"codeword for class {c} has {len(word)} bits, expected {n_bits}")
            ids.append(int(c))
            rows.append([int(ch) for ch in word])
        return cls(np.array(rows, dtype=np.uint8), tuple(ids), seed)


@dataclass(frozen=True)
class BitModels:
    weights: np.ndarray  # dim x n_bits
    degenerate: tuple


def ecoc_train(ds: Dataset, book: CodeBook, cfg: TrainConfig = TrainConfig(),
               n_jobs=None) -> BitModels:
    """One binary classifier per codeword bit.

    A bit that is constant over the classes present in ``ds`` gets the zero
    model and is flagged degenerate.
    """
    missing = sorted(set(np.unique(ds.y).tolist()) - set(book.class_ids))
    if missing:
        raise ValueError(f"classes {missing} have no codeword")
    rows = np.searchsorted(np.asarray(book.class_ids), ds.y)
    targets = book.bits[rows].astype(np.float64) * 2.0 - 1.0

    def fit(b):
        yb = targets[:, b]
        if np.all(yb == yb[0]):
            return np.zeros(ds.dim), True
        return train(ds.X, yb, cfg), False

    if n_jobs in (None, 1):
        out = [fit(b) for b in range(book.n_bits)]
    else:
        out = Parallel(n_jobs=n_jobs)(delayed(fit)(b) for b in range(book.n_bits))
    W = np.column_stack([w for w, _ in out])
    return BitModels(W, tuple(flag for _, flag in out))


def hamming_decode(bits: np.ndarray, book: CodeBook) -> np.ndarray:
    """Nearest codeword by Hamming distance, lowest class id on ties."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    order = np.argsort(book.class_ids, kind="stable")
    codes = book.bits[order].astype(np.int64)
    dist = (bits[:, None, :] != codes[None, :, :]).sum(axis=2)
    return np.asarray(book.class_ids)[order][np.argmin(dist, axis=1)]


def ecoc_predict(models: BitModels, book: CodeBook, x):
    """Threshold each bit score at zero, then decode. ``x`` may hold many rows."""
    if models.weights.shape[1] != book.n_bits:
        raise ValueError("number of bit models does not match the codebook")
    X = sp.csr_matrix(x, dtype=np.float64) if (sp.issparse(x) or np.ndim(x) == 2) \
        else sp.csr_matrix(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    S = np.asarray(X @ models.weights)
    pred = hamming_decode((S >= 0).astype(np.uint8), book)
    if not (sp.issparse(x) or np.ndim(x) == 2):
        return int(pred[0])
    return pred


class ECOCClassifier(ClassifierMixin, BaseEstimator):
    """Random-codeword ECOC with logistic-regression bit classifiers."""

    def __init__(self, n_bits=64, C=1.0, seed=0, grad_tol=1e-4, max_iter=1000,
                 codebook=None, n_jobs=None):
        self.n_bits = n_bits
        self.C = C
        self.seed = seed
        self.grad_tol = grad_tol
        self.max_iter = max_iter
        self.codebook = codebook
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X, y = check_X_y(X, y, accept_sparse="csr", dtype=np.float64)
        y = y.astype(np.int64)
        self.classes_ = np.unique(y)
        if self.codebook is not None:
            self.codebook_ = self.codebook
        else:
            if not MIN_BITS <= self.n_bits <= MAX_BITS:
                raise ValueError(f"n_bits must lie in [{MIN_BITS}, {MAX_BITS}], got {self.n_bits}")
            self.codebook_ = CodeBook.random(self.classes_, self.n_bits, self.seed)
        cfg = TrainConfig(self.C, self.grad_tol, self.max_iter)
        self.bit_models_ = ecoc_train(Dataset(X, y), self.codebook_, cfg, self.n_jobs)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "bit_models_")
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        return ecoc_predict(self.bit_models_, self.codebook_, X)


def select_ecoc_C(ds: Dataset, book: CodeBook, C_grid, ratio: float = 0.9, seed: int = 0,
                  grad_tol: float = 1e-4, max_iter: int = 1000, n_jobs=None
                  ) -> tuple[float, list[tuple[float, float]]]:
    """Pick C for all bit models by validation macro-F1 over ``book.class_ids``.

    Ties go to the smaller C. A one-value grid is returned as is; without
    validation data the grid value nearest 1 is used.
    """
    grid = sorted(float(c) for c in C_grid)
    if not grid:
        raise ValueError("C_grid is empty")
    if len(grid) == 1:
        return grid[0], []
    train, valid = split_train_validation(ds, ratio, seed)
    if not len(valid):
        return default_C(grid), []
    dim = max(train.dim, valid.dim)
    train, valid = train.with_dim(dim), valid.with_dim(dim)
    curve = []
    for C in grid:
        bits = ecoc_train(train, book, TrainConfig(C, grad_tol, max_iter), n_jobs)
        pred = ecoc_predict(bits, book, valid.X)
        curve.append((C, macro_f1(valid.y, pred, book.class_ids)))
    best = max(curve, key=lambda t: (t[1], -t[0]))
    return best[0], curve
