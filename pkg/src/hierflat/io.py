"""Model bundles: a directory of plain-text files that fully determine predictions.

Layout::

    taxonomy.txt           edge list the predictor descends (possibly flattened)
    original_taxonomy.txt  edge list before any flattening
    meta.txt               key=value run metadata
    models.txt             one block per node (or per ECOC bit)
    codebook.txt           ECOC only
    idf.txt                only when a tf-idf transform was fitted

A model block starts with ``node <id> C <value> nnz <k>`` (``bit <b> ...`` for
ECOC), optionally followed by ``degenerate 1``, then ``k`` lines
``index:weight`` with 1-based indices. Weights are written with 17 significant
digits, which round-trips IEEE doubles exactly; entries with absolute value
below :data:`PRUNE` are dropped, and :func:`prune` applies the same rule in
memory so a freshly trained model and its reloaded bundle score identically.
"""
from __future__ import annotations

import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import BitModels, CodeBook, ecoc_predict
from .data import apply_tfidf
from .taxonomy import Taxonomy, parse_hierarchy
from .topdown import HierModel, NodeModel, _as_csr, predict_flat

PRUNE = 1e-12
FORMAT_VERSION = "1"
HIERARCHICAL = ("TDLR", "TLF", "BLF", "MLF", "LevelINF", "GlobalINF")
METHODS = HIERARCHICAL + ("FlatLR", "ECOC")


class BundleError(ValueError):
    """Missing, inconsistent or unparsable bundle files."""


def prune(w: np.ndarray) -> np.ndarray:
    w = np.array(w, dtype=np.float64)
    w[np.abs(w) < PRUNE] = 0.0
    return w


def prune_model(hm: HierModel) -> HierModel:
    models = {n: NodeModel(m.node, prune(m.weights), m.C_used, m.fstar, m.degenerate)
              for n, m in hm.models.items()}
    return HierModel(hm.taxonomy, models, hm.dim)


def prune_bits(bm: BitModels) -> BitModels:
    return BitModels(prune(bm.weights), bm.degenerate)


def _fmt(v: float) -> str:
    return "%.17g" % v


def _block(kind: str, key: int, C: float, w: np.ndarray, degenerate: bool) -> list[str]:
    idx = np.flatnonzero(w)
    head = f"{kind} {key} C {_fmt(C)} nnz {idx.size}"
    if degenerate:
        head += " degenerate 1"
    return [head] + [f"{i + 1}:{_fmt(w[i])}" for i in idx]


def _parse_blocks(text: str, kind: str, dim: int) -> list[tuple[int, float, np.ndarray, bool]]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    out, i = [], 0
    while i < len(lines):
        head = lines[i].split()
        try:
            if head[0] != kind or head[2] != "C" or head[4] != "nnz":
                raise ValueError
            key, C, nnz = int(head[1]), float(head[3]), int(head[5])
            extra = dict(zip(head[6::2], head[7::2]))
        except (ValueError, IndexError):
            raise BundleError(f"models.txt: bad header {lines[i]!r}") from None
        if i + 1 + nnz > len(lines):
            raise BundleError(f"models.txt: {kind} {key} declares {nnz} weights, file ends early")
        w = np.zeros(dim)
        for ln in lines[i + 1:i + 1 + nnz]:
            try:
                j, v = ln.split(":")
                j, v = int(j), float(v)
            except ValueError:
                raise BundleError(f"models.txt: bad weight line {ln!r} in {kind} {key}") from None
            if not 1 <= j <= dim:
                raise BundleError(f"models.txt: index {j} outside 1..{dim} in {kind} {key}")
            w[j - 1] = v
        out.append((key, C, w, extra.get("degenerate") == "1"))
        i += 1 + nnz
    return out


def parse_meta(text: str) -> dict[str, str]:
    meta = {}
    for ln in text.splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        if "=" not in ln:
            raise BundleError(f"meta.txt: expected key=value, got {ln!r}")
        k, v = ln.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def format_meta(meta: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in meta.items())


@dataclass
class Bundle:
    """Everything needed to predict: method, taxonomies, weights, metadata.

    ``model`` is set for hierarchical methods and FlatLR (a depth-one
    taxonomy); ``bits`` and ``codebook`` for ECOC.
    """

    method: str
    taxonomy: Taxonomy
    original_taxonomy: Taxonomy
    dim: int
    model: HierModel | None = None
    bits: BitModels | None = None
    codebook: CodeBook | None = None
    idf: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise BundleError(f"unknown method {self.method!r}")
        if self.method == "ECOC":
            if self.bits is None or self.codebook is None:
                raise BundleError("ECOC bundle needs bit models and a codebook")
        elif self.model is None:
            raise BundleError(f"{self.method} bundle needs node models")

    @property
    def hierarchical(self) -> bool:
        return self.method in HIERARCHICAL

    def transform(self, X):
        """Apply the stored tf-idf weighting (if any) and pad to the model dimension."""
        if X.shape[1] > self.dim:
            raise ValueError(f"test data has feature index {X.shape[1]}, "
                             f"beyond the model dimension {self.dim}")
        X = _as_csr(X, self.dim)
        if self.idf is not None:
            X = apply_tfidf(X, self.idf)
        return X

    def predict(self, X) -> tuple[np.ndarray, list[tuple[int, ...]]]:
        """Predicted leaves and decision paths (the single leaf for flat methods)."""
        X = self.transform(X)
        if X.shape[0] == 0:
            return np.zeros(0, dtype=np.int64), []
        if self.method == "ECOC":
            pred = np.asarray(ecoc_predict(self.bits, self.codebook, X))
            return pred, [(int(p),) for p in pred]
        if self.method == "FlatLR":
            leaves = {n: self.model.models[n].weights for n in self.taxonomy.leaves}
            pred = np.asarray(predict_flat(leaves, X))
            return pred, [(int(p),) for p in pred]
        return self.model.predict(X, return_paths=True)


def save_bundle(bundle: Bundle, out, extras: dict[str, str] | None = None) -> Path:
    """Write ``bundle`` to directory ``out`` atomically (temp dir, then rename).

    ``extras`` maps further file names (reports) to their text.
    """
    out = Path(out)
    files = {
        "taxonomy.txt": bundle.taxonomy.to_text(),
        "original_taxonomy.txt": bundle.original_taxonomy.to_text(),
    }
    meta = {"format_version": FORMAT_VERSION, "method": bundle.method, "dim": bundle.dim}
    meta.update({k: v for k, v in bundle.meta.items() if k not in meta})
    files["meta.txt"] = format_meta(meta)

    lines: list[str] = []
    if bundle.method == "ECOC":
        C = float(bundle.meta.get("C", "nan"))
        for b in range(bundle.codebook.n_bits):
            lines += _block("bit", b, C, prune(bundle.bits.weights[:, b]),
                            bundle.bits.degenerate[b])
        files["codebook.txt"] = bundle.codebook.to_text()
    else:
        for n in bundle.model.taxonomy.nodes:
            m = bundle.model.models[n]
            lines += _block("node", n, m.C_used, prune(m.weights), m.degenerate)
    files["models.txt"] = "\n".join(lines) + ("\n" if lines else "")
    if bundle.idf is not None:
        files["idf.txt"] = "".join(_fmt(v) + "\n" for v in bundle.idf)
    for name, text in (extras or {}).items():
        if name in files:
            raise ValueError(f"extra file {name} would overwrite a bundle file")
        files[name] = text

    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".bundle-", dir=out.parent))
    try:
        for name, text in files.items():
            (tmp / name).write_text(text, encoding="utf-8")
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def _read(path: Path, name: str) -> str:
    try:
        return (path / name).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise BundleError(f"bundle {path} is missing {name}") from None


def load_bundle(path) -> Bundle:
    path = Path(path)
    if not path.is_dir():
        raise BundleError(f"{path} is not a bundle directory")
    meta = parse_meta(_read(path, "meta.txt"))
    try:
        method, dim = meta["method"], int(meta["dim"])
    except (KeyError, ValueError):
        raise BundleError("meta.txt lacks a valid method or dim") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise BundleError(f"unsupported bundle format {meta.get('format_version')!r}")
    tax = parse_hierarchy(_read(path, "taxonomy.txt"))
    original = parse_hierarchy(_read(path, "original_taxonomy.txt"))
    idf = None
    if (path / "idf.txt").exists():
        idf = np.array([float(v) for v in _read(path, "idf.txt").split()])
        if idf.size != dim:
            raise BundleError(f"idf.txt has {idf.size} entries, expected {dim}")
    text = _read(path, "models.txt")
    extra = {k: v for k, v in meta.items() if k not in ("format_version", "method", "dim")}

    if method == "ECOC":
        book = CodeBook.from_text(_read(path, "codebook.txt"))
        blocks = _parse_blocks(text, "bit", dim)
        if [b for b, *_ in blocks] != list(range(book.n_bits)):
            raise BundleError(f"models.txt must hold bits 0..{book.n_bits - 1} in order")
        bits = BitModels(np.column_stack([w for _, _, w, _ in blocks]),
                         tuple(d for *_, d in blocks))
        return Bundle(method, tax, original, dim, bits=bits, codebook=book, idf=idf,
                      meta=extra)

    blocks = _parse_blocks(text, "node", dim)
    models = {n: NodeModel(n, w, C, None, d) for n, C, w, d in blocks}
    if len(models) != len(blocks):
        raise BundleError("models.txt lists a node twice")
    stray = sorted(set(models) - set(tax.nodes))
    if stray:
        raise BundleError(f"models.txt has nodes {stray} absent from taxonomy.txt")
    try:
        hm = HierModel(tax, models, dim)
    except ValueError as e:
        raise BundleError(str(e)) from None
    return Bundle(method, tax, original, dim, model=hm, idf=idf, meta=extra)
