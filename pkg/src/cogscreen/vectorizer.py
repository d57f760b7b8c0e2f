"""TF-IDF vectorization with per-term label-correlation feature selection.

Terms are whitespace-split tokens of preprocessed text. idf uses the
smoothed form ln((1+N)/(1+df)) + 1 so no term divides by zero, tf is the
raw count, and document vectors are L2-normalized. Each term's
point-biserial correlation against the binary label is computed on the
normalized weights; selection keeps terms with |corr| at or above a
threshold tuned on a validation split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Vocabulary:
    terms: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.terms)) != len(self.terms):
            raise ValueError("vocabulary terms must be unique")

    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.terms)}

    def __len__(self) -> int:
        return len(self.terms)


@dataclass(frozen=True)
class TfIdfModel:
    vocab: Vocabulary
    idf: np.ndarray          # (V,) nonnegative
    corr: np.ndarray         # (V,) in [-1, 1]
    selected: np.ndarray     # (V,) bool mask
    threshold: float = 0.0
    corr_on_presence: bool = False

    @property
    def selected_terms(self) -> list[str]:
        return [t for t, keep in zip(self.vocab.terms, self.selected) if keep]


@dataclass(frozen=True)
class DocVector:
    """Sparse L2-normalized document vector over the selected terms."""
    entries: tuple[tuple[int, float], ...]
    empty: bool = False

    def dense(self, dim: int) -> np.ndarray:
        v = np.zeros(dim)
        for i, w in self.entries:
            v[i] = w
        return v


def _term_counts(doc: str) -> dict[str, int]:
    counts: dict[str, int] = {}
    for tok in doc.split():
        counts[tok] = counts.get(tok, 0) + 1
    return counts


def _tfidf_matrix(docs: list[str], vocab_index: dict[str, int], idf: np.ndarray
                  ) -> np.ndarray:
    """Dense (n_docs, V) matrix of L2-normalized tf*idf weights."""
    X = np.zeros((len(docs), len(idf)))
    for r, doc in enumerate(docs):
        for term, cnt in _term_counts(doc).items():
            j = vocab_index.get(term)
            if j is not None:
                X[r, j] = cnt * idf[j]
        norm = np.linalg.norm(X[r])
        if norm > 0:
            X[r] /= norm
    return X


def fit_tfidf(docs: list[str], labels: list[int] | np.ndarray, min_df: int = 2,
              corr_on_presence: bool = False) -> TfIdfModel:
    """Build vocabulary (document frequency >= min_df), idf weights, and
    per-term label correlations from one document per patient.

    corr_on_presence switches the correlation input from tf-idf weights to
    raw 0/1 term presence; the default mirrors the weights reading.
    """
    y = np.asarray(labels, dtype=float)
    if len(docs) < 2:
        raise ValueError("need at least 2 documents")
    if len(docs) != len(y):
        raise ValueError("docs and labels must be parallel")
    if len(np.unique(y)) < 2:
        raise ValueError("labels contain a single class; correlation is undefined")

    df: dict[str, int] = {}
    for doc in docs:
        for term in set(doc.split()):
            df[term] = df.get(term, 0) + 1
    terms = tuple(sorted(t for t, d in df.items() if d >= min_df))
    if not terms:
        raise ValueError(f"no term reaches min_df={min_df}")
    vocab = Vocabulary(terms=terms)
    index = vocab.index()

    n = len(docs)
    df_vec = np.array([df[t] for t in terms], dtype=float)
    idf = np.log((1.0 + n) / (1.0 + df_vec)) + 1.0

    X = _tfidf_matrix(docs, index, idf)
    basis = (X > 0).astype(float) if corr_on_presence else X

    # Point-biserial correlation, zero-variance terms get 0 by convention.
    xc = basis - basis.mean(axis=0)
    yc = y - y.mean()
    sx = np.sqrt((xc ** 2).sum(axis=0))
    sy = math.sqrt((yc ** 2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (xc * yc[:, None]).sum(axis=0) / (sx * sy)
    corr = np.where(np.isfinite(corr), corr, 0.0)
    corr = np.clip(corr, -1.0, 1.0)

    return TfIdfModel(
        vocab=vocab, idf=idf, corr=corr,
        selected=np.ones(len(terms), dtype=bool), threshold=0.0,
        corr_on_presence=corr_on_presence,
    )


def select_features(model: TfIdfModel, corr_threshold: float) -> TfIdfModel:
    """Keep terms with |corr| >= threshold; an empty selection is an error."""
    mask = np.abs(model.corr) >= corr_threshold
    if not mask.any():
        raise ValueError(
            f"no term passes |corr| >= {corr_threshold}; lower the threshold"
        )
    return replace(model, selected=mask, threshold=corr_threshold)


def transform(doc: str, model: TfIdfModel) -> DocVector:
    """tf * idf over the selected terms, L2-normalized; a document without
    any selected vocabulary term yields a flagged zero vector."""
    index = model.vocab.index()
    entries: list[tuple[int, float]] = []
    for term, cnt in _term_counts(doc).items():
        j = index.get(term)
        if j is not None and model.selected[j]:
            entries.append((j, cnt * model.idf[j]))
    if not entries:
        return DocVector(entries=(), empty=True)
    norm = math.sqrt(sum(w * w for _, w in entries))
    entries.sort()
    return DocVector(entries=tuple((j, w / norm) for j, w in entries))


def transform_matrix(docs: list[str], model: TfIdfModel) -> np.ndarray:
    """Dense (n_docs, n_selected) matrix of transform() outputs."""
    sel_idx = np.flatnonzero(model.selected)
    remap = {int(j): k for k, j in enumerate(sel_idx)}
    X = np.zeros((len(docs), len(sel_idx)))
    for r, doc in enumerate(docs):
        vec = transform(doc, model)
        for j, w in vec.entries:
            X[r, remap[j]] = w
    return X


def rank_terms(model: TfIdfModel, top_k: int = 20) -> list[tuple[int, str, float]]:
    """(rank, term, corr) sorted by |corr| descending, ties by term string."""
    order = sorted(
        range(len(model.vocab)),
        key=lambda j: (-abs(float(model.corr[j])), model.vocab.terms[j]),
    )
    return [
        (r + 1, model.vocab.terms[j], float(model.corr[j]))
        for r, j in enumerate(order[:top_k])
    ]


def save_tfidf(model: TfIdfModel, path: str | Path) -> None:
    obj = {
        "terms": list(model.vocab.terms),
        "idf": model.idf.tolist(),
        "corr": model.corr.tolist(),
        "selected": model.selected.astype(int).tolist(),
        "threshold": model.threshold,
        "corr_on_presence": model.corr_on_presence,
    }
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def load_tfidf(path: str | Path) -> TfIdfModel:
    with Path(path).open("r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return TfIdfModel(
        vocab=Vocabulary(terms=tuple(obj["terms"])),
        idf=np.asarray(obj["idf"], dtype=float),
        corr=np.asarray(obj["corr"], dtype=float),
        selected=np.asarray(obj["selected"], dtype=bool),
        threshold=float(obj["threshold"]),
        corr_on_presence=bool(obj.get("corr_on_presence", False)),
    )
