"""End-to-end experiment driver: generate or load a corpus, preprocess,
build features, train the four models, and score a held-out test set.

Model 1 regresses the label on the two structured counts, model 2 on the
15 concept-category counts (both with lambda from 10-fold CV maximizing
mean out-of-fold AUC), model 3 tunes (correlation threshold, lambda)
jointly on a single 10% validation split, and model 4 trains the windowed
attention classifier on weakly labeled windows. Reported thresholds are
chosen on the validation split and applied to the test set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import attention as attn
from .concepts import ConceptLexicon, compile_lexicon, concept_features
from .corpus import Corpus, GenConfig, flag_structured, generate_synthetic_corpus, \
    split_train_test
from .evaluation import MetricsReport, ScoredSet, best_accuracy_threshold, \
    metrics_report, roc_auc
from .linear_model import DesignMatrix, LogisticModel, cv_select_lambda, \
    default_lambda_grid, fit_l1_logistic, lambda_max, predict_proba
from .preprocess import CleanNote, PreprocessConfig, preprocess_corpus
from .vectorizer import TfIdfModel, fit_tfidf, select_features, transform_matrix

MODEL_NAMES = ("baseline", "regex", "tfidf", "attention")

STRUCTURED_FEATURES = ("med_count", "icd_count")


def structured_matrix(corpus: Corpus) -> np.ndarray:
    rows = []
    for p in corpus:
        f = flag_structured(p)
        rows.append([f.med_count, f.icd_count])
    return np.array(rows, dtype=float)


def concept_matrix(corpus: Corpus, clean: dict[str, list[CleanNote]],
                   lexicon: ConceptLexicon) -> np.ndarray:
    rows = []
    for p in corpus:
        counts, _ = concept_features(clean.get(p.patient_id, []), lexicon)
        rows.append(list(counts.counts))
    return np.array(rows, dtype=float)


def patient_documents(corpus: Corpus, clean: dict[str, list[CleanNote]]
                      ) -> list[str]:
    return [" ".join(n.text for n in clean.get(p.patient_id, [])) for p in corpus]


def labels_of(corpus: Corpus) -> np.ndarray:
    return np.array([1.0 if p.gold_label else 0.0 for p in corpus])


def _val_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 0x7A1])
    order = rng.permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class LinearBundle:
    model: LogisticModel
    chosen_lambda: float


def train_count_model(X_raw: np.ndarray, y: np.ndarray, names: tuple[str, ...],
                      seed: int, folds: int = 10) -> LinearBundle:
    """CV lambda selection then a full-data fit (models 1 and 2)."""
    cv = cv_select_lambda(X_raw, y, names, k=folds, seed=seed)
    dm = DesignMatrix.from_raw(X_raw, names)
    model = fit_l1_logistic(dm, y, cv.chosen_lambda)
    return LinearBundle(model=model, chosen_lambda=cv.chosen_lambda)


@dataclass
class TfidfBundle:
    tfidf: TfIdfModel
    model: LogisticModel
    corr_threshold: float
    chosen_lambda: float


DEFAULT_CORR_THRESHOLDS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.30)


def train_tfidf_model(docs: list[str], y: np.ndarray, seed: int,
                      thresholds: tuple[float, ...] = DEFAULT_CORR_THRESHOLDS,
                      n_lambdas: int = 6, min_df: int = 2) -> TfidfBundle:
    """Joint (correlation threshold, lambda) selection on a 10% validation
    split, then a refit on the full training data."""
    y = np.asarray(y, dtype=float)
    sub_idx, val_idx = _val_split(len(docs), 0.10, seed)
    sub_docs = [docs[i] for i in sub_idx]
    val_docs = [docs[i] for i in val_idx]
    y_sub, y_val = y[sub_idx], y[val_idx]
    if len(np.unique(y_sub)) < 2 or len(np.unique(y_val)) < 2:
        sub_idx, val_idx = _val_split(len(docs), 0.10, seed + 1)
        sub_docs = [docs[i] for i in sub_idx]
        val_docs = [docs[i] for i in val_idx]
        y_sub, y_val = y[sub_idx], y[val_idx]

    base = fit_tfidf(sub_docs, y_sub, min_df=min_df)
    best = None
    for thr in thresholds:
        try:
            selected = select_features(base, thr)
        except ValueError:
            continue
        X_sub = transform_matrix(sub_docs, selected)
        X_val = transform_matrix(val_docs, selected)
        names = tuple(selected.selected_terms)
        dm = DesignMatrix.from_raw(X_sub, names)
        lmax = lambda_max(dm.X, y_sub)
        w_prev, b_prev = None, None
        for lam in default_lambda_grid(lmax, n_points=n_lambdas, ratio=1e-3):
            fitted = fit_l1_logistic(dm, y_sub, lam, w0=w_prev, b0=b_prev)
            w_prev, b_prev = fitted.weights, fitted.intercept
            val_scores = predict_proba(fitted, X_val)
            auc = roc_auc(ScoredSet(
                patient_ids=tuple(str(i) for i in val_idx),
                scores=tuple(float(s) for s in np.atleast_1d(val_scores)),
                labels=tuple(int(l) for l in y_val)))
            if best is None or auc > best[0]:
                best = (auc, thr, float(lam))
    if best is None:
        raise RuntimeError("tf-idf tuning found no feasible (threshold, lambda)")
    _, thr, lam = best

    full = fit_tfidf(docs, y, min_df=min_df)
    try:
        full_sel = select_features(full, thr)
    except ValueError:
        full_sel = select_features(full, 0.0)
    X_full = transform_matrix(docs, full_sel)
    names = tuple(full_sel.selected_terms)
    dm = DesignMatrix.from_raw(X_full, names)
    model = fit_l1_logistic(dm, y, lam)
    return TfidfBundle(tfidf=full_sel, model=model, corr_threshold=thr,
                       chosen_lambda=lam)


@dataclass
class AttnBundle:
    model: attn.AttnModel
    vocab: attn.TokenVocab
    wcfg: attn.WindowConfig


def build_training_windows(corpus: Corpus, clean: dict[str, list[CleanNote]],
                           vocab: attn.TokenVocab, wcfg: attn.WindowConfig
                           ) -> tuple[list[np.ndarray], list[int]]:
    """Each window inherits its patient's label (weak labeling)."""
    windows: list[np.ndarray] = []
    labels: list[int] = []
    for p in corpus:
        notes = clean.get(p.patient_id, [])
        pt = attn.tokenize_patient(notes, vocab)
        if len(pt.ids) == 0:
            continue
        for s, e in attn.slice_windows(len(pt.ids), wcfg):
            windows.append(pt.ids[s:e])
            labels.append(1 if p.gold_label else 0)
    return windows, labels


def train_attention_model(corpus: Corpus, clean: dict[str, list[CleanNote]],
                          seed: int,
                          wcfg: attn.WindowConfig = attn.DESK_WINDOW_PRESET,
                          d_model: int = 64, n_heads: int = 2, n_layers: int = 2,
                          local_radius: int = 16,
                          tcfg: Optional[attn.TrainConfig] = None) -> AttnBundle:
    texts = [n.text for p in corpus for n in clean.get(p.patient_id, [])]
    vocab = attn.build_vocab(texts, min_freq=2)
    acfg = attn.AttnConfig(vocab_size=vocab.size, d_model=d_model,
                           n_heads=n_heads, n_layers=n_layers,
                           local_radius=local_radius)
    model = attn.init_model(acfg, seed=seed)
    windows, labels = build_training_windows(corpus, clean, vocab, wcfg)
    if tcfg is None:
        tcfg = attn.TrainConfig(learning_rate=3e-4, epochs=3, batch_size=32,
                                seed=seed)
    attn.train(model, windows, labels, tcfg)
    return AttnBundle(model=model, vocab=vocab, wcfg=wcfg)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def score_linear(bundle: LinearBundle, X_raw: np.ndarray, corpus: Corpus
                 ) -> ScoredSet:
    probs = predict_proba(bundle.model, X_raw)
    return ScoredSet(
        patient_ids=tuple(p.patient_id for p in corpus),
        scores=tuple(float(s) for s in np.atleast_1d(probs)),
        labels=tuple(int(bool(p.gold_label)) for p in corpus))


def score_tfidf(bundle: TfidfBundle, corpus: Corpus,
                clean: dict[str, list[CleanNote]]) -> ScoredSet:
    docs = patient_documents(corpus, clean)
    X = transform_matrix(docs, bundle.tfidf)
    probs = predict_proba(bundle.model, X)
    return ScoredSet(
        patient_ids=tuple(p.patient_id for p in corpus),
        scores=tuple(float(s) for s in np.atleast_1d(probs)),
        labels=tuple(int(bool(p.gold_label)) for p in corpus))


def score_attention(bundle: AttnBundle, corpus: Corpus,
                    clean: dict[str, list[CleanNote]]) -> ScoredSet:
    ids, labels, seqs = [], [], []
    for p in corpus:
        notes = clean.get(p.patient_id, [])
        if not notes:
            continue
        pt = attn.tokenize_patient(notes, bundle.vocab)
        if len(pt.ids) == 0:
            continue
        ids.append(p.patient_id)
        labels.append(int(bool(p.gold_label)))
        seqs.append(pt.ids)
    preds = attn.predict_many(bundle.model, seqs, bundle.wcfg)
    return ScoredSet(patient_ids=tuple(ids),
                     scores=tuple(pr.probability for pr in preds),
                     labels=tuple(labels))


# ---------------------------------------------------------------------------
# Full experiment
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    aucs: dict[str, float]
    reports: dict[str, MetricsReport]
    scored: dict[str, ScoredSet]
    thresholds: dict[str, float]


def _subset(s: ScoredSet, idx: np.ndarray) -> ScoredSet:
    return ScoredSet(
        patient_ids=tuple(s.patient_ids[i] for i in idx),
        scores=tuple(s.scores[i] for i in idx),
        labels=tuple(s.labels[i] for i in idx))


def run_experiment(seed: int, gen_cfg: Optional[GenConfig] = None,
                   corpus: Optional[Corpus] = None,
                   test_fraction: float = 0.10,
                   attention_kwargs: Optional[dict] = None,
                   threshold_on_test: bool = False) -> ExperimentResult:
    """Train all four models and report held-out metrics. Thresholds are
    selected on a 10% validation slice of the training set by default;
    threshold_on_test reproduces the alternative reading."""
    if corpus is None:
        corpus = generate_synthetic_corpus(gen_cfg or GenConfig(), seed)
    train_c, test_c = split_train_test(corpus, test_fraction, seed)
    clean = preprocess_corpus(corpus, PreprocessConfig())
    lexicon = compile_lexicon()
    y_train = labels_of(train_c)

    bundles: dict[str, object] = {}
    bundles["baseline"] = train_count_model(
        structured_matrix(train_c), y_train, STRUCTURED_FEATURES, seed)
    bundles["regex"] = train_count_model(
        concept_matrix(train_c, clean, lexicon), y_train,
        tuple(lexicon.names), seed)
    bundles["tfidf"] = train_tfidf_model(
        patient_documents(train_c, clean), y_train, seed)
    bundles["attention"] = train_attention_model(
        train_c, clean, seed, **(attention_kwargs or {}))

    def scores_for(name: str, subset: Corpus) -> ScoredSet:
        if name == "baseline":
            return score_linear(bundles[name], structured_matrix(subset), subset)
        if name == "regex":
            return score_linear(bundles[name],
                                concept_matrix(subset, clean, lexicon), subset)
        if name == "tfidf":
            return score_tfidf(bundles[name], subset, clean)
        return score_attention(bundles[name], subset, clean)

    _, val_idx = _val_split(len(train_c.patients), 0.10, seed)
    val_corpus = Corpus(patients=tuple(train_c.patients[i] for i in val_idx))

    aucs: dict[str, float] = {}
    reports: dict[str, MetricsReport] = {}
    scored: dict[str, ScoredSet] = {}
    thresholds: dict[str, float] = {}
    for name in MODEL_NAMES:
        test_scores = scores_for(name, test_c)
        if threshold_on_test:
            thr, _ = best_accuracy_threshold(test_scores)
        else:
            val_scores = scores_for(name, val_corpus)
            thr, _ = best_accuracy_threshold(val_scores)
        aucs[name] = roc_auc(test_scores)
        reports[name] = metrics_report(test_scores, thr)
        scored[name] = test_scores
        thresholds[name] = thr
    return ExperimentResult(aucs=aucs, reports=reports, scored=scored,
                            thresholds=thresholds)
