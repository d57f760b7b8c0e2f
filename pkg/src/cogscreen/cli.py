"""Single entry point for the pipeline:
generate | preprocess | match | tfidf | train-linear | train-attn |
predict-attn | evaluate | compare | serve | iterate.

Artifacts are written atomically (temp file + rename) and every output
gets a .manifest.json with input/output hashes and seeds. Relative paths
resolve under $COGSCREEN_DATA_DIR when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attention as attn
from . import experiment as exp
from .active_loop import (AnnotationService, AttnModelBackend, LoopConfig,
                          RegexModelBackend, StubBackend)
from .concepts import compile_lexicon, concept_features, load_features_csv, \
    save_features_csv
from .corpus import Corpus, GenConfig, generate_synthetic_corpus, load_corpus, \
    save_corpus, split_train_test, strip_labels
from .evaluation import ScoredSet, best_accuracy_threshold, compare_models, \
    load_scores_csv, metrics_report, save_scores_csv
from .linear_model import load_linear, save_linear
from .manifest import RunManifest, atomic_write_text, atomic_write_with
from .preprocess import PreprocessConfig, load_clean_corpus, preprocess_corpus, \
    save_clean_corpus
from .vectorizer import load_tfidf, rank_terms, save_tfidf, transform_matrix

log = logging.getLogger("cogscreen")


def _p(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    base = os.environ.get("COGSCREEN_DATA_DIR")
    if base and not p.is_absolute():
        return Path(base) / p
    return p


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.config:
        cfg = GenConfig.from_json(_p(args.config))
    else:
        cfg = GenConfig(n_patients=args.n, prevalence=args.prevalence,
                        structured_sensitivity=args.structured_sensitivity)
    cfg.validate()
    corpus = generate_synthetic_corpus(cfg, args.seed)
    if args.labeled_fraction < 1.0:
        corpus = strip_labels(corpus, args.labeled_fraction, seed=args.seed)
    out = _p(args.out)
    atomic_write_with(out, lambda tmp: save_corpus(corpus, tmp))
    manifest = RunManifest("generate", args._argv, {"seed": args.seed})
    manifest.add_config("gen_config", _p(args.config))
    manifest.add_output(out)
    manifest.write(out)
    log.info("wrote %d patients to %s", len(corpus), out)
    return 0


def cmd_preprocess(args) -> int:
    corpus = load_corpus(_p(args.infile))
    cfg = PreprocessConfig.from_json(_p(args.config)) if args.config else PreprocessConfig()
    clean = preprocess_corpus(corpus, cfg)
    out = _p(args.out)
    atomic_write_with(out, lambda tmp: save_clean_corpus(clean, tmp))
    total_raw = sum(len(n.text) for p in corpus for n in p.notes)
    total_clean = sum(len(c.text) for notes in clean.values() for c in notes)
    ratio = 1.0 - total_clean / total_raw if total_raw else 0.0
    print(f"reduction_ratio={ratio:.4f}")
    manifest = RunManifest("preprocess", args._argv)
    manifest.add_input(_p(args.infile))
    manifest.add_config("preprocess_config", _p(args.config))
    manifest.add_output(out)
    manifest.write(out)
    return 0


def cmd_match(args) -> int:
    clean = load_clean_corpus(_p(args.corpus))
    lexicon = compile_lexicon(_p(args.lexicon))
    for w in lexicon.warnings:
        log.warning("%s", w)
    rows = {pid: concept_features(notes, lexicon)[0] for pid, notes in clean.items()}
    out = _p(args.out)
    atomic_write_with(out, lambda tmp: save_features_csv(rows, lexicon, tmp))
    manifest = RunManifest("match", args._argv)
    manifest.add_input(_p(args.corpus))
    manifest.add_config("lexicon", _p(args.lexicon))
    manifest.add_output(out)
    manifest.write(out)
    log.info("wrote %d feature rows to %s", len(rows), out)
    return 0


def _load_labeled(corpus_path: Path) -> Corpus:
    corpus = load_corpus(corpus_path)
    unlabeled = [p.patient_id for p in corpus if p.gold_label is None]
    if unlabeled:
        raise SystemExit(f"corpus {corpus_path} has {len(unlabeled)} unlabeled patients")
    return corpus


def cmd_tfidf(args) -> int:
    if args.action == "fit":
        corpus = _load_labeled(_p(args.corpus))
        clean = load_clean_corpus(_p(args.clean))
        docs = exp.patient_documents(corpus, clean)
        labels = exp.labels_of(corpus)
        from .vectorizer import fit_tfidf, select_features
        model = fit_tfidf(docs, labels, min_df=args.min_df)
        if args.threshold is not None:
            model = select_features(model, args.threshold)
        out = _p(args.out)
        atomic_write_with(out, lambda tmp: save_tfidf(model, tmp))
        manifest = RunManifest("tfidf-fit", args._argv)
        manifest.add_input(_p(args.corpus))
        manifest.add_input(_p(args.clean))
        manifest.add_output(out)
        manifest.write(out)
        log.info("fit tf-idf with %d terms", len(model.vocab))
        return 0
    if args.action == "transform":
        model = load_tfidf(_p(args.model))
        clean = load_clean_corpus(_p(args.clean))
        pids = sorted(clean)
        docs = [" ".join(n.text for n in clean[pid]) for pid in pids]
        X = transform_matrix(docs, model)
        out = _p(args.out)
        terms = model.selected_terms
        lines = ["patient_id," + ",".join(terms)]
        for pid, row in zip(pids, X):
            lines.append(pid + "," + ",".join(repr(v) for v in row))
        atomic_write_text(out, "\n".join(lines) + "\n")
        manifest = RunManifest("tfidf-transform", args._argv)
        manifest.add_input(_p(args.model))
        manifest.add_input(_p(args.clean))
        manifest.add_output(out)
        manifest.write(out)
        return 0
    # rank
    model = load_tfidf(_p(args.model))
    print("| Rank | Terms | CorrCoef |")
    print("|---|---|---|")
    for rank, term, corr in rank_terms(model, top_k=args.top):
        print(f"| {rank} | {term} | {corr:.4f} |")
    return 0


def cmd_train_linear(args) -> int:
    corpus = _load_labeled(_p(args.corpus))
    train_c, test_c = split_train_test(corpus, args.test_fraction, args.split_seed)
    y = exp.labels_of(train_c)
    out = _p(args.out)
    manifest = RunManifest("train-linear", args._argv,
                           {"seed": args.seed, "split_seed": args.split_seed})
    manifest.add_input(_p(args.corpus))

    if args.model == "baseline":
        bundle = exp.train_count_model(exp.structured_matrix(train_c), y,
                                       exp.STRUCTURED_FEATURES, args.seed,
                                       folds=args.folds)
        test_scores = exp.score_linear(bundle, exp.structured_matrix(test_c), test_c)
    elif args.model == "regex":
        if args.features:
            names, rows = load_features_csv(_p(args.features))
            manifest.add_input(_p(args.features))
            X_train = np.array([rows[p.patient_id] for p in train_c], dtype=float)
            X_test = np.array([rows[p.patient_id] for p in test_c], dtype=float)
            bundle = exp.train_count_model(X_train, y, tuple(names), args.seed,
                                           folds=args.folds)
            test_scores = exp.score_linear(bundle, X_test, test_c)
        else:
            raise SystemExit("--model regex requires --features features.csv")
    else:  # tfidf
        if not args.clean:
            raise SystemExit("--model tfidf requires --clean clean.jsonl")
        clean = load_clean_corpus(_p(args.clean))
        manifest.add_input(_p(args.clean))
        tb = exp.train_tfidf_model(exp.patient_documents(train_c, clean), y,
                                   args.seed)
        tf_out = _p(args.tfidf_out) if args.tfidf_out else Path(str(out) + ".tfidf.json")
        atomic_write_with(tf_out, lambda tmp: save_tfidf(tb.tfidf, tmp))
        manifest.add_output(tf_out)
        bundle = exp.LinearBundle(model=tb.model, chosen_lambda=tb.chosen_lambda)
        test_scores = exp.score_tfidf(tb, test_c, clean)

    atomic_write_with(out, lambda tmp: save_linear(bundle.model, tmp))
    manifest.add_output(out)
    if args.scores_out:
        sp = _p(args.scores_out)
        atomic_write_with(sp, lambda tmp: save_scores_csv(test_scores, tmp))
        manifest.add_output(sp)
    manifest.write(out)
    log.info("model=%s lambda=%.6g test_n=%d", args.model, bundle.chosen_lambda,
             len(test_scores))
    return 0


def cmd_train_attn(args) -> int:
    corpus = _load_labeled(_p(args.corpus))
    clean = load_clean_corpus(_p(args.clean))
    train_c, test_c = split_train_test(corpus, args.test_fraction, args.split_seed)
    if args.preset == "full":
        wcfg = attn.FULL_WINDOW_PRESET
        tcfg = attn.TrainConfig(learning_rate=7.09e-6, adam_eps=1e-9,
                                epochs=args.epochs, batch_size=args.batch_size,
                                seed=args.seed)
    else:
        wcfg = attn.DESK_WINDOW_PRESET
        tcfg = attn.TrainConfig(learning_rate=3e-4, epochs=args.epochs,
                                batch_size=args.batch_size, seed=args.seed)
    bundle = exp.train_attention_model(train_c, clean, args.seed, wcfg=wcfg,
                                       tcfg=tcfg)
    out = _p(args.out)
    atomic_write_with(out, lambda tmp: _save_attn_pair(bundle, tmp, out))
    manifest = RunManifest("train-attn", args._argv,
                           {"seed": args.seed, "split_seed": args.split_seed})
    manifest.add_input(_p(args.corpus))
    manifest.add_input(_p(args.clean))
    manifest.add_output(out)
    sidecar = Path(str(out) + ".json")
    if sidecar.exists():
        manifest.add_output(sidecar)
    if args.scores_out:
        scores = exp.score_attention(bundle, test_c, clean)
        sp = _p(args.scores_out)
        atomic_write_with(sp, lambda tmp: save_scores_csv(scores, tmp))
        manifest.add_output(sp)
    manifest.write(out)
    log.info("trained attention model; final epoch loss=%.4f",
             bundle.model.history[-1] if bundle.model.history else float("nan"))
    return 0


def _save_attn_pair(bundle: exp.AttnBundle, tmp: Path, final: Path) -> None:
    # save_attn writes binary + .json sidecar next to it; the binary is
    # renamed by the atomic writer, the sidecar is moved to match.
    attn.save_attn(bundle.model, bundle.vocab, bundle.wcfg, tmp)
    os.replace(str(tmp) + ".json", str(final) + ".json")


def cmd_predict_attn(args) -> int:
    model, vocab, wcfg = attn.load_attn(_p(args.model))
    clean = load_clean_corpus(_p(args.clean))
    corpus = load_corpus(_p(args.corpus))
    ids, scores, labels = [], [], []
    highlights = {}
    for p in corpus:
        notes = clean.get(p.patient_id, [])
        if not notes or p.gold_label is None:
            continue
        pred = attn.predict_patient(model, notes, vocab, wcfg)
        ids.append(p.patient_id)
        scores.append(pred.probability)
        labels.append(int(bool(p.gold_label)))
        if args.emit_attention:
            hl = attn.attention_highlights(model, notes, vocab, wcfg,
                                           top_k=args.top_k)
            highlights[p.patient_id] = [
                {"note_id": notes[h.note_index].note_id,
                 "token_index": h.token_index, "weight": h.weight}
                for h in hl
            ]
    scored = ScoredSet(patient_ids=tuple(ids), scores=tuple(scores),
                       labels=tuple(labels))
    out = _p(args.out)
    atomic_write_with(out, lambda tmp: save_scores_csv(scored, tmp))
    manifest = RunManifest("predict-attn", args._argv)
    manifest.add_input(_p(args.model))
    manifest.add_input(_p(args.clean))
    manifest.add_input(_p(args.corpus))
    manifest.add_output(out)
    if args.emit_attention:
        hp = _p(args.emit_attention)
        atomic_write_text(hp, json.dumps(highlights, sort_keys=True, indent=2) + "\n")
        manifest.add_output(hp)
    manifest.write(out)
    return 0


def cmd_evaluate(args) -> int:
    scored = load_scores_csv(_p(args.scores))
    if args.threshold == "auto":
        thr, _ = best_accuracy_threshold(scored)
        thr_source = "chosen on these scores"
    else:
        thr = float(args.threshold)
        thr_source = "provided"
    report = metrics_report(scored, thr)
    out = _p(args.out)
    if str(out).endswith(".md"):
        table = compare_models([(args.name, report)])
        text = table.to_markdown() + f"\nthreshold: {thr} ({thr_source})\n"
    else:
        obj = report.to_dict()
        obj["threshold_source"] = thr_source
        text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    atomic_write_text(out, text)
    manifest = RunManifest("evaluate", args._argv)
    manifest.add_input(_p(args.scores))
    manifest.add_output(out)
    manifest.write(out)
    return 0


def cmd_compare(args) -> int:
    reports = []
    for pair in args.scores:
        if "=" not in pair:
            raise SystemExit(f"expected name=scores.csv, got {pair!r}")
        name, path = pair.split("=", 1)
        scored = load_scores_csv(_p(path))
        thr, _ = best_accuracy_threshold(scored)
        reports.append((name, metrics_report(scored, thr)))
    table = compare_models(reports)
    if args.out:
        out = _p(args.out)
        text = table.to_json() if str(out).endswith(".json") else table.to_markdown()
        atomic_write_text(out, text)
        manifest = RunManifest("compare", args._argv)
        for pair in args.scores:
            manifest.add_input(_p(pair.split("=", 1)[1]))
        manifest.add_output(out)
        manifest.write(out)
    else:
        print(table.to_markdown())
    return 0


def _build_service(args) -> AnnotationService:
    corpus = load_corpus(_p(args.corpus))
    clean = load_clean_corpus(_p(args.clean))
    lexicon = compile_lexicon(_p(args.lexicon) if args.lexicon else None)
    cfg = LoopConfig.from_json(_p(args.loop_config)) if args.loop_config else LoopConfig()
    if args.backend == "stub":
        backend = StubBackend(clean)
    elif args.backend == "regex":
        if not args.linear_model:
            raise SystemExit("--backend regex requires --linear-model")
        backend = RegexModelBackend(corpus, clean, lexicon,
                                    load_linear(_p(args.linear_model)))
    else:
        if not args.attn_model:
            raise SystemExit("--backend attn requires --attn-model")
        model, vocab, wcfg = attn.load_attn(_p(args.attn_model))
        backend = AttnModelBackend(clean, model, vocab, wcfg)
    return AnnotationService(corpus, clean, lexicon, backend, cfg,
                             _p(args.journal))


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    service = _build_service(args)
    if args.iterate_on_start:
        report = service.run_iteration()
        log.info("startup iteration created %d tasks", len(report.created_tasks))
    app = create_app(service, static_dir=_p(args.static_dir) if args.static_dir else None)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_iterate(args) -> int:
    if args.server:
        import httpx
        resp = httpx.post(args.server.rstrip("/") + "/api/iterate", timeout=300.0)
        resp.raise_for_status()
        print(json.dumps(resp.json(), sort_keys=True, indent=2))
        return 0
    if not args.corpus or not args.clean:
        raise SystemExit("iterate needs either --server or --corpus/--clean")
    service = _build_service(args)
    report = service.run_iteration()
    print(json.dumps({
        "created_tasks": list(report.created_tasks),
        "queue_pending": report.queue_pending,
        "queue_assigned": report.queue_assigned,
        "queue_labeled": report.queue_labeled,
        "queue_skipped": report.queue_skipped,
        "retrained": report.retrained,
        "labels_since_retrain": report.labels_since_retrain,
        "test_auc": report.test_auc,
    }, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_service_args(sp, required: bool = True) -> None:
    sp.add_argument("--corpus", required=required)
    sp.add_argument("--clean", required=required)
    sp.add_argument("--lexicon")
    sp.add_argument("--journal", default="labels.journal")
    sp.add_argument("--loop-config")
    sp.add_argument("--backend", choices=["stub", "regex", "attn"], default="stub")
    sp.add_argument("--linear-model")
    sp.add_argument("--attn-model")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cogscreen",
        description="Cognitive-concern screening pipeline and review service")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("generate", help="generate a synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="GenConfig JSON file")
    sp.add_argument("--n", type=int, default=770)
    sp.add_argument("--prevalence", type=float, default=0.446)
    sp.add_argument("--structured-sensitivity", type=float, default=0.5)
    sp.add_argument("--labeled-fraction", type=float, default=1.0,
                    help="keep gold labels for this fraction; the rest become "
                         "unlabeled review candidates")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("preprocess", help="trim notes with the 6-step pipeline")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("match", help="concept-category counts per patient")
    sp.add_argument("--corpus", required=True, help="clean corpus JSONL")
    sp.add_argument("--lexicon")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("tfidf", help="fit / transform / rank tf-idf features")
    tsub = sp.add_subparsers(dest="action", required=True)
    f = tsub.add_parser("fit")
    f.add_argument("--corpus", required=True)
    f.add_argument("--clean", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--min-df", type=int, default=2)
    f.add_argument("--threshold", type=float)
    f.set_defaults(func=cmd_tfidf)
    t = tsub.add_parser("transform")
    t.add_argument("--model", required=True)
    t.add_argument("--clean", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tfidf)
    r = tsub.add_parser("rank")
    r.add_argument("--model", required=True)
    r.add_argument("--top", type=int, default=20)
    r.set_defaults(func=cmd_tfidf)

    sp = sub.add_parser("train-linear", help="train models 1-3")
    sp.add_argument("--model", choices=["baseline", "regex", "tfidf"], required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--features", help="features.csv for --model regex")
    sp.add_argument("--clean", help="clean.jsonl for --model tfidf")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tfidf-out")
    sp.add_argument("--scores-out")
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--test-fraction", type=float, default=0.10)
    sp.set_defaults(func=cmd_train_linear)

    sp = sub.add_parser("train-attn", help="train the windowed-attention model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--clean", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--preset", choices=["desk", "full"], default="desk")
    sp.add_argument("--epochs", type=int, default=4)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--scores-out")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--test-fraction", type=float, default=0.10)
    sp.set_defaults(func=cmd_train_attn)

    sp = sub.add_parser("predict-attn", help="score patients with a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--clean", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--emit-attention")
    sp.add_argument("--top-k", type=int, default=10)
    sp.set_defaults(func=cmd_predict_attn)

    sp = sub.add_parser("evaluate", help="metrics report from a scores CSV")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", default="auto")
    sp.add_argument("--name", default="model")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("compare", help="comparison table over scores files")
    sp.add_argument("scores", nargs="+", metavar="name=scores.csv")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("serve", help="run the annotation review service")
    _add_service_args(sp)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--static-dir")
    sp.add_argument("--iterate-on-start", action="store_true")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("iterate", help="run one active-learning iteration")
    sp.add_argument("--server", help="POST /api/iterate on a running service")
    _add_service_args(sp, required=False)
    sp.set_defaults(func=cmd_iterate)

    return parser


def main(argv: list[str] | None = None) -> int:
    effective = list(argv) if argv is not None else sys.argv[1:]
    args = build_parser().parse_args(effective)
    args._argv = effective
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # surface the failing stage, exit 1
        log.error("stage %s failed: %s", getattr(args, "command", "?"), exc)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
