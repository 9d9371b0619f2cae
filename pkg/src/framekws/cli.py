"""Command-line interface.

Every command reads and writes files in the formats of :mod:`framekws.formats`
and writes its outputs into the directory given by ``--out``, together with
the fully resolved configuration (``config.json``).

Configuration is layered: built-in defaults, then the JSON file given by
``--config``, then ``--set section.key=value`` overrides (values are parsed
as JSON when possible).

Exit codes: 0 success, 2 usage or configuration error, 3 malformed input,
4 fingerprint mismatch, 5 unknown query ids, 6 non-finite training loss,
7 gradient check failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset, formats
from .encoders import ModelConfig, init_params, load_params, save_params
from .evaluation import (TwvConfig, accuracy_auc, align_hits, det_points, kst_normalize,
                         make_classification_trials, mtwv_sweep, segment_frames, twv)
from .formats import FingerprintMismatch, FormatError
from .records import Inventory
from .search import (DecodeConfig, DocumentIndex, build_index, classify_segment, frame_probabilities, rescore,
                     search_encodings)
from .synth import SynthConfig, generate
from .training import LossConfig, SamplerConfig, Schedule, TrainingCorpus, TrainingError, train

log = logging.getLogger("framekws")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_FINGERPRINT = 4
EXIT_UNKNOWN_QUERY = 5
EXIT_NONFINITE = 6
EXIT_GRADCHECK = 7


class UsageError(Exception):
    pass


class UnknownQueries(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

SECTIONS = {
    "synth": SynthConfig,
    "loss": LossConfig,
    "sampler": SamplerConfig,
    "schedule": Schedule,
    "decode": DecodeConfig,
    "twv": TwvConfig,
}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def default_config() -> dict:
    cfg = {name: {k: _plain(v) for k, v in dataclasses.asdict(cls()).items()} for name, cls in SECTIONS.items()}
    model = {f.name: _plain(f.default) for f in dataclasses.fields(ModelConfig) if f.name != "n_symbols"}
    # taken from the corpus features unless set explicitly
    model["feature_dim"] = None
    cfg["model"] = model
    cfg["rescore"] = {"gamma": 1.0}
    cfg["classify"] = {"threshold": 0.5}
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(path=None, overrides=(), seed=None) -> dict:
    """Defaults, then the config file, then ``section.key=value`` overrides."""
    cfg = default_config()

    def put(section, key, value, origin):
        if section not in cfg:
            raise UsageError(f"{origin}: unknown config section {section!r}")
        if key not in cfg[section] and not (section == "model" and key == "n_symbols"):
            raise UsageError(f"{origin}: unknown key {key!r} in section {section!r}")
        cfg[section][key] = value

    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: config must be a JSON object of sections")
        for section, values in loaded.items():
            if not isinstance(values, dict):
                raise UsageError(f"{path}: section {section!r} must be an object")
            for k, v in values.items():
                put(section, k, v, str(path))
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        put(section, name, _parse_value(value), "--set")
    if seed is not None:
        cfg["synth"]["seed"] = seed
        cfg["sampler"]["seed"] = seed
    cfg["seed"] = cfg["sampler"]["seed"]
    return cfg


def _build(cls, values: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items() if k in fields}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _model_config(cfg: dict, n_symbols: int, feature_dim: int) -> ModelConfig:
    values = dict(cfg["model"])
    values.setdefault("n_symbols", n_symbols)
    if values.get("feature_dim") is None:
        values["feature_dim"] = feature_dim
    values["downsample"] = tuple(values["downsample"])
    return _build(ModelConfig, values)


def _echo_config(out: Path, cfg: dict, command: str) -> None:
    resolved = dict(cfg, command=command)
    text = json.dumps(resolved, indent=2, sort_keys=True)
    log.debug("resolved config:\n%s", text)
    with formats.atomic_write(out / "config.json", "w") as fh:
        fh.write(text + "\n")


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------

def _load_model(path, fingerprint=None):
    return load_params(path, fingerprint)


def _model_inventory(store) -> Inventory:
    symbols = store.meta.get("inventory")
    if not symbols:
        raise FormatError("parameter file carries no symbol inventory")
    return Inventory(symbols)


def _queries(args, corpus_dir=None) -> list[tuple[str, str]]:
    if args.queries:
        return dataset.load_queries(args.queries)
    if corpus_dir is None:
        raise UsageError("--queries is required when no corpus directory is given")
    return dataset.load_all_queries(corpus_dir)


def _encodings(args, store) -> DocumentIndex:
    if args.index:
        return DocumentIndex.load(args.index, store)
    if not args.corpus:
        raise UsageError("give either --index or --corpus")
    feats = dataset.load_features(args.corpus, args.split)
    return build_index(feats, store)


def _embeddings(store, inventory, queries):
    from .encoders import encode_queries

    if not queries:
        return {}
    try:
        ids = [inventory.encode(t) for _, t in queries]
    except ValueError as exc:
        raise FormatError(f"query text: {exc}") from None
    emb = encode_queries(ids, store)
    return {q: emb[i] for i, (q, _) in enumerate(queries)}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg, out: Path) -> int:
    synth = _build(SynthConfig, cfg["synth"])
    corpus = generate(synth)
    dataset.write_corpus(corpus, out)
    for split in corpus.splits:
        log.info("%s: %d utterances, %.1f s", split, len(corpus.splits[split]), corpus.total_seconds(split))
    return EXIT_OK


def cmd_train(args, cfg, out: Path) -> int:
    inventory = dataset.load_inventory(args.corpus)
    utts = dataset.load_split(args.corpus, args.split)
    if len(utts) < 2:
        raise UsageError(f"{args.corpus}/{args.split}: training needs at least 2 utterances")
    if args.max_utterances:
        utts = utts[: args.max_utterances]
    model = _model_config(cfg, len(inventory), utts[0].features.shape[1])
    init, opt_state = None, None
    if args.init:
        init, extra = load_params(args.init, model.fingerprint(), with_extra=True)
        opt_state = extra or None
    result = train(TrainingCorpus(utts), inventory, model, _build(LossConfig, cfg["loss"]),
                   _build(SamplerConfig, cfg["sampler"]), _build(Schedule, cfg["schedule"]),
                   init_store=init, optimizer_state=opt_state)
    store = result.store
    store.meta["inventory"] = list(inventory.symbols)
    save_params(store, out / "model.kwsp", extra=result.optimizer.state_tensors())
    with formats.atomic_write(out / "train_log.tsv", "w") as fh:
        fh.write("epoch\ttrain_loss\tval_loss\tlr\n" + result.log_text())
    log.info("trained %d epochs, %d steps", len(result.log), result.optimizer.step_count)
    return EXIT_OK


def cmd_init(args, cfg, out: Path) -> int:
    """Write untrained parameters (handy for smoke tests and pipelines)."""
    inventory = dataset.load_inventory(args.corpus)
    feats = dataset.load_features(args.corpus, args.split)
    dim = next(iter(feats.values())).shape[1] if feats else cfg["model"]["feature_dim"]
    store = init_params(_model_config(cfg, len(inventory), dim), cfg["seed"])
    store.meta["inventory"] = list(inventory.symbols)
    save_params(store, out / "model.kwsp")
    return EXIT_OK


def cmd_index(args, cfg, out: Path) -> int:
    store = _load_model(args.model)
    feats = dataset.load_features(args.corpus, args.split)
    index = build_index(feats, store, out / "index.kwsi")
    log.info("indexed %d utterances", len(index.encodings))
    return EXIT_OK


def cmd_search(args, cfg, out: Path) -> int:
    store = _load_model(args.model)
    index = _encodings(args, store)
    queries = _queries(args, args.corpus)
    inventory = _model_inventory(store)
    decode = _build(DecodeConfig, cfg["decode"])
    emb = _embeddings(store, inventory, queries)
    hyps = []
    for q, text in queries:
        hyps += search_encodings(index.encodings, emb[q], q, inventory.letter_count(text), decode,
                                 index.frame_step_ms)
    formats.write_hypotheses(out / "hyps.tsv", hyps)
    log.info("%d hits for %d queries", len(hyps), len(queries))
    return EXIT_OK


def cmd_classify(args, cfg, out: Path) -> int:
    store = _load_model(args.model)
    inventory = _model_inventory(store)
    queries = _queries(args, args.corpus)
    index = _encodings(args, store)
    refs = formats.read_references(args.refs) if args.refs else dataset.load_references(args.corpus, args.split)
    durations = dataset.load_durations(args.corpus, args.split)
    trials = make_classification_trials(durations, refs, [q for q, _ in queries],
                                        np.random.default_rng(cfg["seed"]))
    emb = _embeddings(store, inventory, queries)
    rows, labels, scores = [], [], []
    cache: dict = {}
    for t in trials:
        key = (t.query_id, t.utt_id)
        if key not in cache:
            cache.update(frame_probabilities(index.encodings, emb, [key]))
        z = cache[key]
        s = classify_segment(z[segment_frames(t.start_ms, t.end_ms, index.frame_step_ms, len(z))])
        rows.append((t.query_id, t.utt_id, t.start_ms, t.end_ms, int(t.positive), formats.fmt_score(s)))
        labels.append(t.positive)
        scores.append(s)
    formats.write_rows(out / "trials.tsv", rows)
    if trials:
        acc, auc = accuracy_auc(labels, scores, cfg["classify"]["threshold"])
        log.info("%d trials: accuracy %.4f AUC %.4f", len(trials), acc, auc)
    return EXIT_OK


def cmd_rescore(args, cfg, out: Path) -> int:
    store = _load_model(args.model)
    inventory = _model_inventory(store)
    baseline = formats.read_hypotheses(args.baseline)
    queries = _queries(args, args.corpus)
    known = {q for q, _ in queries}
    unknown = sorted({h.query_id for h in baseline} - known)
    if unknown:
        raise UnknownQueries(f"baseline mentions query ids missing from the query list: {', '.join(unknown)}")
    index = _encodings(args, store)
    missing = sorted({h.utt_id for h in baseline} - set(index.encodings))
    if missing:
        raise FormatError(f"baseline mentions utterances not in the index: {', '.join(missing[:10])}")
    gamma = float(args.gamma if args.gamma is not None else cfg["rescore"]["gamma"])
    emb = _embeddings(store, inventory, [(q, t) for q, t in queries if q in {h.query_id for h in baseline}])
    probs = frame_probabilities(index.encodings, emb, sorted({(h.query_id, h.utt_id) for h in baseline}))
    try:
        fused = rescore(baseline, probs, gamma, index.frame_step_ms)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    if args.normalize:
        # keep fused scores inside [0, 1] so KST can be applied downstream
        fused = [h.with_score(h.score / (1.0 + gamma)) for h in fused]
    formats.write_hypotheses(out / "hyps.tsv", fused)
    return EXIT_OK


def _duration_s(args) -> float:
    if args.duration_s is not None:
        return float(args.duration_s)
    if args.corpus:
        return dataset.total_seconds(args.corpus, args.split)
    raise UsageError("give --duration-s or --corpus/--split to set the search duration")


def cmd_score(args, cfg, out: Path) -> int:
    if args.mode == "classification":
        rows = list(formats.read_rows(args.hyps, 6, "trial"))
        labels = [f[4] == "1" for _, f in rows]
        scores = [float(f[5]) for _, f in rows]
        acc, auc = accuracy_auc(labels, scores, cfg["classify"]["threshold"])
        formats.write_rows(out / "report.tsv", [("metric", "value"), ("trials", len(rows)),
                                                ("accuracy", formats.fmt_score(acc)),
                                                ("auc", formats.fmt_score(auc))])
        print(f"accuracy\t{acc:.6f}\nauc\t{auc:.6f}")
        return EXIT_OK

    tcfg = _build(TwvConfig, cfg["twv"])
    hyps = formats.read_hypotheses(args.hyps)
    refs = formats.read_references(args.refs)
    known = {q for q, _ in dataset.load_queries(args.queries)} if args.queries else {r.query_id for r in refs}
    unknown = sorted({h.query_id for h in hyps} - known)
    if unknown:
        raise UnknownQueries(f"hypotheses mention unknown query ids: {', '.join(unknown)}")
    duration = _duration_s(args)
    raw_al = align_hits(hyps, refs, tcfg.tolerance_ms)
    if args.kst:
        hyps = kst_normalize(hyps, duration, tcfg.beta)
    al = align_hits(hyps, refs, tcfg.tolerance_ms)
    mtwv, theta = mtwv_sweep(al, duration, tcfg.beta)
    threshold = args.threshold if args.threshold is not None else theta
    report = twv(al, duration, tcfg.beta, threshold, known)
    rows = [("metric", "value"), ("mtwv", formats.fmt_score(mtwv)), ("mtwv_threshold", formats.fmt_score(theta)),
            ("threshold", formats.fmt_score(threshold)), ("twv", formats.fmt_score(report.twv)),
            ("p_miss", formats.fmt_score(report.p_miss)), ("p_fa", formats.fmt_score(report.p_fa)),
            ("queries_scored", len(report.per_query)), ("queries_excluded", len(report.excluded)),
            ("kst", int(bool(args.kst)))]
    formats.write_rows(out / "report.tsv", rows)
    formats.write_rows(out / "per_query.tsv", [("query_id", "n_true", "n_correct", "n_fa", "p_miss", "p_fa")] + [
        (q, v.n_true, v.n_correct, v.n_fa, formats.fmt_score(v.p_miss), formats.fmt_score(v.p_fa))
        for q, v in sorted(report.per_query.items())])
    det = det_points(al, duration, tcfg.beta)
    formats.write_rows(out / "det.tsv", [("threshold", "p_miss", "p_fa")] + [
        tuple(formats.fmt_score(x) for x in p) for p in det])
    if not args.no_plot:
        from .plotting import det_figure

        curves = {"kst" if args.kst else "raw": det}
        if args.kst:
            curves["raw"] = det_points(raw_al, duration, tcfg.beta)
        with formats.atomic_write(out / "det.png") as fh:
            det_figure(curves, fh, title=f"MTWV {mtwv:.4f}",
                       operating_points={f"θ={threshold:.3g}": (report.p_fa, report.p_miss)})
    label = "ATWV" if args.threshold is not None else "TWV"
    print(f"MTWV\t{mtwv:.6f}\ttheta\t{theta:.6f}\n{label}\t{report.twv:.6f}\tthreshold\t{threshold:.6f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg, out: Path) -> int:
    from .gradsuite import TOLERANCE, run_suite

    results = run_suite(cfg["seed"])
    rows = [("check", "max_relative_error", "status")]
    for r in results:
        rows.append((r.name, formats.fmt_score(r.max_error), "pass" if r.ok else "FAIL"))
        print(f"{r.name}\t{r.max_error:.3e}\t{'pass' if r.ok else 'FAIL'}")
    formats.write_rows(out / "gradcheck.tsv", rows)
    failed = [r.name for r in results if not r.ok]
    if failed:
        log.error("gradient check above %g for: %s", TOLERANCE, ", ".join(failed))
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_benchmark(args, cfg, out: Path) -> int:
    from . import benchmark

    res = benchmark.run(out, reuse=not args.fresh)
    print(res.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: %s)" % ", ".join(sorted(default_config())))
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="seed for corpus generation, sampling and trials")
    common.add_argument("--threads", type=int, help="limit BLAS threads")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="framekws", description="Frame-level neural keyword search.")
    sub = p.add_subparsers(dest="command", required=True)

    def corpus_args(sp, required=True, split="dev"):
        sp.add_argument("--corpus", required=required, help="corpus directory written by synth")
        sp.add_argument("--split", default=split)

    sp = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", parents=[common], help="train both encoders")
    corpus_args(sp, split="train")
    sp.add_argument("--init", help="resume from this parameter file")
    sp.add_argument("--max-utterances", type=int, help="use only the first N utterances")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("init", parents=[common], help="write untrained parameters")
    corpus_args(sp, split="train")
    sp.set_defaults(fn=cmd_init)

    sp = sub.add_parser("index", parents=[common], help="encode documents once")
    sp.add_argument("--model", required=True)
    corpus_args(sp)
    sp.set_defaults(fn=cmd_index)

    for name, fn, text in (("search", cmd_search, "decode hits for every query"),
                           ("classify", cmd_classify, "score fixed-length segment trials")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--model", required=True)
        sp.add_argument("--index", help="index file from the index command")
        sp.add_argument("--queries", help="query list (query_id, text)")
        corpus_args(sp, required=False)
        if name == "classify":
            sp.add_argument("--refs", help="reference occurrences (default: the corpus split's)")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("rescore", parents=[common], help="fuse baseline scores with frame probabilities")
    sp.add_argument("--model", required=True)
    sp.add_argument("--baseline", required=True, help="baseline hypothesis file")
    sp.add_argument("--index")
    sp.add_argument("--queries")
    sp.add_argument("--gamma", type=float, help="weight of the baseline score")
    sp.add_argument("--normalize", action="store_true", help="divide fused scores by 1 + gamma")
    corpus_args(sp, required=False)
    sp.set_defaults(fn=cmd_rescore)

    sp = sub.add_parser("score", parents=[common], help="TWV / MTWV or classification metrics")
    sp.add_argument("hyps", help="hypothesis file (twv) or trials file (classification)")
    sp.add_argument("--refs", help="reference occurrences (twv mode)")
    sp.add_argument("--mode", choices=("twv", "classification"), default="twv")
    sp.add_argument("--threshold", type=float, help="fixed decision threshold (reports ATWV)")
    sp.add_argument("--kst", action="store_true", help="apply keyword-specific normalization first")
    sp.add_argument("--queries", help="query list; hypotheses for other ids are rejected")
    sp.add_argument("--duration-s", type=float, help="searched audio duration in seconds")
    sp.add_argument("--no-plot", action="store_true", help="skip the DET figure")
    corpus_args(sp, required=False)
    sp.set_defaults(fn=cmd_score)

    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("benchmark", parents=[common], help="end-to-end synthetic benchmark")
    sp.add_argument("--fresh", action="store_true", help="retrain even if a model exists in --out")
    sp.set_defaults(fn=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "score" and args.mode == "twv" and not args.refs:
        parser.error("score --mode twv needs --refs")
    limits = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(args.threads)
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {out}: {exc}") from None
        log.info("command %s, seed %d, resolved config in %s", args.command, cfg["seed"], out / "config.json")
        _echo_config(out, cfg, args.command)
        with limits:
            return args.fn(args, cfg, out)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except FingerprintMismatch as exc:
        log.error("fingerprint mismatch: %s", exc)
        return EXIT_FINGERPRINT
    except (FormatError, UnicodeDecodeError) as exc:
        log.error("malformed input: %s", exc)
        return EXIT_FORMAT
    except UnknownQueries as exc:
        log.error("%s", exc)
        return EXIT_UNKNOWN_QUERY
    except TrainingError as exc:
        log.error("%s", exc)
        return EXIT_NONFINITE
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_FORMAT
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE if isinstance(exc, FileNotFoundError) else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
