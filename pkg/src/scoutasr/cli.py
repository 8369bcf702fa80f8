"""Command-line entry point: ``scoutasr <subcommand> ...``.

Exit status: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
The default data directory comes from ``$SCOUTASR_DATA`` (else ``./data``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import io
from .corpus import SyntheticCorpusSpec, corpus_digest, generate_corpus, load_corpus, save_corpus
from .encoder import RecognizerModel
from .decoding import BigramLM, DecodeConfig, UniformLM
from .metrics import (
    boundary_edit_distance,
    corpus_error_rate,
    dumps,
    format_table,
    frame_latency,
    merge_boundary_evals,
    segment_length_stats,
    word_latency,
)
from .pipeline import MODES, evaluate, sweep_sigma
from .scout import ScoutModel, raw_boundaries, scout_forward
from .training import TrainConfig, scout_boundary_report, train_rn, train_scout
from .transformer import ModelDims

DATA_ENV = "SCOUTASR_DATA"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("scoutasr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n")


def _write_history(path: Path, history: list) -> None:
    _write_text(path, "\n".join(json.dumps(r, sort_keys=True) for r in history))


def _split(corpus, name: str) -> list:
    utts = corpus.split(name)
    if not utts:
        raise io.FormatError(f"split {name!r} is empty")
    return utts


def _load(path, kind):
    model = io.load_model(path)
    if not isinstance(model, kind):
        raise io.FormatError(f"{path}: expected a {kind.__name__} checkpoint")
    return model


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise io.FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    spec = SyntheticCorpusSpec(
        vocab_size=args.vocab_size, n_features=args.n_features, noise_std=args.noise_std,
        n_train=args.n_train, n_test=args.n_test, seed=args.seed,
    )
    corpus = generate_corpus(spec)
    save_corpus(corpus, args.data)
    print(f"wrote {len(corpus.utterances)} utterances to {args.data}")
    print(f"manifest sha256={corpus_digest(args.data)}")
    return EXIT_OK


def cmd_train_scout(args) -> int:
    corpus = load_corpus(args.data)
    train = _split(corpus, "train")
    dims = ModelDims(train[0].features.shape[1], args.d_model, args.heads, args.d_ff, args.layers)
    config = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, sigma=args.sigma, n_average=args.n_average)
    model, history = train_scout(train, dims, config, heldout=corpus.test or None)
    out = Path(args.out or Path(args.data) / "scout")
    io.save_model(out, model)
    _write_history(out.with_name(out.name + ".history.jsonl"), history)
    if corpus.test:
        report = scout_boundary_report(model, corpus.test, args.sigma)
        print(f"held-out boundary F1={report['f1']:.4f} precision={report['precision']:.4f} recall={report['recall']:.4f}")
    print(f"saved scout to {out}.json")
    return EXIT_OK


def cmd_train_rn(args) -> int:
    corpus = load_corpus(args.data)
    train = _split(corpus, "train")
    scout = _load(args.scout, ScoutModel) if args.scout else None
    dims = ModelDims(train[0].features.shape[1], args.d_model, args.heads, args.d_ff, args.layers)
    config = TrainConfig(lr=args.lr, epochs=args.epochs, offline_epochs=args.offline_epochs, batch_size=args.batch_size,
                         seed=args.seed, gamma=args.gamma, boundary_mode=args.boundary_mode, sigma=args.sigma, n_average=args.n_average)
    model, history = train_rn(train, dims, len(corpus.vocab), config, scout=scout, n_decoder_layers=args.decoder_layers)
    out = Path(args.out or Path(args.data) / "rn")
    io.save_model(out, model)
    _write_history(out.with_name(out.name + ".history.jsonl"), history)
    print(f"final loss={history[-1]['loss']:.4f}" if history else "no epochs run")
    print(f"saved recognizer to {out}.json")
    return EXIT_OK


def _decode_config(args) -> DecodeConfig:
    return DecodeConfig(beam=args.beam, sigma=args.sigma, sigma0=args.sigma0, ctc_weight=args.ctc_weight,
                        lm_weight=args.lm_weight, length_bonus=args.length_bonus, max_segment=args.max_segment or None)


def _echo_config(config: DecodeConfig, mode: str) -> None:
    print(f"config: mode={mode} K={config.beam} sigma={config.sigma} sigma0={config.sigma0} "
          f"lambda={config.ctc_weight} alpha={config.lm_weight} beta={config.length_bonus} max_segment={config.max_segment}")


def _language_model(kind: str, corpus):
    if kind == "uniform":
        return UniformLM()
    return BigramLM(len(corpus.vocab)).fit([u.tokens for u in corpus.train])


def _models(args, need_scout: bool):
    data = Path(args.data)
    rn = _load(args.rn or data / "rn", RecognizerModel)
    scout = _load(args.scout or data / "scout", ScoutModel) if need_scout else None
    return rn, scout


def cmd_decode(args) -> int:
    config = _decode_config(args)
    _echo_config(config, args.mode)
    corpus = load_corpus(args.data)
    utts = _split(corpus, args.split)
    rn, scout = _models(args, args.mode == "streaming")
    decodes, report = evaluate(utts, rn, config, _language_model(args.lm, corpus), args.mode, scout)
    report = {"mode": args.mode, "split": args.split, "config": config.to_dict(), **report}
    out = Path(args.out or Path(args.data) / f"decode-{args.mode}")
    _write_text(out / "transcripts.txt", "\n".join(f"{d.uid}\t{' '.join(corpus.words(d.hypothesis))}" for d in decodes))
    _write_text(out / "segmentations.jsonl", "\n".join(json.dumps(d.to_dict(), sort_keys=True) for d in decodes))
    _write_text(out / "report.json", dumps(report))
    if args.timing_log:
        _write_text(Path(args.timing_log), "\n".join(json.dumps({"id": d.uid, "seconds": d.seconds}) for d in decodes))
    row = {k: report[k] for k in ("wer", "token_accuracy", "word_latency_ms", "frame_latency_ms")}
    print(format_table([row], list(row)))
    print(f"wrote {out}/report.json")
    return EXIT_OK


def cmd_scout_probs(args) -> int:
    corpus = load_corpus(args.data)
    scout = _load(args.scout or Path(args.data) / "scout", ScoutModel)
    utts = _split(corpus, args.split)
    probs = {u.uid: scout_forward(u.features, scout) for u in utts}
    out = Path(args.out or Path(args.data) / f"scout-probs-{args.split}")
    io.write_tensors(out, probs, dtype="f64", meta={"kind": "scout-probs", "split": args.split})
    fired = sum(int(raw_boundaries(p, args.sigma).size) for p in probs.values())
    print(f"{len(probs)} utterances, {fired} frames with p >= {args.sigma}")
    print(f"wrote {io.container_paths(out)[0]}")
    return EXIT_OK


def _pairs_from_file(path) -> list[dict]:
    data = _read_json(path)
    items = data if isinstance(data, list) else [data]
    for item in items:
        if not isinstance(item, dict) or "reference" not in item or "predicted" not in item:
            raise io.FormatError(f"{path}: expected objects with 'reference' and 'predicted' lists")
    return items


def _fmt_trace(trace) -> str:
    return " ".join("--" if v is None else str(v) for v in trace)


def cmd_eval_boundaries(args) -> int:
    if args.file:
        evals = []
        for item in _pairs_from_file(args.file):
            ev = boundary_edit_distance(item["predicted"], item["reference"])
            lat = word_latency(item["predicted"], item["reference"], ev, item.get("n_frames"))
            evals.append({**ev.to_dict(), "word_latency": lat.to_dict()})
            print(f"sub={ev.sub} del={ev.dels} ins={ev.ins}")
            print(f"word latency (ms): {_fmt_trace(lat.trace)}  mean={lat.mean_ms:.1f}")
        report = evals[0] if len(evals) == 1 else evals
    else:
        corpus = load_corpus(args.data)
        scout = _load(args.scout or Path(args.data) / "scout", ScoutModel)
        evals = [boundary_edit_distance(raw_boundaries(scout_forward(u.features, scout), args.sigma), u.reference_boundaries()) for u in _split(corpus, args.split)]
        report = merge_boundary_evals(evals)
        print(f"sub={report['sub']} del={report['del']} ins={report['ins']}")
        print(format_table([report], ["sub_rate", "del_rate", "ins_rate", "precision", "recall", "f1"]))
    if args.json:
        _write_text(Path(args.json), dumps(report))
    return EXIT_OK


def cmd_eval_latency(args) -> int:
    data = _read_json(args.file)
    report = {}
    if "segmentation" in data:
        fl = frame_latency(data["segmentation"])
        report["frame"] = fl.to_dict()
        report["segments"] = segment_length_stats(data["segmentation"])
        print(f"frame latency (ms): {' '.join(map(str, fl.values_ms))}  mean={fl.mean_ms:.1f}")
    if "reference" in data and "predicted" in data:
        wl = word_latency(data["predicted"], data["reference"], final_boundary=data.get("n_frames"))
        report["word"] = wl.to_dict()
        print(f"word latency (ms): {_fmt_trace(wl.trace)}  mean={wl.mean_ms:.1f}")
    if not report:
        raise io.FormatError(f"{args.file}: needs 'segmentation' or 'reference'+'predicted'")
    if args.json:
        _write_text(Path(args.json), dumps(report))
    return EXIT_OK


def _read_transcripts(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        uid, sep, text = line.partition("\t")
        if not sep:
            uid, text = f"line{n}", line
        out[uid] = text.split()
    return out


def cmd_eval_wer(args) -> int:
    hyp = _read_transcripts(args.hyp)
    if args.ref:
        ref = _read_transcripts(args.ref)
    else:
        corpus = load_corpus(args.data)
        ref = {u.uid: corpus.words(u.tokens) for u in corpus.utterances if u.uid in hyp}
    missing = sorted(set(ref) ^ set(hyp))
    if missing:
        raise io.FormatError(f"hypothesis and reference ids differ, e.g. {missing[0]!r}")
    ids = sorted(ref)
    er = corpus_error_rate([hyp[i] for i in ids], [ref[i] for i in ids])
    print(f"WER={100 * er.wer:.2f}% sub={er.sub} del={er.dels} ins={er.ins} n_ref={er.n_ref}")
    if args.json:
        _write_text(Path(args.json), dumps(er.to_dict()))
    return EXIT_OK


def cmd_sweep_sigma(args) -> int:
    config = _decode_config(args)
    _echo_config(config, "streaming")
    corpus = load_corpus(args.data)
    rn, scout = _models(args, True)
    sigmas = [float(s) for s in args.sigmas.split(",")]
    rows = sweep_sigma(_split(corpus, args.split), rn, scout, config, sigmas, _language_model(args.lm, corpus))
    table = format_table(rows, ["sigma", "wer", "word_latency_ms", "frame_latency_ms", "mean_segment_ms"])
    print(table)
    out = Path(args.out or Path(args.data) / "sweep-sigma")
    _write_text(out / "sweep.json", dumps(rows))
    _write_text(out / "sweep.txt", table)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_model_dims(p, layers: int):
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--layers", type=int, default=layers)


def _add_decode_flags(p):
    d = DecodeConfig()
    p.add_argument("-K", "--beam", type=int, default=d.beam, help="beam width")
    p.add_argument("--sigma", type=float, default=d.sigma, help="scout threshold")
    p.add_argument("--sigma0", type=float, default=d.sigma0, help="CTC pruning threshold")
    p.add_argument("--ctc-weight", "--lambda", dest="ctc_weight", type=float, default=d.ctc_weight)
    p.add_argument("--lm-weight", "--alpha", dest="lm_weight", type=float, default=d.lm_weight)
    p.add_argument("--length-bonus", "--beta", dest="length_bonus", type=float, default=d.length_bonus)
    p.add_argument("--max-segment", type=int, default=d.max_segment, help="force a boundary after this many frames (0 disables)")
    p.add_argument("--lm", choices=("bigram", "uniform"), default="bigram")
    p.add_argument("--rn", help="recognizer checkpoint (default DATA/rn)")
    p.add_argument("--scout", help="scout checkpoint (default DATA/scout)")
    p.add_argument("--split", default="test")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scoutasr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", type=Path, default=default_data_dir(), help=f"data directory (default ${DATA_ENV} or ./data)")
        p.set_defaults(func=fn)
        return p

    p = command("gen-data", cmd_gen_data, "generate the synthetic corpus")
    spec = SyntheticCorpusSpec()
    p.add_argument("--seed", type=int, default=spec.seed)
    p.add_argument("--n-train", type=int, default=spec.n_train)
    p.add_argument("--n-test", type=int, default=spec.n_test)
    p.add_argument("--vocab-size", type=int, default=spec.vocab_size)
    p.add_argument("--n-features", type=int, default=spec.n_features)
    p.add_argument("--noise-std", type=float, default=spec.noise_std)

    p = command("train-scout", cmd_train_scout, "train the boundary scout")
    _add_model_dims(p, layers=2)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--n-average", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.5, help="threshold for the held-out F1")
    p.add_argument("--out", help="checkpoint stem (default DATA/scout)")

    p = command("train-rn", cmd_train_rn, "train the recognition network")
    _add_model_dims(p, layers=4)
    p.add_argument("--decoder-layers", type=int, default=2)
    p.add_argument("--offline-epochs", type=int, default=30)
    p.add_argument("--epochs", type=int, default=20, help="streaming fine-tuning epochs")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--n-average", type=int, default=5)
    p.add_argument("--gamma", type=float, default=0.7, help="attention weight in the joint loss")
    p.add_argument("--boundary-mode", choices=("golden", "sampled", "thresholded"), default="golden")
    p.add_argument("--sigma", type=float, default=0.5, help="threshold for --boundary-mode thresholded")
    p.add_argument("--scout", help="scout checkpoint for sampled/thresholded boundaries")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="checkpoint stem (default DATA/rn)")

    p = command("decode", cmd_decode, "decode a split and write transcripts and a report")
    p.add_argument("--mode", choices=MODES, default="streaming")
    _add_decode_flags(p)
    p.add_argument("--out", help="output directory (default DATA/decode-MODE)")
    p.add_argument("--timing-log", help="per-utterance wall-clock log (informational)")

    p = command("scout-probs", cmd_scout_probs, "dump scout boundary probabilities")
    p.add_argument("--scout")
    p.add_argument("--split", default="test")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--out", help="tensor container stem")

    p = command("eval-boundaries", cmd_eval_boundaries, "boundary edit distance and word latency")
    p.add_argument("file", nargs="?", help="JSON with 'reference' and 'predicted' (omit to score the scout on DATA)")
    p.add_argument("--scout")
    p.add_argument("--split", default="test")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--json", help="also write the report here")

    p = command("eval-latency", cmd_eval_latency, "frame and word latency from a JSON file")
    p.add_argument("file")
    p.add_argument("--json")

    p = command("eval-wer", cmd_eval_wer, "word error rate of a transcript file")
    p.add_argument("hyp", help="lines of 'id<TAB>words'")
    p.add_argument("--ref", help="reference transcripts (default: the corpus in DATA)")
    p.add_argument("--json")

    p = command("sweep-sigma", cmd_sweep_sigma, "streaming decode at several scout thresholds")
    _add_decode_flags(p)
    p.add_argument("--sigmas", default="0.5,0.7,0.9")
    p.add_argument("--out", help="output directory (default DATA/sweep-sigma)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"scoutasr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"scoutasr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
