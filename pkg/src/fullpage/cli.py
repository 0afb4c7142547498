"""Command-line entry point: ``fullpage <verb> [options]``.

Verbs: gen-corpus, train-detector, train-recognizer, recognize-page, evaluate.
Every option may also come from ``--config FILE`` holding ``key=value`` lines
(``#`` starts a comment); command-line flags override the file. Logs are TSV
on stdout, diagnostics on stderr. Exit codes: 0 ok, 1 runtime/data error,
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .corpus import (CorpusConfig, CorpusError, PageSample, generate_corpus,
                     parse_line_record, read_corpus, read_jsonl, read_pgm, reading_order,
                     write_corpus)
from .detect_net import (MINIATURE, TABLE_I, Detector, DetectorConfig, TrainState,
                         train_detector)
from .match_loss import MatchLossConfig
from .metrics import ZONE_GRID, AcceptanceZone, bow_fmeasure, detection_fmeasure, edit_distance
from .numeric_core import RMSProp, make_rng
from .recog_net import (RecogTrainState, Recognizer, RecognizerConfig, build_recognizer,
                        line_samples, recognize_page, train_recognizer)

log = logging.getLogger("fullpage")

ARCHS = {"miniature": MINIATURE, "table1": TABLE_I}
RECOG_LAYERS = {
    "small": (("conv", 8, (4, 4), (4, 2)), ("lstm", 8), ("conv", 16, (4, 4), (4, 2)), ("lstm", 16)),
    "wide": (("conv", 16, (4, 4), (4, 2)), ("lstm", 16), ("conv", 32, (4, 4), (4, 2)), ("lstm", 32)),
}


class DataError(Exception):
    pass


# -- config files -------------------------------------------------------------

def read_config_file(path):
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _config_path(argv):
    for k, arg in enumerate(argv):
        if arg == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _apply_config(parser, sub, argv):
    """Parse argv; values from --config become defaults of the subcommand."""
    path = _config_path(argv)
    command = next((a for a in argv if a in sub.choices), None)
    if path and command:
        subparser = sub.choices[command]
        try:
            values = read_config_file(path)
        except (OSError, ValueError) as exc:
            subparser.error(str(exc))
        known = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
        unknown = sorted(set(values) - set(known))
        if unknown:
            subparser.error(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, text in values.items():
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = text.lower() in ("1", "true", "yes", "on")
                continue
            try:
                value = action.type(text) if action.type else text
            except (TypeError, ValueError):
                subparser.error(f"bad value for {key}: {text!r}")
            if action.choices and value not in action.choices:
                subparser.error(f"bad value for {key}: {text!r}")
            defaults[key] = value
            action.required = False  # satisfied by the file
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- helpers ------------------------------------------------------------------

def _load_pages(path):
    p = Path(path)
    if p.is_dir():
        return read_corpus(p)
    raise DataError(f"{path}: corpus directory not found")


def _emit(*fields):
    print("\t".join(str(f) for f in fields), flush=True)


def _rng_state(rng):
    return rng.bit_generator.state


def _restore_rng(state):
    rng = make_rng(0)
    rng.bit_generator.state = state
    return rng


def _save_training(model, path, state, extra):
    tensors = {f"{checkpoint.OPT_PREFIX}{k}": v for k, v in state.optimizer.acc.items()}
    meta = {"epoch": state.epoch, "rng": _rng_state(state.rng), "lr": state.optimizer.lr,
            "history": state.history, **extra}
    blob = dict(model.params)
    blob.update(tensors)
    kind = "detector" if isinstance(model, Detector) else "recognizer"
    meta.update({"kind": kind, "config": model.config.to_json()})
    checkpoint.save_model(path, blob, meta)


def _load_training(path, cls, state_cls):
    params, meta = checkpoint.load_model(path)
    cfg_cls = DetectorConfig if cls is Detector else RecognizerConfig
    model = cls(cfg_cls(**meta["config"]))
    opt = RMSProp(lr=meta.get("lr", 1e-3))
    for name, arr in params.items():
        if name.startswith(checkpoint.OPT_PREFIX):
            opt.acc[name[len(checkpoint.OPT_PREFIX):]] = arr.copy()
        elif name in model.params and model.params[name].shape == arr.shape:
            model.params[name][...] = arr
        else:
            raise checkpoint.CheckpointError(f"{path}: unexpected tensor {name}")
    rng = _restore_rng(meta["rng"]) if "rng" in meta else make_rng(0)
    state = state_cls(opt, rng, meta.get("epoch", 0), [tuple(h) for h in meta.get("history", [])])
    return model, state, meta


def load_detector(path):
    return _load_training(path, Detector, TrainState)[0]


def load_recognizer(path):
    return _load_training(path, Recognizer, RecogTrainState)[0]


# -- commands -------------------------------------------------------------------

def cmd_gen_corpus(args):
    cfg = CorpusConfig(p_two_columns=args.p_two_columns, noise=args.noise)
    pages = generate_corpus(cfg, args.pages, args.seed, start=args.start)
    write_corpus(args.out, pages)
    _emit("pages", len(pages))
    return 0


def cmd_train_detector(args):
    pages = _load_pages(args.corpus)
    val = _load_pages(args.val_corpus) if args.val_corpus else pages[:20]
    match_cfg = MatchLossConfig(args.alpha_match, args.alpha_grad)
    if args.resume:
        model, state, _ = _load_training(args.resume, Detector, TrainState)
    else:
        cfg = DetectorConfig(layers=ARCHS[args.arch], K=args.K, A=args.anchors,
                             threshold=args.threshold, dropout=args.dropout)
        model = Detector(cfg, rng=make_rng(args.seed))
        state = TrainState(RMSProp(lr=args.lr), make_rng(args.seed + 1))
    _emit("#", f"alpha_match={args.alpha_match:g}", f"alpha_grad={args.alpha_grad:g}",
          f"lr={state.optimizer.lr}", f"arch={args.arch}", f"K={model.config.K}",
          f"A={model.config.A}", f"dropout={model.config.dropout}", f"seed={args.seed}")
    _emit("epoch", "loss", "F@0.03")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def on_epoch(st):
        ep, loss, metric = st.history[-1]
        _emit(ep, f"{loss:.6f}", f"{metric:.6f}")
        if args.checkpoint_every and st.epoch % args.checkpoint_every == 0:
            _save_training(model, out, st, {})

    train_detector(model, pages, args.epochs, batch_size=args.batch_size, match_cfg=match_cfg,
                   val_pages=val, state=state, on_epoch=on_epoch)
    _save_training(model, out, state, {})
    _emit("checkpoint", out)
    return 0


def cmd_train_recognizer(args):
    pages = _load_pages(args.corpus)
    val_pages = _load_pages(args.val_corpus) if args.val_corpus else pages[:10]
    if args.resume:
        model, state, _ = _load_training(args.resume, Recognizer, RecogTrainState)
    else:
        cfg = RecognizerConfig(height=args.height, layers=RECOG_LAYERS[args.arch],
                               eol=not args.no_eol, dropout=args.dropout)
        model = build_recognizer(cfg, rng=make_rng(args.seed))
        state = RecogTrainState(RMSProp(lr=args.lr), make_rng(args.seed + 1))
    def samples(rng):
        # fresh crop jitter every epoch, drawn from the training rng so resume stays exact
        return line_samples(pages, args.crop_mode, args.margin, model.config.height,
                            args.jitter, rng)

    if not args.jitter or args.crop_mode == "reference":
        samples = samples(None)
    val = line_samples(val_pages, args.crop_mode, args.margin, model.config.height)
    n_lines = sum(len(p.lines) for p in pages)
    _emit("#", f"crop_mode={args.crop_mode}", f"lines={n_lines}", f"lr={state.optimizer.lr}",
          f"eol={model.config.eol}", f"arch={args.arch}", f"seed={args.seed}")
    _emit("epoch", "loss", "WER")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def on_epoch(st):
        ep, loss, metric = st.history[-1]
        _emit(ep, f"{loss:.6f}", f"{metric:.6f}")
        if args.checkpoint_every and st.epoch % args.checkpoint_every == 0:
            _save_training(model, out, st, {"crop_mode": args.crop_mode})

    train_recognizer(model, samples, args.epochs, batch_size=args.batch_size,
                     val_samples=val, state=state, on_epoch=on_epoch,
                     decay_epoch=args.decay_epoch, decay=args.decay)
    _save_training(model, out, state, {"crop_mode": args.crop_mode})
    _emit("checkpoint", out)
    return 0


def hypothesis_record(page_id, width, height, records):
    lines = []
    for r in records:
        x, y, h = r["cand"].coords[0], r["cand"].coords[1], r["cand"].coords[-1]
        lines.append({"x_left": int(round(x * width)), "y_bottom": int(round(y * width)),
                      "height": max(1, int(round(h * width))), "text": r["text"],
                      "conf": round(float(r["cand"].confidence), 6)})
    return {"id": page_id, "width": width, "height": height, "lines": lines}


def cmd_recognize_page(args):
    for path in (args.detector, args.recognizer):
        if not Path(path).exists():
            raise DataError(f"{path}: checkpoint not found")
    detector = load_detector(args.detector)
    recognizer = load_recognizer(args.recognizer)
    if args.image:
        image = read_pgm(args.image)
        pages = [PageSample(Path(args.image).stem, image, [])]
    else:
        pages = _load_pages(args.corpus)
    out = open(args.out, "w", encoding="utf-8") if args.out else None
    try:
        for page in pages:
            records = recognize_page(detector, recognizer, page.image, args.threshold, args.margin)
            for r in records:
                b = r["box"]
                _emit("line", page.id, b.x_left, b.y_top, b.x_right, b.y_bottom,
                      f"{r['cand'].confidence:.4f}", r["text"])
            _emit("page", page.id, " / ".join(r["text"] for r in records))
            if out:
                rec = hypothesis_record(page.id, page.width, page.height, records)
                out.write(json.dumps(rec) + "\n")
    finally:
        if out:
            out.close()
    return 0


def _read_pages_jsonl(path, check_bounds=True):
    pages = {}
    for rec, where in read_jsonl(path):
        lines = [parse_line_record(ln, where, check_bounds) for ln in rec["lines"]]
        pages[rec["id"]] = (rec["width"], rec["height"], lines)
    return pages


def page_text(lines):
    return " ".join(ln.text for ln in reading_order(lines))


def evaluate_pages(hyp, ref, zones=ZONE_GRID):
    """Metrics over pages present in ``ref``; missing hypotheses count as empty."""
    det = {z: [0, 0, 0] for z in zones}
    edits = words = 0
    bows = []
    for pid, (W, H, ref_lines) in ref.items():
        hyp_lines = hyp.get(pid, (W, H, []))[2]
        t = lambda ln: (ln.x_left / W, ln.y_bottom / W, ln.height / W)
        hyps = np.array([t(ln) for ln in hyp_lines]).reshape(-1, 3)
        refs = np.array([t(ln) for ln in ref_lines]).reshape(-1, 3)
        for z in zones:
            _, r, _ = detection_fmeasure(hyps, refs, AcceptanceZone(z, 3))
            det[z][0] += r * len(refs)
            det[z][1] += len(hyps)
            det[z][2] += len(refs)
        h_text, r_text = page_text(hyp_lines), page_text(ref_lines)
        edits += edit_distance(h_text.split(), r_text.split())
        words += len(r_text.split())
        bows.append(bow_fmeasure(h_text, r_text)[2])
    out = {}
    for z, (correct, nh, nr) in det.items():
        p = correct / nh if nh else 0.0
        r = correct / nr if nr else 0.0
        out[f"F@{z}"] = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    out["WER"] = edits / words if words else 0.0
    out["BOW"] = float(np.mean(bows)) if bows else 0.0
    return out


def cmd_evaluate(args):
    ref_path = Path(args.ref)
    if ref_path.is_dir():
        ref_path = ref_path / "gt.jsonl"
    for p in (args.hyp, ref_path):
        if not Path(p).exists():
            raise DataError(f"{p}: file not found")
    results = evaluate_pages(_read_pages_jsonl(args.hyp, check_bounds=False), _read_pages_jsonl(ref_path))
    for name, value in results.items():
        _emit("metric", name, f"{value:.6f}")
    if args.summary:
        Path(args.summary).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="fullpage", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    D = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen-corpus", help="write a synthetic corpus", formatter_class=D)
    g.add_argument("--config", help="key=value config file")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--pages", type=int, default=100, help="number of pages")
    g.add_argument("--seed", type=int, default=0, help="corpus seed")
    g.add_argument("--start", type=int, default=0, help="index of the first page id")
    g.add_argument("--p-two-columns", type=float, default=0.5, help="probability of two columns")
    g.add_argument("--noise", type=float, default=0.05, help="Gaussian pixel noise sigma")
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train-detector", help="train the line-start detector", formatter_class=D)
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--corpus", required=True, help="training corpus directory")
    t.add_argument("--val-corpus", help="validation corpus (default: first 20 training pages)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--arch", choices=sorted(ARCHS), default="miniature", help="layer stack")
    t.add_argument("--K", type=int, choices=(2, 3, 4), default=3, help="coordinates per object")
    t.add_argument("--anchors", type=int, default=4, help="candidates per output cell")
    t.add_argument("--threshold", type=float, default=0.5, help="confidence threshold")
    t.add_argument("--dropout", type=float, default=0.0, help="dropout after each conv layer")
    t.add_argument("--epochs", type=int, default=15)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3, help="RMSProp learning rate")
    t.add_argument("--alpha-match", type=float, default=1000.0, help="localization weight for matching")
    t.add_argument("--alpha-grad", type=float, default=100.0, help="localization weight for gradients")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint-every", type=int, default=1, help="epochs between checkpoints (0: end only)")
    t.set_defaults(func=cmd_train_detector)

    r = sub.add_parser("train-recognizer", help="train the CTC line recognizer", formatter_class=D)
    r.add_argument("--config", help="key=value config file")
    r.add_argument("--corpus", required=True, help="training corpus directory")
    r.add_argument("--val-corpus", help="validation corpus (default: first 10 training pages)")
    r.add_argument("--out", required=True, help="checkpoint path")
    r.add_argument("--resume", help="continue from this checkpoint")
    r.add_argument("--crop-mode", choices=("reference", "left-extended"), default="left-extended")
    r.add_argument("--arch", choices=sorted(RECOG_LAYERS), default="small", help="layer stack")
    r.add_argument("--height", type=int, default=32, help="normalized line height")
    r.add_argument("--margin", type=int, default=10, help="crop margin in pixels")
    r.add_argument("--jitter", type=int, default=3,
                   help="random shift of left-extended training crops, redrawn every epoch, pixels")
    r.add_argument("--no-eol", action="store_true", help="train without the end-of-line label")
    r.add_argument("--dropout", type=float, default=0.0, help="dropout after each conv layer")
    r.add_argument("--epochs", type=int, default=20)
    r.add_argument("--batch-size", type=int, default=4)
    r.add_argument("--lr", type=float, default=5e-3, help="RMSProp learning rate")
    r.add_argument("--decay-epoch", type=int, default=None,
                   help="multiply the learning rate by --decay after this epoch")
    r.add_argument("--decay", type=float, default=0.2, help="learning-rate decay factor")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--checkpoint-every", type=int, default=1, help="epochs between checkpoints (0: end only)")
    r.set_defaults(func=cmd_train_recognizer)

    p = sub.add_parser("recognize-page", help="full-page recognition", formatter_class=D)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--detector", required=True, help="detector checkpoint")
    p.add_argument("--recognizer", required=True, help="recognizer checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="single PGM page")
    src.add_argument("--corpus", help="corpus directory (pages/*.pgm + gt.jsonl)")
    p.add_argument("--threshold", type=float, default=None, help="confidence threshold (default: detector's)")
    p.add_argument("--margin", type=int, default=10, help="box margin in pixels")
    p.add_argument("--out", help="write hypothesis records (jsonl) here")
    p.set_defaults(func=cmd_recognize_page)

    e = sub.add_parser("evaluate", help="detection F, WER and BOW", formatter_class=D)
    e.add_argument("--config", help="key=value config file")
    e.add_argument("--hyp", required=True, help="hypothesis jsonl")
    e.add_argument("--ref", required=True, help="reference gt.jsonl or corpus directory")
    e.add_argument("--summary", help="write a JSON summary here")
    e.set_defaults(func=cmd_evaluate)
    return parser, sub


def main(argv=None):
    parser, sub = build_parser()
    args = _apply_config(parser, sub, sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BrokenPipeError:
        sys.stdout = open(os.devnull, "w")
        return 0
    except (DataError, CorpusError, checkpoint.CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
