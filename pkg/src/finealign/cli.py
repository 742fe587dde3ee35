"""Command-line entry point: ``finealign <subcommand> ...``.

Every subcommand prints JSON to stdout and exits 0 on success; package
errors print a JSON object to stderr and exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .encoder import EncoderConfig, load_checkpoint, text_forward
from .errors import FineAlignError, ParseError
from .evaluation import bbox_classification_top1, corpus_retrieval, fgovd_accuracy
from .gradcheck import run_suite
from .model import embed_corpus
from .numerics import l2_normalize_rows
from .region import Box, ovd_fuse
from .report import render_report
from .synthdata import AttributeVocab, CorpusConfig, generate_corpus, load_corpus, save_corpus
from .trainer import TrainConfig, run_stage

GRAD_TOL = 1e-4


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


def _ckpt_dir(path: str) -> Path:
    p = Path(path)
    if not (p / "manifest.json").exists() and (p / "checkpoint" / "manifest.json").exists():
        return p / "checkpoint"
    return p


def _load_model(path: str):
    params, meta = load_checkpoint(_ckpt_dir(path))
    return params, EncoderConfig.from_dict(meta["encoder"])


def cmd_generate(args) -> None:
    cfg = CorpusConfig(samples=args.samples, seed=args.seed, regions_per_image=args.regions)
    corpus = generate_corpus(cfg)
    save_corpus(corpus, args.out)
    _emit({"samples": len(corpus), "out": args.out, "vocab_size": cfg.vocab.size})


def load_train_config(path: str | None, stage: int, workers: int | None) -> tuple[TrainConfig, dict]:
    """Config file: ``{"train": {...}, "stage1": {...}, "stage2": {...}, "model": {...}}``.

    Without a file the desk-scale preset is used.
    """
    if path is None:
        cfg = TrainConfig.desk(stage)
        model = {}
    else:
        raw = json.loads(Path(path).read_text())
        fields = dict(raw.get("train", {}))
        fields.update(raw.get(f"stage{stage}", {}))
        fields["stage"] = stage
        cfg = TrainConfig.from_dict(fields)
        model = dict(raw.get("model", {}))
    if workers is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "workers": workers})
    return cfg, model


def cmd_train(args) -> None:
    cfg, model = load_train_config(args.config, args.stage, args.workers)
    corpus = load_corpus(args.data, cfg.n_negatives)
    resume = str(_ckpt_dir(args.resume)) if args.resume else None
    res = run_stage(corpus, cfg, args.out, init_checkpoint=resume, encoder_overrides=model)
    last = res.metrics[-1] if res.metrics else {}
    _emit({"stage": cfg.stage, "steps": len(res.metrics), "checkpoint": str(res.checkpoint), "final": last})


def cmd_eval_retrieval(args) -> None:
    params, enc = _load_model(args.ckpt)
    corpus = load_corpus(args.data)
    emb = embed_corpus(params, enc, corpus)
    caption = "long" if args.long else "short"
    _emit({"caption": caption, "samples": len(corpus), **corpus_retrieval(emb, caption).as_dict()})


def _default_classes(vocab: AttributeVocab) -> list[list[int]]:
    slot, size = vocab.slots[-1]
    return [[vocab.token(lang, slot, v)] for lang in range(vocab.languages) for v in range(size)]


def _contains(seq: list[int], sub: list[int]) -> bool:
    return any(seq[i : i + len(sub)] == sub for i in range(len(seq) - len(sub) + 1))


def cmd_eval_bbox(args) -> None:
    params, enc = _load_model(args.ckpt)
    corpus = load_corpus(args.data)
    if args.classes:
        classes = json.loads(Path(args.classes).read_text())["classes"]
    else:
        classes = _default_classes(AttributeVocab())
    emb = embed_corpus(params, enc, corpus)
    phrases = [r.phrase for s in corpus for r in s.regions]
    rows, labels = [], []
    for i, ph in enumerate(phrases):
        match = next((c for c, cls in enumerate(classes) if _contains(ph, list(cls))), None)
        if match is not None:
            rows.append(i)
            labels.append(match)
    if not rows:
        raise FineAlignError("no region phrase matches any class")
    cls_emb, _ = text_forward(params, enc, classes)
    acc = bbox_classification_top1(emb.region[rows], l2_normalize_rows(cls_emb)[0], labels)
    _emit({"top1": acc, "regions": len(rows), "classes": len(classes)})


def cmd_eval_fgovd(args) -> None:
    params, enc = _load_model(args.ckpt)
    corpus = load_corpus(args.data)
    emb = embed_corpus(params, enc, corpus)
    _emit({"top1": fgovd_accuracy(emb), "regions": int(emb.region.shape[0])})


def cmd_grad_check(args) -> None:
    report = run_suite(seed=args.seed)
    worst = max(report.values())
    _emit({"max_relative_error": report, "worst": worst, "tolerance": GRAD_TOL, "pass": worst < GRAD_TOL})
    if worst >= GRAD_TOL:
        raise SystemExit(1)


def cmd_ovd_fuse(args) -> None:
    out_lines = []
    with open(args.input) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
                box, conf, sims = rec["box"], rec["confidences"], rec["sims"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(lineno, f"bad detection record ({exc})") from None
            fused, cat = ovd_fuse(conf, sims, alpha=args.alpha, scale=args.scale)
            out_lines.append(
                json.dumps({"box": Box.of(box).as_list(), "fused": fused.tolist(), "category": cat, "score": float(fused[cat])})
            )
    Path(args.out).write_text("".join(line + "\n" for line in out_lines))
    _emit({"boxes": len(out_lines), "out": args.out, "alpha": args.alpha, "scale": args.scale})


def cmd_report(args) -> None:
    delim = "\t" if args.tsv else ","
    _emit(render_report(args.metrics, args.out, delim))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="finealign", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic JSON-lines corpus")
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--regions", type=int, default=2, help="regions per image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to start from (required for stage 2)")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-retrieval", help="Recall@{1,5,10} image<->caption")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--long", action="store_true")
    g.add_argument("--short", action="store_true")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-bbox", help="zero-shot region classification")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--classes", help='JSON file {"classes": [[token ids], ...]}')
    p.set_defaults(func=cmd_eval_bbox)

    p = sub.add_parser("eval-fgovd", help="region vs 1 positive + 10 hard negatives, top-1")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval_fgovd)

    p = sub.add_parser("grad-check", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ovd-fuse", help="fuse detector confidences with similarities")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--scale", type=float, default=10.0)
    p.set_defaults(func=cmd_ovd_fuse)

    p = sub.add_parser("report", help="render metrics table and figures")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tsv", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FineAlignError, OSError, ValueError, KeyError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
