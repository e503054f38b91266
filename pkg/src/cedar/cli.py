"""Command-line entry point: ``cedar <subcommand> [--config run.yaml] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from cedar.corpus import read_corpus
from cedar.evaluation import evaluate, gold_from_sentences
from cedar.fixture import FixtureSpec
from cedar.io import dumps_json, write_json, write_jsonl
from cedar.pipeline import (STAGES, DependencyError, PipelineConfig, PipelineError, Predictor, load_ranker,
                            load_trigger, read_manifest, read_predictions, run_all, run_stage, with_overrides,
                            write_fixture)
from cedar.ranker import rank_types_batch
from cedar.trigger import predict_triggers

logger = logging.getLogger("cedar")


def _ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"--ks expects comma-separated integers, got {text!r}") from e
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("--ks needs positive integers")
    return ks


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable), e.g. --set ranker.topk=20")
    p.add_argument("--work-dir", type=Path, help="shortcut for --set paths.work_dir=...")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cedar", description="Large-ontology event detection pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _common(p)
        if stage == "self-label":
            p.add_argument("--threshold", type=float, help="confidence margin threshold")
            p.add_argument("--rounds", type=int)
        if stage == "evaluate":
            p.add_argument("--gold", type=Path, help="gold corpus (JSON lines); with --pred, skips the run dir")
            p.add_argument("--pred", type=Path, help="predictions (JSON lines)")
            p.add_argument("--ks", type=_ks, help="comma-separated K values, e.g. 1,2,5,10,20,50")
            p.add_argument("--out", type=Path, help="write the report here instead of stdout")
        if stage == "error-analysis":
            p.add_argument("--prioritize-hierarchy", action="store_true",
                           help="hierarchy categories win over extended_roleset")

    p = sub.add_parser("run-all", help="run every stage in order")
    _common(p)

    p = sub.add_parser("predict-ti", help="decode triggers for a corpus file")
    _common(p)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--max-span-len", type=int)

    p = sub.add_parser("rank", help="top-K event types per sentence")
    _common(p)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--topk", type=int)

    p = sub.add_parser("classify", help="classify given trigger spans against the ranker's top-K")
    _common(p)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("generate-fixture", help="write a synthetic planted-signal ontology and corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-types", type=int)
    p.add_argument("--sentences-per-type", type=int)
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--spec", type=Path, help="JSON/YAML file of fixture parameters")
    return parser


def _config(args) -> PipelineConfig:
    overrides = list(args.overrides)
    if args.work_dir is not None:
        overrides.append(("paths.work_dir", str(args.work_dir.resolve())))
    return PipelineConfig.load(args.config, overrides)


def _require(cfg: PipelineConfig, command: str, stages) -> None:
    for dep in stages:
        if read_manifest(cfg.work_dir, dep) is None:
            raise DependencyError(command, dep)


def _cmd_evaluate(args) -> dict:
    if args.gold is not None or args.pred is not None:
        if args.gold is None or args.pred is None:
            raise PipelineError("--gold and --pred go together", "evaluate")
        report = evaluate(read_predictions(args.pred), gold_from_sentences(read_corpus(args.gold)),
                          args.ks or [1, 2, 5, 10, 20, 50]).to_dict()
        if args.out:
            write_json(args.out, report)
        else:
            sys.stdout.write(dumps_json(report))
        return {"stage": "evaluate", "outputs": [str(args.out)] if args.out else []}
    cfg = with_overrides(_config(args), evaluate__ks=args.ks)
    result = run_stage(cfg, "evaluate").to_dict()
    if args.out:
        write_json(args.out, json.loads((cfg.work_dir / "evaluate" / "report.json").read_text()))
    return result


def _cmd_predict_ti(args) -> dict:
    cfg = with_overrides(_config(args), trigger__threshold=args.threshold, trigger__max_span_len=args.max_span_len)
    _require(cfg, "predict-ti", ("train-ti",))
    model = load_trigger(cfg)
    model.max_span_len = int(cfg["trigger.max_span_len"])
    sentences = read_corpus(args.input)
    decoded = predict_triggers(model, [list(s.tokens) for s in sentences], float(cfg["trigger.threshold"]),
                               cfg.train_config("trigger").max_length)
    write_jsonl(args.out, [{"sent_id": s.sent_id,
                            "spans": [{"start": d.start, "end": d.end, "prob": d.probability} for d in spans]}
                           for s, spans in zip(sentences, decoded)])
    return {"command": "predict-ti", "sentences": len(sentences)}


def _cmd_rank(args) -> dict:
    cfg = with_overrides(_config(args), ranker__topk=args.topk)
    _require(cfg, "rank", ("build-index",))
    model, index = load_ranker(cfg)
    sentences = read_corpus(args.input)
    ranked = rank_types_batch(model, index, [s.tokens for s in sentences], int(cfg["ranker.topk"]),
                              cfg.train_config("ranker").max_length)
    write_jsonl(args.out, [{"sent_id": s.sent_id, "topk": [{"type_id": t, "score": v} for t, v in r]}
                           for s, r in zip(sentences, ranked)])
    return {"command": "rank", "sentences": len(sentences)}


def _cmd_classify(args) -> dict:
    cfg = _config(args)
    _require(cfg, "classify", ("build-index", "train-cls-final"))
    predictor = Predictor.from_run(cfg, with_trigger=False)
    sentences = [s for s in read_corpus(args.input) if s.mentions]
    rankings = predictor.rank([s.tokens for s in sentences], predictor.topk)
    items, owners = [], []
    for s, r in zip(sentences, rankings):
        for m in s.mentions:
            items.append((s.tokens, m.span, r))
            owners.append((s.sent_id, m))
    out = [{"sent_id": sid, "mention_id": m.mention_id, "start": m.start, "end": m.end,
            "chosen_type": order[0][0], "ranked_types": [{"type_id": t, "p_yes": p} for t, p in order]}
           for (sid, m), order in zip(owners, predictor.classify(items))]
    write_jsonl(args.out, out)
    return {"command": "classify", "mentions": len(out)}


def _cmd_fixture(args) -> dict:
    import yaml

    spec = FixtureSpec()
    if args.spec is not None:
        with open(args.spec, encoding="utf-8") as f:
            spec = FixtureSpec.from_dict(yaml.safe_load(f) or {})
    for key in ("n_types", "sentences_per_type", "noise_rate"):
        value = getattr(args, key)
        if value is not None:
            setattr(spec, key, value)
    paths = write_fixture(args.out, spec, args.seed)
    return {"command": "generate-fixture", "outputs": {k: str(v) for k, v in sorted(paths.items())}}


def dispatch(args) -> dict:
    if args.command == "generate-fixture":
        return _cmd_fixture(args)
    if args.command == "evaluate":
        return _cmd_evaluate(args)
    if args.command == "predict-ti":
        return _cmd_predict_ti(args)
    if args.command == "rank":
        return _cmd_rank(args)
    if args.command == "classify":
        return _cmd_classify(args)
    cfg = _config(args)
    if args.command == "run-all":
        return {"stages": [r.to_dict() for r in run_all(cfg)]}
    if args.command == "self-label":
        cfg = with_overrides(cfg, self_label__confidence_margin_threshold=args.threshold,
                             self_label__rounds=args.rounds)
    if args.command == "error-analysis" and args.prioritize_hierarchy:
        cfg = with_overrides(cfg, evaluate__prioritize_hierarchy=True)
    return run_stage(cfg, args.command).to_dict()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = dispatch(args)
    except PipelineError as e:
        sys.stderr.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
        return 2
    except (OSError, ValueError, KeyError) as e:
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}, sort_keys=True) + "\n")
        return 1
    if args.command != "evaluate" or args.out or args.gold is None:
        sys.stdout.write(dumps_json(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
