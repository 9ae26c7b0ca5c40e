"""Command-line entry point.

Every command writes into a run directory (``$LAPDOG_RUN_DIR/<name>`` or
``runs/<name>``): a config snapshot, JSON reports, JSON-lines step logs, PNG
figures and, last of all, ``manifest.json``.  The manifest is written
atomically, so its presence means the run completed.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import plots
from .corpus import (Corpus, DataError, RuleCorrector, RuleTagger, build_samples, first_personify_counted,
                     load_rules, load_stories, story_from_record, write_stories)
from .generator import assemble_fid, generate_batch, load_checkpoint, save_checkpoint
from .retriever import IndexMismatchError, build_index, lexical_init, load_index, save_index
from .synthetic import make_task
from .textmetrics import corpus_eval
from .trainer import (TrainConfig, count_unique_retrievals, evaluate, new_generator, new_retriever,
                      no_retrieval_input, retrieve_for, task_vocab, train_stage1, train_stage2)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MISMATCH = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# run bookkeeping

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fingerprint(path: str | Path) -> dict[str, str]:
    p = Path(path)
    if p.is_dir():
        return {str(q): sha256_file(q) for q in sorted(p.iterdir()) if q.is_file()}
    return {str(p): sha256_file(p)}


def write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def add_input(self, path) -> None:
        if path is not None:
            self.inputs.update(_fingerprint(path))

    def add_output(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)

    def write(self, run_dir: Path) -> Path:
        self.finished = time.time()
        out = run_dir / "manifest.json"
        write_json_atomic(out, dataclasses.asdict(self))
        return out


def run_dir(name: str) -> Path:
    root = Path(os.environ.get("LAPDOG_RUN_DIR", "runs"))
    d = root / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def load_config(args) -> TrainConfig:
    """Config file (if any) with per-field flag overrides applied on top."""
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from None
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            base[f.name] = v
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid config: {e}") from None


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(TrainConfig):
        kind = type(f.default)
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name,
                       type=_bool if kind is bool else kind, default=None, metavar=kind.__name__.upper())


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_corpus(path) -> Corpus:
    try:
        return load_stories(path)
    except OSError as e:
        raise CliError(f"cannot read stories: {e}", EXIT_DATA) from None


def _load_samples(path, cfg: TrainConfig):
    try:
        return build_samples(path, cfg.max_turns)
    except OSError as e:
        raise CliError(f"cannot read dialogues: {e}", EXIT_DATA) from None


def _load_model(path, kind: str):
    if not (Path(path) / "manifest.json").exists():
        raise CliError(f"{path}: not a checkpoint directory")
    model, manifest = load_checkpoint(path)
    if manifest["kind"] != kind:
        raise CliError(f"{path}: expected a {kind} checkpoint, found {manifest['kind']}")
    return model, manifest


# ---------------------------------------------------------------------------
# commands

def cmd_preprocess(args) -> int:
    tagger, corrector = (load_rules(args.rules) if args.rules else (RuleTagger(), RuleCorrector()))
    stories, errors = [], []
    try:
        lines = Path(args.stories).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise CliError(f"cannot read stories: {e}", EXIT_DATA) from None
    # keep going after a bad line so every problem is reported in one pass
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            stories.append(story_from_record(json.loads(line), lineno))
        except json.JSONDecodeError as e:
            errors.append(f"{args.stories}:{lineno}: invalid JSON ({e.msg})")
        except DataError as e:
            errors.append(f"{args.stories}: {e}")
    if errors:
        for e in errors:
            print(e, file=sys.stderr)
        raise CliError(f"{len(errors)} malformed record(s); nothing written", EXIT_DATA)
    out, n_ent = [], 0
    for s in stories:
        s2, n = first_personify_counted(s, tagger, corrector)
        out.append(s2)
        n_ent += n
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_stories(out, args.out)
    d = run_dir(args.name or "preprocess")
    man = RunManifest("preprocess", {"rules": args.rules}, 0)
    man.add_input(args.stories)
    if args.rules:
        man.add_input(args.rules)
    man.add_output(args.out)
    counts = {"stories": len(out), "entities_replaced": n_ent}
    write_json_atomic(man.add_output(d / "report.json"), counts)
    man.write(d)
    _emit(counts)
    return EXIT_OK


def _retriever(args, cfg: TrainConfig, corpus: Corpus, vocab):
    if args.retriever:
        enc, _ = _load_model(args.retriever, "retriever")
        return enc
    enc = new_retriever(vocab, cfg)
    lexical_init(enc, corpus)
    return enc


def cmd_index(args) -> int:
    cfg = load_config(args)
    corpus = _load_corpus(args.stories)
    d = run_dir(args.name or "index")
    man = RunManifest("index", cfg.to_dict(), cfg.seed)
    man.add_input(args.stories)
    if args.retriever:
        enc, _ = _load_model(args.retriever, "retriever")
        man.add_input(Path(args.retriever) / "model.pt")
    else:
        if not args.dialogues:
            raise CliError("index without --retriever needs --dialogues to build the vocabulary")
        samples = _load_samples(args.dialogues, cfg)
        man.add_input(args.dialogues)
        enc = new_retriever(task_vocab(corpus, samples), cfg)
        lexical_init(enc, corpus)
        save_checkpoint(enc, man.add_output(d / "retriever"), "retriever", stage=0, step=0)
    index = build_index(enc, corpus)
    out = Path(args.out) if args.out else d / "index.bin"
    save_index(index, man.add_output(out))
    man.add_output(str(out) + ".json")
    info = {"stories": len(index), "dim": index.dim, "version": index.version,
            "fingerprint": index.fingerprint, "index": str(out)}
    write_json_atomic(man.add_output(d / "report.json"), info)
    man.write(d)
    _emit(info)
    return EXIT_OK


class _JsonlLog:
    def __init__(self, path: Path):
        self.f = open(path, "w", encoding="utf-8")

    def __call__(self, rec: dict) -> None:
        self.f.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        self.f.close()


def cmd_train(args) -> int:
    cfg = load_config(args)
    if args.stage == 2 and not args.resume and not args.scratch:
        raise CliError("stage 2 needs a stage-1 generator checkpoint (--resume) or --scratch")
    corpus = _load_corpus(args.stories)
    samples = _load_samples(args.dialogues, cfg)
    eval_samples = _load_samples(args.eval, cfg) if args.eval else None
    d = run_dir(args.name or f"train-stage{args.stage}")
    man = RunManifest(f"train --stage {args.stage}", cfg.to_dict(), cfg.seed)
    for p in (args.config, args.stories, args.dialogues, args.eval):
        man.add_input(p)
    write_json_atomic(man.add_output(d / "config.json"), cfg.to_dict())
    if args.resume:
        gen, _ = _load_model(args.resume, "generator")
        man.add_input(Path(args.resume) / "model.pt")
    else:
        gen = new_generator(task_vocab(corpus, samples), cfg)
    steps_log = _JsonlLog(man.add_output(d / "steps.jsonl"))
    report: dict = {"stage": args.stage}
    try:
        if args.stage == 1:
            records = []

            def on_step(step, loss):
                records.append({"step": step, "loss": loss})
                steps_log(records[-1])

            ck = train_stage1(gen, samples, cfg, on_step=on_step)
            save_checkpoint(gen, man.add_output(d / "generator"), "generator", 1, ck.step)
            report["steps"] = ck.step
            if records:
                plots.loss_curves(records, man.add_output(d / "loss_curves.png"), keys=("loss",))
            if eval_samples:
                ev = evaluate(gen, eval_samples, cfg, no_retrieval=True)
                report["eval"] = ev.to_dict()
        else:
            if args.retriever:
                man.add_input(Path(args.retriever) / "model.pt")
            enc = _retriever(args, cfg, corpus, gen.vocab)
            records = []

            def on_rep(rep):
                records.append(rep.to_dict())
                steps_log(records[-1])

            res = train_stage2(gen, enc, corpus, samples, cfg, eval_samples=eval_samples, on_step=on_rep)
            save_checkpoint(gen, man.add_output(d / "generator"), "generator", 2, len(res.reports),
                            {"scratch": bool(args.scratch)})
            save_checkpoint(enc, man.add_output(d / "retriever"), "retriever", 2, len(res.reports))
            save_index(res.index, man.add_output(d / "index.bin"))
            man.add_output(d / "index.bin.json")
            report["steps"] = len(res.reports)
            report["scratch"] = bool(args.scratch)
            if records:
                plots.loss_curves(records, man.add_output(d / "loss_curves.png"))
            if res.evals:
                write_json_atomic(man.add_output(d / "evals.json"), res.evals)
            if res.final_eval is not None:
                report["eval"] = res.final_eval.to_dict()
                plots.metric_bars({"stage 2": report["eval"]}, man.add_output(d / "metrics.png"))
    finally:
        steps_log.close()
    write_json_atomic(man.add_output(d / "report.json"), report)
    man.write(d)
    _emit(report)
    return EXIT_OK


def _retrieval_artifacts(args, man: RunManifest):
    for flag in ("stories", "index", "retriever"):
        if not getattr(args, flag):
            raise CliError(f"retrieval needs --{flag} (or pass --no-retrieval)")
    corpus = _load_corpus(args.stories)
    try:
        index = load_index(args.index, corpus)
    except IndexMismatchError as e:
        raise CliError(str(e), EXIT_MISMATCH) from None
    enc, _ = _load_model(args.retriever, "retriever")
    for p in (args.stories, args.index, Path(args.retriever) / "model.pt"):
        man.add_input(p)
    return corpus, index, enc


def cmd_generate(args) -> int:
    cfg = load_config(args)
    gen, _ = _load_model(args.checkpoint, "generator")
    samples = _load_samples(args.dialogues, cfg)
    d = run_dir(args.name or "generate")
    man = RunManifest("generate", cfg.to_dict(), cfg.seed)
    man.add_input(args.dialogues)
    man.add_input(Path(args.checkpoint) / "model.pt")
    if args.no_retrieval:
        inputs = [no_retrieval_input(s, gen.vocab, cfg) for s in samples]
        retrieved = [[] for _ in samples]
    else:
        corpus, index, enc = _retrieval_artifacts(args, man)
        retrieved = [r.ids for r in retrieve_for(enc, index, samples, cfg, draft_model=gen)]
        inputs = [assemble_fid([corpus.lookup(i) for i in ids], s.persona, s.context, gen.vocab,
                               cfg.max_source_len) for s, ids in zip(samples, retrieved)]
    hyps = []
    for i in range(0, len(inputs), 32):
        hyps.extend(generate_batch(gen, inputs[i:i + 32], cfg.generate_max_len))
    out = Path(args.out) if args.out else d / "responses.jsonl"
    with open(man.add_output(out), "w", encoding="utf-8") as f:
        for s, h, ids in zip(samples, hyps, retrieved):
            f.write(json.dumps({"dialogue_id": s.dialogue_id, "turn": s.meta.get("turn"), "response": h,
                                "retrieved": ids}, sort_keys=True) + "\n")
    man.write(d)
    _emit({"responses": len(hyps), "out": str(out)})
    return EXIT_OK


def _read_hyps(path) -> list[str]:
    hyps = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("{"):
                line = json.loads(line)["response"]
            hyps.append(line)
    return hyps


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    samples = _load_samples(args.dialogues, cfg)
    d = run_dir(args.name or "evaluate")
    man = RunManifest("evaluate", cfg.to_dict(), cfg.seed)
    man.add_input(args.dialogues)
    refs = [s.target for s in samples]
    if args.hyp_file:
        hyps = _read_hyps(args.hyp_file)
        man.add_input(args.hyp_file)
        if len(hyps) != len(refs):
            raise CliError(f"{args.hyp_file}: {len(hyps)} hypotheses for {len(refs)} references", EXIT_DATA)
        report = {**corpus_eval(hyps, refs).to_dict(), "unique_retrievals": None, "n": len(hyps)}
    else:
        if not args.checkpoint:
            raise CliError("evaluate needs --checkpoint or --hyp-file")
        gen, _ = _load_model(args.checkpoint, "generator")
        man.add_input(Path(args.checkpoint) / "model.pt")
        if args.no_retrieval:
            ev = evaluate(gen, samples, cfg, no_retrieval=True)
        else:
            corpus, index, enc = _retrieval_artifacts(args, man)
            ev = evaluate(gen, samples, cfg, enc, index, corpus)
        report = ev.to_dict()
    out = Path(args.out) if args.out else d / "report.json"
    write_json_atomic(man.add_output(out), report)
    plots.metric_bars({"evaluation": report}, man.add_output(d / "metrics.png"))
    man.write(d)
    _emit(report)
    return EXIT_OK


def cmd_diversity_report(args) -> int:
    cfg = load_config(args)
    corpus = _load_corpus(args.stories)
    samples = _load_samples(args.dialogues, cfg)
    labels = args.label or [Path(r).parent.name or str(r) for r in args.retriever]
    if len(labels) != len(args.retriever):
        raise CliError("give one --label per --retriever")
    d = run_dir(args.name or "diversity")
    man = RunManifest("diversity-report", cfg.to_dict(), cfg.seed)
    man.add_input(args.stories)
    man.add_input(args.dialogues)
    counts = {}
    for label, path in zip(labels, args.retriever):
        enc, _ = _load_model(path, "retriever")
        man.add_input(Path(path) / "model.pt")
        counts[label] = count_unique_retrievals(enc, build_index(enc, corpus), samples, cfg)
    report = {"unique_retrievals": counts, "queries": len(samples), "K": cfg.K}
    write_json_atomic(man.add_output(d / "report.json"), report)
    plots.unique_retrieval_bars(counts, man.add_output(d / "unique_retrievals.png"))
    man.write(d)
    _emit(report)
    return EXIT_OK


def cmd_synth(args) -> int:
    task = make_task(n_personas=args.personas, n_heldout=args.heldout, n_dialogues=args.dialogues_per_persona,
                     seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_stories(task.corpus, out / "stories.jsonl")
    for name, recs in (("train", task.dialogues_train), ("heldout", task.dialogues_heldout)):
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as f:
            for r in recs:
                f.write(json.dumps(r) + "\n")
    (out / "oracle.json").write_text(json.dumps(task.oracle, indent=1, sort_keys=True), encoding="utf-8")
    info = {"stories": len(task.corpus), "train": len(task.train), "heldout": len(task.heldout), "out": str(out)}
    _emit(info)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lapdog", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="rewrite stories into first person")
    p.add_argument("--stories", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rules", help="JSON rules file with extra names / agreement overrides")
    p.add_argument("--name")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("index", help="embed the story corpus and persist the index")
    add_config_flags(p)
    p.add_argument("--stories", required=True)
    p.add_argument("--retriever", help="retriever checkpoint; default is a fresh warm-started encoder")
    p.add_argument("--dialogues", help="dialogue file, used for the vocabulary of a fresh encoder")
    p.add_argument("--out")
    p.add_argument("--name")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train", help="stage 1 (generator only) or stage 2 (joint)")
    add_config_flags(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--stories", required=True)
    p.add_argument("--dialogues", required=True)
    p.add_argument("--eval", help="held-out dialogue file evaluated at the end")
    p.add_argument("--resume", help="generator checkpoint (stage 2: the stage-1 model)")
    p.add_argument("--retriever", help="retriever checkpoint to start stage 2 from")
    p.add_argument("--scratch", action="store_true", help="stage 2 from a randomly initialized generator")
    p.add_argument("--name")
    p.set_defaults(func=cmd_train)

    for cmd, func, helptext in (("generate", cmd_generate, "decode responses for a dialogue file"),
                                ("evaluate", cmd_evaluate, "score responses against references")):
        p = sub.add_parser(cmd, help=helptext)
        add_config_flags(p)
        p.add_argument("--checkpoint", required=cmd == "generate")
        p.add_argument("--dialogues", required=True)
        p.add_argument("--stories")
        p.add_argument("--index")
        p.add_argument("--retriever")
        p.add_argument("--no-retrieval", action="store_true")
        p.add_argument("--out")
        p.add_argument("--name")
        if cmd == "evaluate":
            p.add_argument("--hyp-file", help="precomputed responses, one per line or JSON-lines")
        p.set_defaults(func=func)

    p = sub.add_parser("diversity-report", help="unique stories retrieved per retriever")
    add_config_flags(p)
    p.add_argument("--stories", required=True)
    p.add_argument("--dialogues", required=True)
    p.add_argument("--retriever", action="append", required=True)
    p.add_argument("--label", action="append")
    p.add_argument("--name")
    p.set_defaults(func=cmd_diversity_report)

    p = sub.add_parser("synth", help="write the synthetic persona/story task to a directory")
    p.add_argument("--out", required=True)
    p.add_argument("--personas", type=int, default=200)
    p.add_argument("--heldout", type=int, default=40)
    p.add_argument("--dialogues-per-persona", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"lapdog {args.command}: {e}", file=sys.stderr)
        return e.code
    except DataError as e:
        print(f"lapdog {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
