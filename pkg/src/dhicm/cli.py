"""``dhicm`` command line: data generation, training, evaluation, analysis and sweeps.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 gradient-check failure.
Every subcommand leaves a ``*.manifest.json`` (or ``manifest.json`` inside an
output directory) recording config, corpus hashes, outputs and seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, ModelConfig, TrainConfig, dump_config, load_config
from .data import ParallelCorpus, TaskData, TaskSpec, Vocab, gen_task, load_data_dir, write_corpus

log = logging.getLogger("dhicm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- manifests -----------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    argv: list
    seed: Optional[int] = None
    config: Optional[str] = None
    corpus: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    status: str = "running"
    version: str = __version__

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        tmp.replace(path)
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def manifest_for(output) -> Path:
    output = Path(output)
    return output / "manifest.json" if output.is_dir() or not output.suffix else \
        output.with_name(output.stem + ".manifest.json")


def corpus_info(data: TaskData, train_name: str = "train") -> dict:
    return {"spec": asdict(data.spec), "train_file": train_name,
            "digests": {k: c.digest() for k, c in data.splits().items() if len(c)},
            "sizes": {k: len(c) for k, c in data.splits().items()}}


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as err:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from err


# -- shared helpers ------------------------------------------------------------------

def generate_data_dir(out, spec: TaskSpec, sizes: Sequence[int]) -> TaskData:
    """Write ``train.<n>`` subsets (nested prefixes of one draw), valid, test, vocab and spec."""
    out = Path(out)
    spec = replace(spec, size=max(sizes))
    data = gen_task(spec)
    write_corpus(out, "train", data.train, data.vocab)
    for n in sizes:
        write_corpus(out, f"train.{n}", data.train.subset(n), data.vocab)
    write_corpus(out, "valid", data.valid, data.vocab)
    write_corpus(out, "test", data.test, data.vocab)
    data.vocab.save(out / "vocab.txt")
    write_json(out / "task.json", asdict(spec))
    return data


def configure(args, vocab_size: int) -> tuple[ModelConfig, TrainConfig]:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed = {args.seed}")
    if getattr(args, "lam", None) is not None:
        overrides.append(f"lam = {args.lam}")
    if getattr(args, "baseline", False):
        overrides.append("dhicm_placement = none")
    mcfg, tcfg = load_config(args.config, overrides)
    if mcfg.vocab_size != vocab_size:
        mcfg = replace(mcfg, vocab_size=vocab_size).validate()
    return mcfg, tcfg


def _trim_log(path: Path, epoch: int) -> None:
    """Drop step records written after the last checkpointed epoch."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if rec.get("epoch", 0) > epoch:
            break
        keep.append(line)
    path.write_text("".join(l + "\n" for l in keep))


def run_training(mcfg: ModelConfig, tcfg: TrainConfig, data: TaskData, out: Path, resume: bool = False,
                 eval_beam: int = 5, argv=(), train_name: str = "train") -> RunManifest:
    from .analysis import decode_bleu
    from .model import Model, load_checkpoint
    from .training import TrainState, evaluate_corpus, train

    out.mkdir(parents=True, exist_ok=True)
    mpath = out / "manifest.json"
    state = None
    model = Model(mcfg)
    if resume and (out / "last.npz").exists():
        model, sd, _ = load_checkpoint(out / "last.npz")
        if dump_config(model.config) != dump_config(mcfg):
            raise ConfigError("resume config differs from the checkpointed run")
        state = TrainState.from_dict(sd)
        _trim_log(out / "log.jsonl", state.epoch)
    else:
        for name in ("log.jsonl", "last.npz", "best.npz"):
            (out / name).unlink(missing_ok=True)
    data.vocab.save(out / "vocab.txt")
    (out / "config.cfg").write_text(dump_config(mcfg, tcfg))
    man = RunManifest("train", list(argv), mcfg.seed, dump_config(mcfg, tcfg), corpus_info(data, train_name),
                      {"best": str(out / "best.npz"), "last": str(out / "last.npz")},
                      {"train": str(out / "log.jsonl")})
    man.write(mpath)
    result = train(model, data.train, data.valid, tcfg, out_dir=out, state=state)
    metrics = evaluate_corpus(result.model, data.valid)
    man.results = {"valid_L_c": metrics["L_c"], "valid_L_KL": metrics["L_KL"], "token_acc": metrics["token_acc"],
                   "mean_importance_entropy": metrics["mean_importance_entropy"],
                   "epochs_run": result.state.epoch, "steps": result.state.step,
                   "best_epoch": result.state.best_epoch, "stopped_early": result.stopped_early}
    if eval_beam > 0:
        man.results.update(bleu=decode_bleu(result.model, data.valid, beam=eval_beam), bleu_split="valid",
                           beam=eval_beam)
    man.status = "completed"
    man.write(mpath)
    return man


def _load_model(path):
    from .model import load_checkpoint
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)[0]


def _vocab_for(args) -> Vocab:
    for cand in ([Path(args.vocab)] if getattr(args, "vocab", None) else []) + \
                ([Path(args.data) / "vocab.txt"] if getattr(args, "data", None) else []) + \
                [Path(args.ckpt).parent / "vocab.txt"]:
        if cand.exists():
            return Vocab.load(cand)
    raise FileNotFoundError("no vocab.txt found next to the checkpoint or in --data")


def _data(args) -> TaskData:
    d = Path(args.data)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    return load_data_dir(d, getattr(args, "train_name", "train"))


def _split(data: TaskData, name: str) -> ParallelCorpus:
    corpus = data.splits()[name]
    if not len(corpus):
        raise FileNotFoundError(f"split {name!r} is empty or missing")
    return corpus


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    spec = TaskSpec(args.task, args.vocab_size, args.min_len, args.max_len, 1, args.valid_size, args.test_size,
                    args.seed)
    data = generate_data_dir(out, spec, _ints(args.sizes))
    man = RunManifest("gen-data", args.argv, args.seed, corpus=corpus_info(data),
                      outputs={"dir": str(out)}, status="completed")
    man.write(out / "manifest.json")
    print(f"wrote {args.task} data ({len(data.train)} train pairs, sizes {args.sizes}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    mpath = out / "manifest.json"
    if mpath.exists():
        prev = RunManifest.read(mpath)
        if prev.status == "completed" and args.resume:
            print(f"{out}: run already completed; nothing to resume")
            return EXIT_OK
        if prev.status == "completed" and not args.force:
            raise UsageError(f"{out} holds a completed run; use --force to overwrite or another --out")
    data = _data(args)
    mcfg, tcfg = configure(args, len(data.vocab))
    if args.dhicm and not mcfg.dhicm_placement:
        raise UsageError("--dhicm needs a non-empty dhicm_placement")
    man = run_training(mcfg, tcfg, data, out, resume=args.resume, eval_beam=args.eval_beam, argv=args.argv,
                       train_name=args.train_name)
    print(json.dumps(man.results, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .analysis import decode_bleu
    from .training import evaluate_corpus

    model = _load_model(args.ckpt)
    data = _data(args)
    corpus = _split(data, args.split)
    metrics = evaluate_corpus(model, corpus)
    res = {"split": args.split, "beam": args.beam, "bleu": decode_bleu(model, corpus, beam=args.beam),
           "L_c": metrics["L_c"], "L_KL": metrics["L_KL"], "token_acc": metrics["token_acc"]}
    if args.split != "valid" and len(data.valid):
        res["valid_L_c"] = evaluate_corpus(model, data.valid)["L_c"]
    else:
        res["valid_L_c"] = metrics["L_c"]
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(f"eval.{args.split}.json")
    write_json(out, res)
    RunManifest("evaluate", args.argv, model.config.seed, dump_config(model.config), corpus_info(data),
                {"ckpt": str(args.ckpt)}, outputs={"json": str(out)}, results=res,
                status="completed").write(manifest_for(out))
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def cmd_decode(args) -> int:
    from .data import read_lines
    from .decoding import translate

    model = _load_model(args.ckpt)
    vocab = _vocab_for(args)
    sources = [vocab.encode(toks) for toks in read_lines(args.input)]
    hyps = [" ".join(vocab.decode(translate(model, s, beam=args.beam).output)) for s in sources]
    out = Path(args.out) if args.out else Path(str(args.input) + ".hyp")
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    tmp.replace(out)
    RunManifest("decode", args.argv, model.config.seed, dump_config(model.config), {"input": str(args.input)},
                {"ckpt": str(args.ckpt)}, outputs={"hypotheses": str(out)},
                results={"sentences": len(hyps), "beam": args.beam}, status="completed").write(manifest_for(out))
    print(f"decoded {len(hyps)} sentences to {out}")
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    from .analysis import dump_encdec_attention, dump_head_importance
    from .config import parse_site

    model = _load_model(args.ckpt)
    data = _data(args)
    corpus = _split(data, args.split)
    if not 0 <= args.sentence_id < len(corpus):
        raise UsageError(f"--sentence-id must lie in [0, {len(corpus)})")
    src, tgt = corpus.pairs[args.sentence_id]
    stack, layer, kind = parse_site(args.site)
    dump_kind = args.kind or ("encdec" if kind == "cross" else "importance")
    if dump_kind == "encdec":
        if kind != "cross":
            raise UsageError("encoder-decoder attention lives at dec.<layer>.cross sites")
        dump = dump_encdec_attention(model, src, tgt, layer, args.head, vocab=data.vocab)
    else:
        dump = dump_head_importance(model, src, tgt, args.site, vocab=data.vocab)
    dump.meta.update(checkpoint=str(args.ckpt), sentence={"split": args.split, "id": args.sentence_id,
                                                          "src": " ".join(data.vocab.decode(src)),
                                                          "tgt": " ".join(data.vocab.decode(tgt))})
    dump.write(args.out)
    RunManifest("dump-attention", args.argv, model.config.seed, dump_config(model.config), corpus_info(data),
                {"ckpt": str(args.ckpt)}, outputs={"csv": str(args.out)}, status="completed"
                ).write(manifest_for(args.out))
    print(f"wrote {dump.kind} dump {dump.matrix.shape} for {dump.site} to {args.out}")
    return EXIT_OK


def cmd_rank_heads(args) -> int:
    from .analysis import corpus_importance

    model = _load_model(args.ckpt)
    data = _data(args)
    mean = corpus_importance(model, _split(data, args.split), args.site)
    ranking = sorted(range(len(mean)), key=lambda h: (-mean[h], h))
    res = {"site": args.site, "split": args.split, "ranking": ranking, "mean_importance": mean.tolist()}
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(f"rank.{args.site}.json")
    write_json(out, res)
    RunManifest("rank-heads", args.argv, model.config.seed, dump_config(model.config), corpus_info(data),
                {"ckpt": str(args.ckpt)}, outputs={"json": str(out)}, results=res,
                status="completed").write(manifest_for(out))
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def cmd_prune_eval(args) -> int:
    from .analysis import prune_and_eval

    model = _load_model(args.ckpt)
    heads = _ints(args.heads)
    if len(set(heads)) >= model.config.heads:
        raise UsageError("cannot prune all heads")
    data = _data(args)
    res = prune_and_eval(model, args.site, heads, _split(data, args.split), renormalize=not args.no_renormalize,
                         beam=args.beam)
    res["split"] = args.split
    tag = "-".join(map(str, sorted(set(heads)))) or "none"
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(f"prune.{args.site}.{tag}.json")
    write_json(out, res)
    RunManifest("prune-eval", args.argv, model.config.seed, dump_config(model.config), corpus_info(data),
                {"ckpt": str(args.ckpt)}, outputs={"json": str(out)}, results=res,
                status="completed").write(manifest_for(out))
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed, h=args.h, tol=args.tol)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<40} max_rel_err={r.max_rel_err:.3e} ({r.checked} entries)")
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    out = Path(args.out)
    res = {"passed": not failed, "seed": args.seed, "max_rel_err": max(r.max_rel_err for r in results),
           "checks": [asdict(r) for r in results]}
    write_json(out / "gradcheck.json", res)
    RunManifest("gradcheck", args.argv, args.seed, outputs={"json": str(out / "gradcheck.json")},
                results={"passed": not failed, "failed": [r.name for r in failed]},
                status="completed").write(out / "gradcheck.manifest.json")
    return EXIT_OK if not failed else EXIT_CHECK


def cmd_gridsearch(args) -> int:
    from .hypersearch import GridSpec, grid_search

    spec = GridSpec.load(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    data = _data(args)
    mcfg, tcfg = configure(args, len(data.vocab))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("gridsearch", args.argv, spec.seed, dump_config(mcfg, tcfg), corpus_info(data, args.train_name),
                      outputs={"results": str(out / "results.csv"), "best": str(out / "best.cfg")})
    man.write(out / "manifest.json")
    result = grid_search(mcfg, tcfg, spec, data.train, data.valid, out_dir=out, workers=args.workers)
    man.results = {"best_trial": result.best_trial, "trials": len(result.table)}
    man.status = "completed"
    man.write(out / "manifest.json")
    print(json.dumps(result.best_trial, sort_keys=True, default=str))
    return EXIT_OK


SWEEP_COLUMNS = ("size", "seed", "model", "test_BLEU", "valid_L_c", "epochs_run")


def cmd_size_sweep(args) -> int:
    import csv

    from .analysis import decode_bleu
    from .model import load_checkpoint

    out = Path(args.out)
    sizes, seeds = _ints(args.sizes), _ints(args.seeds)
    data_dir = out / "data"
    spec = TaskSpec(args.task, args.vocab_size, args.min_len, args.max_len, 1, args.valid_size, args.test_size,
                    args.data_seed)
    full = generate_data_dir(data_dir, spec, sizes)
    man = RunManifest("size-sweep", args.argv, args.data_seed, corpus=corpus_info(full),
                      outputs={"runs": str(out / "sweep.csv"), "summary": str(out / "summary.csv")})
    man.write(out / "manifest.json")
    rows = []
    for size in sizes:
        data = load_data_dir(data_dir, f"train.{size}")
        for seed in seeds:
            for variant in ("baseline", "dhicm"):
                run_dir = out / f"{variant}-{size}-s{seed}"
                ns = argparse.Namespace(config=args.config, set=args.set, seed=seed, lam=args.lam,
                                        baseline=variant == "baseline")
                mcfg, tcfg = configure(ns, len(data.vocab))
                if variant == "dhicm" and not mcfg.dhicm_placement:
                    raise ConfigError("size-sweep needs a DHICM placement for the dhicm runs")
                mpath = run_dir / "manifest.json"
                if mpath.exists() and RunManifest.read(mpath).status == "completed" \
                        and RunManifest.read(mpath).config == dump_config(mcfg, tcfg):
                    run = RunManifest.read(mpath)
                else:
                    run = run_training(mcfg, tcfg, data, run_dir, eval_beam=0, argv=args.argv,
                                       train_name=f"train.{size}")
                if "test_BLEU" not in run.results:
                    model = load_checkpoint(run_dir / "best.npz")[0]
                    run.results["test_BLEU"] = decode_bleu(model, data.test, beam=args.beam)
                    run.results["test_beam"] = args.beam
                    run.write(mpath)
                rows.append({"size": size, "seed": seed, "model": variant, "test_BLEU": run.results["test_BLEU"],
                             "valid_L_c": run.results["valid_L_c"], "epochs_run": run.results["epochs_run"]})
                log.info("size %d seed %d %s: BLEU %.2f", size, seed, variant, run.results["test_BLEU"])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    summary = []
    for size in sizes:
        med = {v: statistics.median(r["test_BLEU"] for r in rows if r["size"] == size and r["model"] == v)
               for v in ("baseline", "dhicm")}
        summary.append({"size": size, "baseline_BLEU": med["baseline"], "dhicm_BLEU": med["dhicm"],
                        "delta": med["dhicm"] - med["baseline"]})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("size", "baseline_BLEU", "dhicm_BLEU", "delta"))
        w.writeheader()
        w.writerows(summary)
    man.results = {"summary": summary}
    man.status = "completed"
    man.write(out / "manifest.json")
    for s in summary:
        print(f"size {s['size']:>6}: baseline {s['baseline_BLEU']:6.2f}  dhicm {s['dhicm_BLEU']:6.2f}  "
              f"delta {s['delta']:+.2f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .analysis import AttentionDump, plot_dump

    if not Path(args.dump).exists():
        raise FileNotFoundError(f"dump not found: {args.dump}")
    dump = AttentionDump.read(args.dump)
    plot_dump(dump, args.out)
    RunManifest("plot", args.argv, outputs={"image": str(args.out)}, corpus={"dump": str(args.dump)},
                status="completed").write(manifest_for(args.out))
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _config_args(p) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")


def _task_args(p) -> None:
    p.add_argument("--task", choices=("copy", "reverse", "lexicon"), required=True)
    p.add_argument("--vocab-size", type=int, default=32)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--valid-size", type=int, default=200)
    p.add_argument("--test-size", type=int, default=200)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dhicm", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"dhicm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic parallel corpus")
    _task_args(p)
    p.add_argument("--sizes", default="2000", help="training sizes, e.g. 500,1000,2000")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a baseline or DHICM model")
    _config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--train-name", default="train", help="training file stem inside --data (e.g. train.500)")
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--baseline", action="store_true", help="no DHICM sites")
    g.add_argument("--dhicm", action="store_true", help="use the configured DHICM placement (default)")
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the KL term")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true", help="overwrite a completed run")
    p.add_argument("--eval-beam", type=int, default=5, help="beam for the final validation BLEU (0 = skip)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="BLEU and validation loss of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="valid")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("decode", help="translate a file of source sentences")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--vocab")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("dump-attention", help="attention or head-importance matrix for one sentence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="valid")
    p.add_argument("--sentence-id", type=int, required=True)
    p.add_argument("--site", required=True, help="e.g. enc.1.self or dec.1.cross")
    p.add_argument("--kind", choices=("encdec", "importance"),
                   help="default: encdec at cross sites, importance elsewhere")
    p.add_argument("--head", type=int, help="single head (encdec only; default: mean over heads)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("rank-heads", help="order heads by mean importance over a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--site", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="valid")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rank_heads)

    p = sub.add_parser("prune-eval", help="evaluate with some heads zeroed at one site")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--site", required=True)
    p.add_argument("--heads", required=True, help="comma-separated head ids to zero")
    p.add_argument("--split", choices=("valid", "test"), default="valid")
    p.add_argument("--no-renormalize", action="store_true")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prune_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gridsearch", help="two-phase hyperparameter search")
    _config_args(p)
    p.add_argument("--spec", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train-name", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", action="store_true", help="reuse cached trials (always on)")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("size-sweep", help="baseline vs DHICM across training-set sizes")
    _task_args(p)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--sizes", default="500,1000,2000")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_size_sweep)

    p = sub.add_parser("plot", help="render a dump CSV as a heatmap (or gnuplot matrix for .dat)")
    p.add_argument("--dump", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.argv = ["dhicm", *argv]
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, IndexError, KeyError, FloatingPointError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
