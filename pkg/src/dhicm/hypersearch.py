"""Two-phase grid search: architecture first, then regularisation at the chosen architecture.

Trial cost is ``|phase1| + |phase2|``, never the product of the two grids.
Every finished trial is cached as a JSON file under ``out_dir/trials`` so a
re-run only trains what is missing.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from .config import ConfigError, ModelConfig, TrainConfig, dump_config, parse_pairs
from .data import ParallelCorpus

log = logging.getLogger(__name__)

ARCH_KEYS = ("ffn_dim", "heads")
REG_KEYS = ("dropout", "attention_dropout", "activation_dropout", "dhicm_dropout", "label_smoothing")
COLUMNS = ("trial_id", "phase", *ARCH_KEYS, *REG_KEYS, "max_epochs", "valid_L_c", "valid_BLEU", "epochs_run", "status")

# trainer(model_cfg, train_cfg, train, valid, trial_dir) -> {"valid_L_c", "valid_BLEU", "epochs_run"}
Trainer = Callable[[ModelConfig, TrainConfig, ParallelCorpus, ParallelCorpus, Optional[Path]], dict]


@dataclass
class GridSpec:
    ffn_dim: tuple = (64, 128, 256)
    heads: tuple = (2, 4, 8)
    dropout: tuple = (0.0, 0.1, 0.3, 0.5)
    attention_dropout: tuple = (0.0,)
    activation_dropout: tuple = (0.0,)
    dhicm_dropout: tuple = (0.1,)
    label_smoothing: tuple = (0.1, 0.4)
    budget: Optional[int] = None
    seed: int = 0
    max_epochs: int = 30

    def phase1(self) -> list[dict]:
        return [dict(zip(ARCH_KEYS, combo)) for combo in itertools.product(self.ffn_dim, self.heads)]

    def phase2(self) -> list[dict]:
        grids = [getattr(self, k) for k in REG_KEYS]
        return [dict(zip(REG_KEYS, combo)) for combo in itertools.product(*grids)]

    def n_trials(self) -> int:
        return len(self.phase1()) + len(self.phase2())

    def validate(self, d: int) -> "GridSpec":
        for k in (*ARCH_KEYS, *REG_KEYS):
            if not getattr(self, k):
                raise ConfigError(f"grid for {k!r} is empty")
        bad = [h for h in self.heads if h < 1 or d % h]
        if bad:
            raise ConfigError(f"head counts {bad} do not divide d={d}")
        if self.budget is not None and self.budget < self.n_trials():
            raise ConfigError(f"budget {self.budget} < required trials {self.n_trials()}")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        return self

    @classmethod
    def from_pairs(cls, values: dict[str, str]) -> "GridSpec":
        kw: dict = {}
        for key, raw in values.items():
            if key in ("ffn_dim", "heads"):
                kw[key] = tuple(int(v) for v in raw.split(","))
            elif key in REG_KEYS:
                kw[key] = tuple(float(v) for v in raw.split(","))
            elif key in ("budget", "seed", "max_epochs"):
                kw[key] = int(raw)
            else:
                raise ConfigError(f"unknown grid key {key!r}")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "GridSpec":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        return cls.from_pairs(parse_pairs(lines))


@dataclass
class SearchResult:
    best_model: ModelConfig
    best_train: TrainConfig
    best_trial: dict
    table: list[dict] = field(default_factory=list)


def trial_id(phase: int, hp: dict) -> str:
    blob = json.dumps({k: hp[k] for k in sorted(hp)}, sort_keys=True)
    return f"p{phase}-" + hashlib.sha1(blob.encode()).hexdigest()[:10]


def default_trainer(model_cfg: ModelConfig, train_cfg: TrainConfig, train_corpus: ParallelCorpus,
                    valid_corpus: ParallelCorpus, trial_dir: Optional[Path]) -> dict:
    from .analysis import decode_bleu
    from .model import Model
    from .training import evaluate_corpus, train

    result = train(Model(model_cfg), train_corpus, valid_corpus, train_cfg, out_dir=trial_dir)
    metrics = evaluate_corpus(result.model, valid_corpus)
    return {"valid_L_c": metrics["L_c"], "valid_BLEU": decode_bleu(result.model, valid_corpus),
            "epochs_run": result.epochs_run}


def _run_trial(trainer: Trainer, model_cfg: ModelConfig, train_cfg: TrainConfig, train_corpus, valid_corpus,
               trial_dir: Optional[Path]) -> dict:
    try:
        out = trainer(model_cfg, train_cfg, train_corpus, valid_corpus, trial_dir)
        loss = float(out["valid_L_c"])
        status = "ok" if math.isfinite(loss) else "failed"
        return {"valid_L_c": loss if status == "ok" else math.inf,
                "valid_BLEU": float(out.get("valid_BLEU", math.nan)),
                "epochs_run": int(out.get("epochs_run", 0)), "status": status}
    except (FloatingPointError, ArithmeticError) as exc:
        log.warning("trial diverged: %s", exc)
        return {"valid_L_c": math.inf, "valid_BLEU": math.nan, "epochs_run": 0, "status": "failed"}


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_table(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    tmp.replace(path)


def read_table(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _argmin(rows: Sequence[dict]) -> dict:
    # first trial wins ties, keeping selection independent of completion order
    return min(rows, key=lambda r: r["valid_L_c"])


def grid_search(base_model: ModelConfig, base_train: TrainConfig, spec: GridSpec, train_corpus: ParallelCorpus,
                valid_corpus: ParallelCorpus, out_dir=None, trainer: Optional[Trainer] = None,
                workers: int = 1) -> SearchResult:
    """Run both phases; return the phase-2 argmin of validation ``L_c`` and the full table."""
    spec.validate(base_model.d)
    trainer = trainer or default_trainer
    out = Path(out_dir) if out_dir is not None else None
    cache = out / "trials" if out is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    tcfg = replace(base_train, max_epochs=spec.max_epochs)
    table: list[dict] = []

    def run_phase(phase: int, configs: list[tuple[dict, ModelConfig]]) -> list[dict]:
        rows: list[Optional[dict]] = [None] * len(configs)
        todo = []
        for i, (hp, mcfg) in enumerate(configs):
            hps = {k: getattr(mcfg, k) for k in (*ARCH_KEYS, *REG_KEYS)}
            # keyed on the full config so a changed base setting never reuses a stale trial
            tid = trial_id(phase, {"config": dump_config(mcfg, tcfg)})
            base_row = {"trial_id": tid, "phase": phase, **hps, "max_epochs": spec.max_epochs}
            cached = cache / f"{tid}.json" if cache is not None else None
            if cached is not None and cached.exists():
                rows[i] = json.loads(cached.read_text())
                log.info("trial %s cached", tid)
            else:
                trial_dir = cache / tid if cache is not None else None
                if trial_dir is not None and trial_dir.exists():
                    shutil.rmtree(trial_dir)  # leftovers of an interrupted trial
                todo.append((i, base_row, mcfg, trial_dir))

        def finish(i, base_row, metrics):
            row = {**base_row, **metrics}
            rows[i] = row
            if cache is not None:
                _atomic_write(cache / f"{row['trial_id']}.json", json.dumps(row, sort_keys=True) + "\n")
                write_table(out / "results.csv", table + [r for r in rows if r is not None])

        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futs = [(i, br, pool.submit(_run_trial, trainer, m, tcfg, train_corpus, valid_corpus, d))
                        for i, br, m, d in todo]
                for i, br, fut in futs:
                    finish(i, br, fut.result())
        else:
            for i, br, m, d in todo:
                finish(i, br, _run_trial(trainer, m, tcfg, train_corpus, valid_corpus, d))
        return rows

    def with_seed(cfg: ModelConfig) -> ModelConfig:
        return replace(cfg, seed=spec.seed).validate()

    p1 = [(hp, with_seed(replace(base_model, **hp))) for hp in spec.phase1()]
    rows1 = run_phase(1, p1)
    table.extend(rows1)
    arch = {k: _argmin(rows1)[k] for k in ARCH_KEYS}
    arch_cfg = replace(base_model, **arch)

    p2 = [(hp, with_seed(replace(arch_cfg, **hp))) for hp in spec.phase2()]
    rows2 = run_phase(2, p2)
    table.extend(rows2)
    best = _argmin(rows2)
    best_model = with_seed(replace(arch_cfg, **{k: best[k] for k in REG_KEYS}))

    if out is not None:
        write_table(out / "results.csv", table)
        _atomic_write(out / "best.cfg", dump_config(best_model, tcfg))
    return SearchResult(best_model, tcfg, best, table)


__all__ = ["GridSpec", "SearchResult", "grid_search", "default_trainer", "trial_id", "read_table",
           "write_table", "COLUMNS", "ARCH_KEYS", "REG_KEYS"]
