"""Datasets, thresholds, metrics and the experiment grid runner."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attacks import (AttackConfig, AttackOutcome, SpatialConfig, UnsupportedFamily, gcam_attack,
                      gray_box_candidates, greedy_attack, instruction_universe, random_candidates,
                      spatial_greedy_attack)
from .cfg import BinaryFunction, load_corpus
from .embedding import EmbeddingTable, load_table
from .features import FAMILIES
from .models import LossSpec, build_model, load_weights, model_from_weights
from .synth import source_of, token_corpus

log = logging.getLogger(__name__)

DATASET_KINDS = ("random", "balanced", "untarg")
ATTACKS = ("greedy", "graybox-greedy", "spatial", "gcam")
DEFAULT_TAU = {"targeted": 0.8, "untargeted": 0.5}
GCAM_ITERS = {"acfg-gnn": 2000, "graph-matcher": 500, "seq-embed": 500}
SWEEP_TAUS = tuple(round(0.05 * k, 2) for k in range(1, 20))


class InsufficientCorpus(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class Setting:
    name: str
    max_insertions: int
    B: int


SETTINGS = {s.name: s for s in (Setting("C1", 15, 5), Setting("C2", 30, 10),
                                 Setting("C3", 45, 15), Setting("C4", 60, 20))}


# -- datasets ------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "random"
    n_pairs: int = 50
    seed: int = 0
    balance: int = 10

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"dataset kind must be one of {DATASET_KINDS}")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")


def build_dataset(corpus: Sequence[BinaryFunction], spec: DatasetSpec) -> list[tuple[BinaryFunction, BinaryFunction]]:
    """Pairs of (source, target); each function is a source at most once."""
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(corpus))
    pairs = []
    if spec.kind == "untarg":
        pairs = [(corpus[int(k)], corpus[int(k)]) for k in order[:spec.n_pairs]]
    else:
        counts = np.array([f.instruction_count() for f in corpus])
        sources = np.array([source_of(f) for f in corpus])
        for k in order:
            ok = sources != sources[k]
            if spec.kind == "balanced":
                ok &= np.abs(counts - counts[k]) <= spec.balance
            choices = np.flatnonzero(ok)
            if len(choices) == 0:
                continue
            pairs.append((corpus[int(k)], corpus[int(choices[rng.integers(len(choices))])]))
            if len(pairs) == spec.n_pairs:
                break
    if len(pairs) < spec.n_pairs:
        raise InsufficientCorpus(f"only {len(pairs)} {spec.kind} pairs available, {spec.n_pairs} requested")
    return pairs


# -- thresholds ----------------------------------------------------------------

def calibrate_thresholds(model, similar: Sequence | None, dissimilar: Sequence | None,
                         skip: bool = False) -> tuple[float, float]:
    """(tau_T, tau_U): the centre of the mean +- std band of each score set.

    Skipping calibration returns the operative defaults 0.8 and 0.5.
    """
    if skip or similar is None or dissimilar is None:
        return DEFAULT_TAU["targeted"], DEFAULT_TAU["untargeted"]
    if not similar or not dissimilar:
        raise EmptyInput("calibration needs similar and dissimilar pairs")

    def band_centre(pairs):
        s = np.array([model.sim(a, b) for a, b in pairs])
        lo, hi = s.mean() - s.std(), s.mean() + s.std()
        return float(np.clip(0.5 * (lo + hi), 1e-6, 1 - 1e-6))

    return band_centre(similar), band_centre(dissimilar)


# -- metrics -------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    mode: str
    tau: float
    n_total: int
    n_success: int
    a_rate: float
    m_size: float
    a_sim: float
    n_change: float  # N-inc (targeted) or N-dec (untargeted)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["n_inc" if self.mode == "targeted" else "n_dec"] = d.pop("n_change")
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def is_success(final: float, tau: float, mode: str) -> bool:
    return final >= tau if mode == "targeted" else final <= tau


def normalized_change(initial: float, final: float, mode: str) -> float:
    if mode == "targeted":
        room = 1.0 - initial
        return (final - initial) / room if room > 0 else 0.0
    return (initial - final) / initial if initial > 0 else 0.0


def compute_metrics(outcomes: Sequence, tau: float, mode: str) -> MetricsReport:
    """Success rate over all outcomes; the other metrics over successes only."""
    if not outcomes:
        raise EmptyInput("no outcomes")
    wins = [o for o in outcomes if is_success(o.final_sim, tau, mode)]
    nan = float("nan")
    if wins:
        m_size = float(np.mean([o.inserted for o in wins]))
        a_sim = float(np.mean([o.final_sim for o in wins]))
        n_change = float(np.mean([normalized_change(o.initial_sim, o.final_sim, mode) for o in wins]))
    else:
        m_size = a_sim = n_change = nan
    return MetricsReport(mode, tau, len(outcomes), len(wins), 100.0 * len(wins) / len(outcomes),
                         m_size, a_sim, n_change)


def threshold_sweep(outcomes: Sequence, mode: str, taus: Iterable[float] = SWEEP_TAUS) -> list[tuple[float, float]]:
    return [(t, compute_metrics(outcomes, t, mode).a_rate) for t in taus]


# -- experiment runner ---------------------------------------------------------

@dataclass
class RunConfig:
    attack: str = "spatial"
    mode: str = "targeted"
    model: str = "seq-embed"
    dataset: str = "random"
    settings: tuple[str, ...] = ("C1",)
    tau: float | None = None
    epsilon: float = 0.1
    r: float = 0.75
    c: int = 10
    topk: int = 5
    cand: int = 400
    seed: int = 0
    pairs: int = 50
    corpus: str | None = None
    embeddings: str | None = None
    weights: str | None = None
    out: str = "runs"
    workers: int = 1
    pair_workers: int = 1
    gcam_iters: int | None = None
    gcam_step: float = 0.1
    gcam_slots: int = 3
    eps_reg: float = 0.01
    p: int = 2

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"run.{name}", msg)
        need(self.attack in ATTACKS, "attack", f"must be one of {ATTACKS}")
        need(self.mode in DEFAULT_TAU, "mode", "must be targeted or untargeted")
        need(self.model in FAMILIES, "model", f"must be one of {FAMILIES}")
        need(self.dataset in DATASET_KINDS, "dataset", f"must be one of {DATASET_KINDS}")
        need(len(self.settings) > 0, "settings", "at least one setting is required")
        for k, s in enumerate(self.settings):
            need(s in SETTINGS, f"settings[{k}]", f"unknown setting {s!r}")
        need(self.tau is None or 0 < self.tau < 1, "tau", "must lie in (0, 1)")
        need(0 <= self.epsilon <= 1, "epsilon", "must lie in [0, 1]")
        need(0 <= self.r < 1, "r", "must lie in [0, 1)")
        need(self.cand >= 1 and self.topk >= 1 and self.c >= 0, "cand", "cand, topk >= 1 and c >= 0")
        need(self.pairs >= 1, "pairs", "must be >= 1")
        need(self.workers >= 1 and self.pair_workers >= 1, "workers", "must be >= 1")
        need(self.corpus is not None, "corpus", "a corpus file is required")
        for name in ("corpus", "embeddings", "weights"):
            path = getattr(self, name)
            need(path is None or Path(path).is_file(), name, f"file not found: {path}")
        need(not (self.attack == "graybox-greedy" and self.model == "seq-embed"), "attack",
             "no gray-box candidate set exists for seq-embed")
        needs_table = self.attack == "spatial" or (self.model == "seq-embed" and self.weights is None)
        need(not needs_table or self.embeddings is not None, "embeddings",
             "an embedding table is required for this attack/model")
        if self.attack == "spatial":
            need(int(round(self.r * self.cand)) + self.c <= self.cand, "c", "r*cand + c exceeds cand")

    @property
    def threshold(self) -> float:
        return self.tau if self.tau is not None else DEFAULT_TAU[self.mode]


def _pair_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _fmt(x: float) -> str:
    return repr(float(x))


PAIR_FIELDS = ("pair_id", "source", "target", "initial_sim", "final_sim", "inserted", "iterations",
               "success")


class Experiment:
    """Fixtures loaded once; one ``run_cell`` per setting."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.corpus = load_corpus(cfg.corpus)
        self.table: EmbeddingTable | None = load_table(cfg.embeddings) if cfg.embeddings else None
        if cfg.weights:
            w = load_weights(cfg.weights)
            if w.family != cfg.model:
                raise ConfigError("run.weights", f"weights are for {w.family}, not {cfg.model}")
            self.model = model_from_weights(w, self.table)
        else:
            self.model = build_model(cfg.model, cfg.seed, self.table)
        if cfg.mode == "untargeted" and cfg.dataset != "untarg":
            log.warning("untargeted attack on a %s dataset: targets are ignored", cfg.dataset)
        self.pairs = build_dataset(self.corpus, DatasetSpec(cfg.dataset, cfg.pairs, cfg.seed))
        if cfg.model == "seq-embed":
            tokens = self.model.vocab.tokens
        elif self.table is not None:
            tokens = self.table.vocab
        else:
            tokens = sorted({t for seq in token_corpus(self.corpus) for t in seq})
        self.universe = instruction_universe(tokens)

    def attack_pair(self, k: int, setting: Setting) -> AttackOutcome:
        cfg, (f1, f2) = self.cfg, self.pairs[k]
        seed = _pair_seed(cfg.seed, k)
        acfg = AttackConfig(cfg.mode, cfg.threshold, setting.B, setting.max_insertions, seed)
        if cfg.attack == "greedy":
            cand = random_candidates(self.universe, cfg.cand, seed)
            return greedy_attack(f1, f2, self.model, cand, acfg, cfg.epsilon, cfg.workers)
        if cfg.attack == "graybox-greedy":
            try:
                cand = gray_box_candidates(cfg.model)
            except UnsupportedFamily as e:
                raise ConfigError("run.attack", str(e)) from None
            return greedy_attack(f1, f2, self.model, cand, acfg, cfg.epsilon, cfg.workers)
        if cfg.attack == "spatial":
            scfg = SpatialConfig(cfg.cand, cfg.r, cfg.c, cfg.topk, cfg.epsilon)
            return spatial_greedy_attack(f1, f2, self.model, self.table, scfg, acfg, self.universe,
                                         cfg.workers)
        iters = cfg.gcam_iters if cfg.gcam_iters is not None else GCAM_ITERS[cfg.model]
        spec = LossSpec(cfg.mode, cfg.eps_reg, cfg.p)
        return gcam_attack(f1, f2, self.model, spec, setting.B, iters, seed, cfg.threshold,
                           cfg.gcam_step, cfg.gcam_slots, self.table)

    def cell_name(self, setting: str) -> str:
        c = self.cfg
        return f"{c.attack}_{c.mode}_{c.model}_{c.dataset}_{setting}"

    def run_cell(self, setting_name: str) -> dict:
        setting = SETTINGS[setting_name]
        cell = Path(self.cfg.out) / self.cell_name(setting_name)
        cell.mkdir(parents=True, exist_ok=True)
        rows_path = cell / "pairs.csv"
        done = _read_rows(rows_path)
        todo = [k for k in range(len(self.pairs)) if k not in done]
        if todo:
            log.info("%s: %d pairs to attack (%d already done)", cell.name, len(todo), len(done))

        def one(k):
            o = self.attack_pair(k, setting)
            f1, f2 = self.pairs[k]
            return k, {"pair_id": k, "source": f1.name, "target": f2.name,
                       "initial_sim": _fmt(o.initial_sim), "final_sim": _fmt(o.final_sim),
                       "inserted": o.inserted, "iterations": o.iterations,
                       "success": int(o.success)}

        if self.cfg.pair_workers > 1:
            with ThreadPoolExecutor(self.cfg.pair_workers) as pool:
                results = list(pool.map(one, todo))
        else:
            results = []
            for k in todo:
                results.append(one(k))
                done[k] = results[-1][1]
                _write_rows(rows_path, done)  # checkpoint after every pair
        for k, row in results:
            done[k] = row
        _write_rows(rows_path, done)
        outcomes = [_RowOutcome(float(r["initial_sim"]), float(r["final_sim"]), int(r["inserted"]))
                    for _, r in sorted(done.items())]
        report = compute_metrics(outcomes, self.cfg.threshold, self.cfg.mode)
        agg = {"cell": cell.name, "setting": setting_name, "B": setting.B,
               "max_insertions": setting.max_insertions, **report.as_dict()}
        (cell / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
        with open(cell / "threshold_sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau", "a_rate"])
            for t, a in threshold_sweep(outcomes, self.cfg.mode):
                w.writerow([f"{t:.2f}", _fmt(a)])
        return agg


@dataclass(frozen=True)
class _RowOutcome:
    initial_sim: float
    final_sim: float
    inserted: int


def _read_rows(path: Path) -> dict[int, dict]:
    if not path.is_file():
        return {}
    with open(path, newline="") as fh:
        return {int(r["pair_id"]): r for r in csv.DictReader(fh)}


def _write_rows(path: Path, rows: dict[int, dict]) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, PAIR_FIELDS, lineterminator="\n")
        w.writeheader()
        for k in sorted(rows):
            w.writerow({f: rows[k][f] for f in PAIR_FIELDS})
    tmp.replace(path)


def run_experiment(cfg: RunConfig) -> list[dict]:
    """Run every setting of the grid; writes per-cell files plus summary.csv."""
    exp = Experiment(cfg)
    aggs = [exp.run_cell(s) for s in cfg.settings]
    out = Path(cfg.out)
    keys = ["cell", "setting", "B", "max_insertions", "mode", "tau", "n_total", "n_success",
            "a_rate", "m_size", "a_sim", "n_inc" if cfg.mode == "targeted" else "n_dec"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for a in aggs:
            w.writerow(["" if a[k] is None else (_fmt(a[k]) if isinstance(a[k], float) else a[k])
                        for k in keys])
    return aggs


__all__ = ["ATTACKS", "ConfigError", "DATASET_KINDS", "DatasetSpec", "EmptyInput", "Experiment",
           "InsufficientCorpus", "MetricsReport", "RunConfig", "SETTINGS", "Setting",
           "build_dataset", "calibrate_thresholds", "compute_metrics", "is_success",
           "normalized_change", "run_experiment", "threshold_sweep"]
