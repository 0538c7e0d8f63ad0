"""Acceptance suite: one test per criterion, each at its stated tolerance.

Results are also collected in ``conftest.ACCEPTANCE`` and printed as one
PASS/FAIL line per criterion at the end of the run.
"""
import filecmp
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from deadbranch.asm import normalize_for_sequence
from deadbranch.attacks import (AttackConfig, SpatialConfig, gray_box_candidates, greedy_attack,
                                instruction_universe, random_candidates, round_perturbation_counts,
                                round_perturbation_embeddings, spatial_greedy_attack)
from deadbranch.cfg import save_corpus
from deadbranch.embedding import save_table, train_skipgram
from deadbranch.evaluation import RunConfig, compute_metrics, run_experiment
from deadbranch.features import Vocabulary, extract, simulate_action
from deadbranch.models import LossSpec, build_model, save_weights, train_siamese
from deadbranch.perturb import (Action, apply_action, apply_actions, get_positions, inserted_count,
                                verify_semantics_preserved)
from deadbranch.relaxed import realize_counts, relax_graph, relax_seq
from deadbranch.synth import generate_corpus, labeled_pairs, token_corpus

FAMILIES = ("acfg-gnn", "graph-matcher", "seq-embed")
ADVERSARIAL = []  # (f, f_adv) from criteria 2 and 5, checked by criterion 6


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    assert ok, f"criterion {k}: {detail}"


def within(x, want, tol):
    # tolerances are inclusive; the slack only absorbs float representation error
    return abs(x - want) <= tol + 1e-12


# -- 1 ------------------------------------------------------------------------------

def test_criterion_1_metric_oracle():
    class O:
        def __init__(self, i, f):
            self.initial_sim, self.final_sim, self.inserted = i, f, 1

    r = compute_metrics([O(0.40, 0.75), O(0.50, 0.88), O(0.60, 0.94)], 0.8, "targeted")
    ok = within(r.a_rate, 66.66, 0.01) and within(r.a_sim, 0.91, 0.005) and within(r.n_change, 0.81, 0.005)
    record(1, ok, f"A-rate {r.a_rate:.4f}, A-sim {r.a_sim:.4f}, N-inc {r.n_change:.4f}")


# -- 2 ------------------------------------------------------------------------------

def exhaustive_choice(model, f_adv, plan, cand, target, mode):
    """Apply every (position, candidate) in problem space, extract, score."""
    views = [extract(model.family, apply_action(f_adv, plan, Action(p, i)), getattr(model, "vocab", None))
             for p in range(plan.B) for i in cand.instructions]
    s = np.round(model.sim_many(views, target), 12).reshape(plan.B, len(cand))
    obj = s if mode == "targeted" else -s
    best = obj.max()
    for p in range(plan.B):  # first maximum in position-major order
        for j in range(len(cand)):
            if obj[p, j] == best:
                return Action(p, cand.instructions[j])


def test_criterion_2_greedy_argmax(models, corpus, table):
    t0 = time.perf_counter()
    universe = instruction_universe(table.vocab)
    mismatches, checked = 0, 0
    for fam in FAMILIES:
        m = models[fam]
        for k in range(20):
            rng = np.random.default_rng(k)
            f1, f2 = (corpus[int(j)] for j in rng.choice(len(corpus), 2, replace=False))
            # thresholds no score can reach, so every run makes all 10 insertions
            cfg = (AttackConfig("targeted", 1 - 1e-12, 5, 10, k) if k % 2 == 0
                   else AttackConfig("untargeted", 1e-12, 5, 10, k))
            cand = random_candidates(universe, 50, k)
            out = greedy_attack(f1, f2, m, cand, cfg, epsilon=0.0)
            target = m.view(f2 if cfg.mode == "targeted" else f1)
            plan = get_positions(f1, cfg.B, cfg.seed)
            g = f1
            for a in out.actions:
                checked += 1
                mismatches += a != exhaustive_choice(m, g, plan, cand, target, cfg.mode)
                g = apply_action(g, plan, a)
            ADVERSARIAL.append((f1, out.f_adv))
    elapsed = time.perf_counter() - t0
    record(2, mismatches == 0 and checked == 600 and elapsed < 120,
           f"{checked} committed actions, {mismatches} mismatches, {elapsed:.1f}s")


# -- 3 ------------------------------------------------------------------------------

def test_criterion_3_simulation_fidelity(corpus, table):
    vocab = Vocabulary(sorted({t for s in token_corpus(corpus) for t in s}))
    pool = list(instruction_universe(table.vocab).values()) + list(gray_box_candidates("graph-matcher").instructions)
    rng = np.random.default_rng(3)
    bad = 0
    for trial in range(100):
        f = corpus[int(rng.integers(len(corpus)))]
        plan = get_positions(f, int(rng.integers(1, 8)), trial)
        views = {fam: extract(fam, f, vocab) for fam in FAMILIES}
        g = f
        for _ in range(int(rng.integers(1, 30))):
            a = Action(int(rng.integers(plan.B)), pool[int(rng.integers(len(pool)))])
            g = apply_action(g, plan, a)
            views = {fam: simulate_action(v, plan, a) for fam, v in views.items()}
        bad += sum(v != extract(fam, g, vocab) for fam, v in views.items())
    record(3, bad == 0, f"100 sequences x 3 views, {bad} mismatches")


# -- 4 ------------------------------------------------------------------------------

def central_diff(model, relaxed, delta, other, spec, h=1e-4):
    g = np.zeros_like(delta)
    for k in np.ndindex(delta.shape):
        d = delta.copy()
        d[k] += h
        up = model.loss_value(relaxed, d, other, spec)
        d[k] -= 2 * h
        g[k] = (up - model.loss_value(relaxed, d, other, spec)) / (2 * h)
    return g


def test_criterion_4_gradients(models, corpus):
    t0 = time.perf_counter()
    worst = {}
    for fam in FAMILIES:
        m = models[fam]
        errs = []
        for k in range(10):
            rng = np.random.default_rng(100 + k)
            f, g = (corpus[int(j)] for j in rng.choice(len(corpus), 2, replace=False))
            plan = get_positions(f, 2, k)
            relaxed = (relax_seq(f, plan, m.vocab, 2, m.embedding.shape[1]) if fam == "seq-embed"
                       else relax_graph(fam, f, plan))
            delta = rng.uniform(0.1, 1.0, relaxed.delta_shape)
            spec = LossSpec("targeted" if k % 2 == 0 else "untargeted", eps_reg=0.01, p=2)
            _, grad = m.loss_and_gradient(relaxed, delta, m.view(g), spec)
            fd = central_diff(m, relaxed, delta, m.view(g), spec)
            errs.append(np.max(np.abs(grad - fd)) / max(np.max(np.abs(fd)), 1e-12))
        worst[fam] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(e <= 1e-4 for e in worst.values()) and elapsed < 60
    record(4, ok, ", ".join(f"{f} {e:.1e}" for f, e in worst.items()) + f", {elapsed:.1f}s")


# -- 5 ------------------------------------------------------------------------------

def brute_nearest(table, q):
    best, best_tok = None, None
    for tok, v in zip(table.vocab, table.vectors):
        nv, nq = np.sqrt(v @ v), np.sqrt(q @ q)
        c = round(float(v @ q / (nv * nq)) if nv > 0 else 0.0, 12)
        if best is None or c > best or (c == best and tok < best_tok):
            best, best_tok = c, tok
    return best_tok


def test_criterion_5_rounding(models, corpus, table):
    assert len(table) <= 500
    rng = np.random.default_rng(5)
    delta = rng.normal(0, float(np.abs(table.vectors).mean()), (100, table.dim))
    got = round_perturbation_embeddings(delta, table)
    emb_ok = got == [brute_nearest(table, q) for q in delta]

    counts_ok = True
    for fam in ("acfg-gnn", "graph-matcher"):
        reps = list(gray_box_candidates(fam).instructions)
        for k in range(10):
            f = corpus[k * 5]
            plan = get_positions(f, 3, k)
            d = rng.uniform(-1.0, 2.5, relax_graph(fam, f, plan).delta_shape)
            if fam == "graph-matcher":
                d[:, 20:] = rng.uniform(-1.0, 0.49, d[:, 20:].shape)
            n = round_perturbation_counts(d)
            counts_ok &= n.dtype.kind == "i" and bool((n >= 0).all())
            f_adv = apply_actions(f, plan, [Action(b, i) for b, i in realize_counts(n, reps)])
            counts_ok &= inserted_count(f_adv) == int(n.sum())
            ADVERSARIAL.append((f, f_adv))
    # embedding rounding realized in code, through the seq relaxation
    m = models["seq-embed"]
    universe = instruction_universe(table.vocab)
    for k in range(5):
        f = corpus[k * 7]
        plan = get_positions(f, 2, k)
        rows = rng.normal(0, 1, (6, table.dim))
        toks = round_perturbation_embeddings(rows, table, list(universe))
        f_adv = apply_actions(f, plan, [Action(j % 2, universe[t]) for j, t in enumerate(toks)])
        counts_ok &= [normalize_for_sequence(i) for b in f_adv.dead_blocks for i in b.instructions] != []
        ADVERSARIAL.append((f, f_adv))
    record(5, emb_ok and counts_ok, f"embedding rows exact: {emb_ok}, count realizations exact: {counts_ok}")


# -- 6 ------------------------------------------------------------------------------

def live_sequence(f):
    return [(b.id, b.instructions) for b in f.live_blocks]


def test_criterion_6_semantics():
    if not ADVERSARIAL:
        pytest.skip("run together with criteria 2 and 5")
    bad = sum(not verify_semantics_preserved(f, g) or live_sequence(f) != live_sequence(g)
              for f, g in ADVERSARIAL)
    record(6, bad == 0, f"{len(ADVERSARIAL)} adversarial samples, {bad} failures")


# -- 7 ------------------------------------------------------------------------------

def brute_neighbors(table, token, universe, m):
    q = table.vectors[table.row(token)]
    scored = []
    for t in universe:
        if t == token or t not in table:
            continue
        v = table.vectors[table.row(t)]
        nv, nq = np.sqrt(v @ v), np.sqrt(q @ q)
        scored.append((-round(float(v @ q / (nv * nq)) if nv > 0 else 0.0, 12), t))
    return [t for _, t in sorted(scored)[:m]]


def test_criterion_7_spatial_structure(models, corpus, table):
    universe = instruction_universe(table.vocab)
    N = min(60, len(universe))
    sizes_ok, nn_ok = True, True
    for r, k in ((0.75, 5), (0.0, 1)):
        hist = []
        cfg = AttackConfig("untargeted", 1e-12, 4, 10, 7)
        spatial_greedy_attack(corpus[8], corpus[8], models["acfg-gnn"], table,
                              SpatialConfig(N, r, 10, k, 0.1), cfg, universe, history=hist)
        sizes_ok &= len(hist) == 10 and all(len(h["cand"]) == N for h in hist)
        if r == 0.0:
            for h in hist:
                (top,) = h["top"]
                want = brute_neighbors(table, normalize_for_sequence(top), universe, 10)
                got = [normalize_for_sequence(i) for i in h["cand"].instructions[:10]]
                nn_ok &= got == want
    record(7, sizes_ok and nn_ok, f"|CAND| == N every update: {sizes_ok}, neighbours exact: {nn_ok}")


# -- 8 and 9 --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Desk-scale fixtures: synthetic corpus, skip-gram table, siamese seq-embed."""
    d = tmp_path_factory.mktemp("e2e")
    funcs = generate_corpus(200, 3, 0)
    save_corpus(funcs, d / "corpus.jsonl")
    table = train_skipgram(token_corpus(funcs), seed=0)
    save_table(table, d / "emb.bin")
    model = build_model("seq-embed", 0, table)
    save_weights(train_siamese(model, labeled_pairs(funcs, 200, 0), 50, seed=0), d / "seq.dbw")
    return d


def efficacy_config(d, out, **kw):
    base = dict(attack="spatial", mode="untargeted", model="seq-embed", dataset="untarg",
                settings=("C1", "C4"), cand=100, pairs=50, seed=0, corpus=str(d / "corpus.jsonl"),
                embeddings=str(d / "emb.bin"), weights=str(d / "seq.dbw"), out=str(out))
    base.update(kw)
    return RunConfig(**base)


@pytest.mark.slow
def test_criterion_8_efficacy(trained):
    t0 = time.perf_counter()
    aggs = {a["setting"]: a for a in run_experiment(efficacy_config(trained, trained / "run"))}
    elapsed = time.perf_counter() - t0
    c1, c4 = aggs["C1"]["a_rate"], aggs["C4"]["a_rate"]
    record(8, c4 >= 50 and c4 >= c1 and elapsed < 600,
           f"A-rate C1 {c1:.1f}%, C4 {c4:.1f}%, attack grid {elapsed:.0f}s")


def same_tree(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all(filecmp.cmp(a / p, b / p, shallow=False) for p in fa)


@pytest.mark.slow
def test_criterion_9_determinism(trained, tmp_path, corpus, table):
    save_corpus(corpus, tmp_path / "small.jsonl")
    save_table(table, tmp_path / "small.bin")
    greedy = dict(attack="greedy", mode="targeted", model="acfg-gnn", dataset="random",
                  settings=("C1", "C2"), cand=50, pairs=10, epsilon=0.1, seed=3,
                  corpus=str(tmp_path / "small.jsonl"), embeddings=str(tmp_path / "small.bin"))
    runs = []
    for w, pw in ((1, 1), (3, 1), (2, 2)):
        out = tmp_path / f"greedy_{w}_{pw}"
        run_experiment(RunConfig(**greedy, out=str(out), workers=w, pair_workers=pw))
        runs.append(out)
    greedy_ok = same_tree(runs[0], runs[1]) and same_tree(runs[0], runs[2])

    spatial = []
    for w, pw in ((1, 1), (2, 2)):
        out = tmp_path / f"spatial_{w}_{pw}"
        run_experiment(efficacy_config(trained, out, settings=("C1",), pairs=6, workers=w, pair_workers=pw))
        spatial.append(out)
    spatial_ok = same_tree(*spatial)
    record(9, greedy_ok and spatial_ok, f"greedy grid identical: {greedy_ok}, spatial rerun identical: {spatial_ok}")
