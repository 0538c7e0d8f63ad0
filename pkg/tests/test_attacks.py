import numpy as np
import pytest
import torch

from deadbranch.asm import normalize_for_sequence, parse_instruction
from deadbranch.attacks import (AttackConfig, CandidateSet, SpatialConfig, UnsupportedFamily, gcam_attack,
                                gray_box_candidates, greedy_attack, instruction_universe,
                                random_candidates, realize_token, round_perturbation_counts,
                                round_perturbation_embeddings, spatial_greedy_attack, update_candidates)
from deadbranch.features import extract
from deadbranch.models import LossSpec, build_model
from deadbranch.perturb import apply_actions, get_positions, is_safe, verify_semantics_preserved


@pytest.fixture(scope="module")
def universe(table):
    return instruction_universe(table.vocab)


def test_gray_box_sizes():
    acfg = gray_box_candidates("acfg-gnn")
    gmn = gray_box_candidates("graph-matcher")
    assert len(acfg) == 5 and len(gmn) == 200
    assert len({i.info.gmn_class for i in gmn.instructions}) == 200
    assert all(is_safe(i) for i in acfg.instructions + gmn.instructions)
    with pytest.raises(UnsupportedFamily):
        gray_box_candidates("seq-embed")


def test_realize_token_round_trip(table):
    for tok in table.vocab:
        i = realize_token(tok)
        if i is not None:
            assert normalize_for_sequence(i) == tok and is_safe(i)
    assert realize_token("ret") is None
    assert realize_token("push_rbp") is None


def test_update_candidates_sizes(table, universe):
    N = min(40, len(universe))
    cand = random_candidates(universe, N, 0)
    top = list(cand.instructions[:5])
    new = update_candidates(cand, top, table, 0.5, 10, N, 1, universe)
    assert len(new) == N and len(set(new.instructions)) == N
    assert SpatialConfig(400, 0.75, 10, 5).random_slots == 300
    with pytest.raises(ValueError):
        update_candidates(cand, [], table, 0.5, 10, N, 1, universe)


def test_round_counts():
    assert round_perturbation_counts(np.array([[2.6, -0.4, 0.5, 1.49]])).tolist() == [[3, 0, 1, 1]]
    assert round_perturbation_counts(np.zeros((2, 5))).sum() == 0


def test_round_embeddings(table, rng):
    rows = [3, 9, 17]
    assert round_perturbation_embeddings(table.vectors[rows], table) == [table.vocab[k] for k in rows]
    q = rng.normal(size=(1, table.dim))
    safe = [t for t in table.vocab if realize_token(t) is not None]
    tok = round_perturbation_embeddings(q, table, safe)[0]
    assert tok in safe


def test_greedy_already_satisfied(models, corpus, universe):
    f = corpus[0]
    cfg = AttackConfig("targeted", 0.5, 3, 5, 0)
    out = greedy_attack(f, f, models["acfg-gnn"], random_candidates(universe, 10, 0), cfg, 0.0)
    assert out.success and out.inserted == 0 and out.iterations == 0 and out.trajectory == []


@pytest.mark.parametrize("fam", ["acfg-gnn", "graph-matcher", "seq-embed"])
def test_greedy_trajectory_is_true_similarity(models, corpus, universe, fam):
    m = models[fam]
    f1, f2 = corpus[4], corpus[30]
    cfg = AttackConfig("untargeted", 1e-9, 3, 6, 5)
    out = greedy_attack(f1, f2, m, random_candidates(universe, 20, 1), cfg, 0.2)
    assert len(out.trajectory) == out.iterations == out.inserted == 6
    plan = get_positions(f1, 3, 5)
    for t in range(1, out.iterations + 1):
        g = apply_actions(f1, plan, out.actions[:t])
        assert out.trajectory[t - 1] == pytest.approx(m.sim(g, f1), abs=1e-12)
    assert verify_semantics_preserved(f1, out.f_adv)


def test_greedy_workers_do_not_matter(models, corpus, universe):
    m = models["seq-embed"]
    cfg = AttackConfig("untargeted", 0.01, 4, 5, 3)
    cand = random_candidates(universe, 60, 2)
    a = greedy_attack(corpus[6], corpus[6], m, cand, cfg, 0.1, workers=1)
    b = greedy_attack(corpus[6], corpus[6], m, cand, cfg, 0.1, workers=3)
    assert a.trajectory == b.trajectory and a.actions == b.actions


def test_spatial_keeps_capacity(models, corpus, table, universe):
    hist = []
    N = min(50, len(universe))
    scfg = SpatialConfig(N, 0.5, 6, 3, 0.1)
    out = spatial_greedy_attack(corpus[2], corpus[2], models["acfg-gnn"], table, scfg,
                                AttackConfig("untargeted", 0.01, 3, 6, 0), universe, history=hist)
    assert len(hist) == out.iterations == 6
    assert all(len(h["cand"]) == N for h in hist)


def test_gcam_outputs_integers(models, corpus):
    out = gcam_attack(corpus[1], corpus[20], models["acfg-gnn"], LossSpec("targeted"), 4, 30, 0)
    counts = round_perturbation_counts(out.delta)
    assert (counts >= 0).all() and out.inserted == counts.sum()
    assert (out.delta >= 0).all()
    assert verify_semantics_preserved(corpus[1], out.f_adv)
    assert len(out.trajectory) == out.iterations == 30


def test_gcam_fixed_point_without_gradient(corpus):
    m = build_model("acfg-gnn", 0)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    out = gcam_attack(corpus[1], corpus[2], m, LossSpec("targeted", eps_reg=0.0), 3, 10, 7)
    start = np.random.default_rng(7).uniform(0.0, 1.0, out.delta.shape)
    assert np.array_equal(out.delta, start)


def test_gcam_seq(models, corpus, table):
    out = gcam_attack(corpus[3], corpus[3], models["seq-embed"], LossSpec("untargeted"), 2, 5, 0,
                      slots=2, table=table)
    assert out.inserted <= 4
    assert verify_semantics_preserved(corpus[3], out.f_adv)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig("sideways")
    with pytest.raises(ValueError):
        AttackConfig(tau=1.0)
    with pytest.raises(ValueError):
        SpatialConfig(N=10, r=0.9, c=5)
