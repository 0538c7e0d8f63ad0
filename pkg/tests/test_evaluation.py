import math
from types import SimpleNamespace

import numpy as np
import pytest

from deadbranch.evaluation import (SETTINGS, ConfigError, DatasetSpec, EmptyInput, InsufficientCorpus,
                                   RunConfig, build_dataset, calibrate_thresholds, compute_metrics,
                                   threshold_sweep)


def outcomes(initial, final, inserted=None):
    inserted = inserted or [1] * len(initial)
    return [SimpleNamespace(initial_sim=a, final_sim=b, inserted=n) for a, b, n in zip(initial, final, inserted)]


def test_settings():
    assert [(s.max_insertions, s.B) for s in SETTINGS.values()] == [(15, 5), (30, 10), (45, 15), (60, 20)]


def test_worked_example():
    r = compute_metrics(outcomes([0.40, 0.50, 0.60], [0.75, 0.88, 0.94]), 0.8, "targeted")
    assert r.a_rate == pytest.approx(66.666, abs=0.01)
    assert r.a_sim == pytest.approx(0.91, abs=0.005)
    assert abs(r.n_change - 0.81) <= 0.005 + 1e-12  # 0.805 sits on the boundary


def test_all_failures_nan():
    r = compute_metrics(outcomes([0.4], [0.5]), 0.8, "targeted")
    assert r.a_rate == 0 and math.isnan(r.a_sim) and math.isnan(r.m_size)
    assert r.as_dict()["a_sim"] is None


def test_extremes_and_untargeted():
    assert compute_metrics(outcomes([0.0], [1.0]), 0.8, "targeted").n_change == 1.0
    r = compute_metrics(outcomes([1.0, 0.8], [0.4, 0.7]), 0.5, "untargeted")
    assert r.a_rate == 50 and r.n_change == pytest.approx(0.6)
    with pytest.raises(EmptyInput):
        compute_metrics([], 0.5, "targeted")


def test_failures_do_not_move_support_metrics():
    base = outcomes([0.4, 0.5], [0.85, 0.9], [3, 5])
    a = compute_metrics(base, 0.8, "targeted")
    b = compute_metrics(base + outcomes([0.3], [0.6], [40]), 0.8, "targeted")
    assert (a.m_size, a.a_sim, a.n_change) == (b.m_size, b.a_sim, b.n_change)


def test_sweep_monotone(rng):
    o = outcomes(rng.uniform(0, 1, 30).tolist(), rng.uniform(0, 1, 30).tolist())
    t = [a for _, a in threshold_sweep(o, "targeted")]
    u = [a for _, a in threshold_sweep(o, "untargeted")]
    assert all(x >= y for x, y in zip(t, t[1:]))
    assert all(x <= y for x, y in zip(u, u[1:]))


def test_datasets(corpus):
    bal = build_dataset(corpus, DatasetSpec("balanced", 30, 4))
    assert all(abs(a.instruction_count() - b.instruction_count()) <= 10 for a, b in bal)
    assert len({a.name for a, _ in bal}) == 30
    unt = build_dataset(corpus, DatasetSpec("untarg", 20, 4))
    assert all(a is b for a, b in unt)
    r1 = build_dataset(corpus, DatasetSpec("random", 25, 9))
    r2 = build_dataset(corpus, DatasetSpec("random", 25, 9))
    assert [(a.name, b.name) for a, b in r1] == [(a.name, b.name) for a, b in r2]
    with pytest.raises(InsufficientCorpus):
        build_dataset(corpus, DatasetSpec("untarg", len(corpus) + 1, 0))


def test_calibration():
    model = SimpleNamespace(sim=lambda a, b: a)
    assert calibrate_thresholds(model, None, None, skip=True) == (0.8, 0.5)
    tt, tu = calibrate_thresholds(model, [(0.9, 0), (0.7, 0)], [(0.3, 0)] * 4)
    assert tu == pytest.approx(0.3) and tt == pytest.approx(0.8)
    with pytest.raises(EmptyInput):
        calibrate_thresholds(model, [], [(0.3, 0)])


@pytest.mark.parametrize("field,value,path", [("attack", "nope", "run.attack"), ("settings", ("C9",), "run.settings[0]"),
                                               ("tau", 1.5, "run.tau"), ("corpus", "/no/such/file", "run.corpus")])
def test_config_errors(tmp_path, field, value, path):
    corpus = tmp_path / "c.jsonl"
    corpus.write_text("")
    cfg = RunConfig(attack="gcam", model="acfg-gnn", corpus=str(corpus))
    setattr(cfg, field, value)
    with pytest.raises(ConfigError) as e:
        cfg.validate()
    assert e.value.path == path
