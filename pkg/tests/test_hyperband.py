import json
from fractions import Fraction

import numpy as np
import pytest

from spiralforge import hyperband, trajgen
from spiralforge.errors import ConfigError, ExhaustedRetries
from spiralforge.hyperband import HyperBandParams, SearchSpace

from oracles import MockEvaluator, oracle_epochs, schedule_oracle

PARAMS = HyperBandParams(9, 3, seed=5)


@pytest.mark.parametrize("R,eta", [(1, 5), (27, 3), (81, 3), (150, 5), (12, 3), (100, 2)])
def test_schedule_matches_formula_oracle(R, eta):
    got = hyperband.schedule(HyperBandParams(R, eta))
    want = schedule_oracle(R, eta)
    assert len(got) == len(want)
    for br, (s, n, rungs) in zip(got, want):
        assert (br.s, br.n_configs) == (s, n)
        assert [r.n_trials for r in br.rungs] == [x[0] for x in rungs]
        assert [Fraction(r.resource).limit_denominator(10 ** 6) for r in br.rungs] == [x[1] for x in rungs]
        assert [r.epochs for r in br.rungs] == [x[2] for x in rungs]
        assert br.epochs == oracle_epochs(rungs)
    totals = hyperband.schedule_totals(got)
    assert totals["epochs"] == sum(oracle_epochs(r) for _, _, r in want)


def test_known_totals():
    assert hyperband.schedule_totals(hyperband.schedule(HyperBandParams(81, 3)))["n_configs"] == 143
    desk = hyperband.schedule_totals(hyperband.schedule(HyperBandParams(12, 3)))
    assert (desk["n_configs"], desk["epochs"]) == (17, 90)
    big = hyperband.schedule_totals(hyperband.schedule(HyperBandParams(150, 5)))
    assert (big["n_configs"], big["epochs"]) == (173, 2098)


def test_large_eta_degenerates_to_single_bracket():
    br = hyperband.schedule(HyperBandParams(5, 10))
    assert len(br) == 1 and len(br[0].rungs) == 1 and br[0].rungs[0].epochs == 5


def test_params_validation():
    with pytest.raises(ConfigError):
        HyperBandParams(0, 3)
    with pytest.raises(ConfigError):
        HyperBandParams(10, 1)


def test_sample_config_bounds_and_determinism():
    space = SearchSpace()
    a = [hyperband.sample_config(space, np.random.default_rng(4)) for _ in range(3)]
    b = [hyperband.sample_config(space, np.random.default_rng(4)) for _ in range(3)]
    assert a == b
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = hyperband.sample_config(space, rng)
        c.validate()
        assert 2.88 <= c.tr_ms <= 3.7 and c.r_inner <= c.r_outer <= 1 - c.r_inner
    with pytest.raises(ExhaustedRetries):
        hyperband.sample_config(space, rng, trajgen.GradientSystem(max_grad_mT_m=1.0), max_retries=5)




def test_search_returns_ledger_argmax(tmp_path):
    ev = MockEvaluator()
    res = hyperband.run_search(SearchSpace(), PARAMS, ev, tmp_path)
    assert res.complete
    trials = res.ledger.trials()
    all_scores = [(MockEvaluator.score(trajgen.SpiralConfig.from_dict(trials[e["trial"]]["config"]),
                                       e["epochs_consumed"]), e["trial"])
                  for e in res.ledger.events if e["event"] == "evaluated"]
    best_score, _ = max(all_scores)
    assert res.best_score == pytest.approx(best_score, abs=1e-15)
    assert res.best_config == trajgen.SpiralConfig.from_dict(trials[res.best_trial]["config"])
    assert json.loads((tmp_path / "best.json").read_text())["trial"] == res.best_trial
    # epoch accounting: every call trains exactly the difference to the rung budget
    assert ev.epochs == hyperband.schedule_totals(hyperband.schedule(PARAMS))["epochs"]
    assert res.report["totals"]["epochs_consumed"] == ev.epochs


def test_promotion_is_top_k(tmp_path):
    res = hyperband.run_search(SearchSpace(), PARAMS, MockEvaluator(), tmp_path)
    ev = res.ledger.evaluated()
    brackets = hyperband.schedule(PARAMS)
    for key, closed in res.ledger.closed_rungs().items():
        b, i = key
        members = closed["promoted"] + closed["discarded"]
        scores = {t: ev[(t, i)]["score"] for t in members}
        ranked = sorted(members, key=lambda t: (-scores[t], t))
        assert sorted(ranked[:brackets[b].rungs[i].keep]) == closed["promoted"]
        if i + 1 < len(brackets[b].rungs):
            assert len(closed["promoted"]) == brackets[b].rungs[i + 1].n_trials


def test_failed_trials_never_promoted(tmp_path):
    space = SearchSpace()
    rng = np.random.default_rng(PARAMS.seed)
    first = [hyperband.sample_config(space, rng) for _ in range(6)]
    fail = {round(c.u_inner, 6) for c in first[:4]}
    res = hyperband.run_search(space, PARAMS, MockEvaluator(fail=fail), tmp_path)
    failed = set(res.report["totals"]["failed"])
    assert failed
    for closed in res.ledger.closed_rungs().values():
        assert not failed & set(closed["promoted"])
    assert res.best_trial not in failed


def test_interrupt_resume_at_every_rung_reproduces_report(tmp_path):
    straight = tmp_path / "straight"
    hyperband.run_search(SearchSpace(), PARAMS, MockEvaluator(), straight)
    stepped = tmp_path / "stepped"
    n_rungs = sum(len(b.rungs) for b in hyperband.schedule(PARAMS))
    for k in range(n_rungs):
        res = hyperband.run_search(SearchSpace(), PARAMS, MockEvaluator(), stepped, resume=k > 0, max_rungs=1)
        assert res.complete == (k == n_rungs - 1)
    res = hyperband.run_search(SearchSpace(), PARAMS, MockEvaluator(), stepped, resume=True)
    assert res.complete
    assert (stepped / "search_report.json").read_bytes() == (straight / "search_report.json").read_bytes()
    assert (stepped / "best.json").read_bytes() == (straight / "best.json").read_bytes()


def test_crash_mid_rung_then_resume(tmp_path):
    straight = tmp_path / "straight"
    hyperband.run_search(SearchSpace(), PARAMS, MockEvaluator(), straight)
    crash = tmp_path / "crash"
    for stop in (4, 11):
        with pytest.raises(KeyboardInterrupt):
            hyperband.run_search(SearchSpace(), PARAMS, MockEvaluator(stop_after=stop), crash, resume=stop > 4)
    ev = MockEvaluator()
    hyperband.run_search(SearchSpace(), PARAMS, ev, crash, resume=True)
    assert (crash / "search_report.json").read_bytes() == (straight / "search_report.json").read_bytes()


def test_threaded_search_matches_serial(tmp_path, monkeypatch):
    hyperband.run_search(SearchSpace(), PARAMS, MockEvaluator(), tmp_path / "one")
    monkeypatch.setenv("SPIRALFORGE_THREADS", "3")
    hyperband.run_search(SearchSpace(), PARAMS, MockEvaluator(), tmp_path / "three")
    assert (tmp_path / "one" / "ledger.json").read_text() == (tmp_path / "three" / "ledger.json").read_text()


def test_existing_ledger_needs_resume_and_same_params(tmp_path):
    hyperband.run_search(SearchSpace(), PARAMS, MockEvaluator(), tmp_path, max_rungs=1)
    with pytest.raises(ConfigError):
        hyperband.run_search(SearchSpace(), PARAMS, MockEvaluator(), tmp_path)
    with pytest.raises(ConfigError):
        hyperband.run_search(SearchSpace(), HyperBandParams(9, 3, seed=6), MockEvaluator(), tmp_path, resume=True)


def test_denoiser_evaluator_runs_a_tiny_search(tmp_path):
    from spiralforge import phantom
    ph = phantom.make_phantoms(4, seed=0, T=6, H=16, W=16, n_coils=2)
    ev = hyperband.DenoiserEvaluator(ph, {"train": np.array([0, 1, 2]), "val": np.array([3])},
                                     trajgen.desk_system(), widths=(2, 4, 4), val_targets=(5, 6))
    res = hyperband.run_search(SearchSpace(), HyperBandParams(3, 3, 1), ev, tmp_path, system=trajgen.desk_system())
    assert res.complete and -1 <= res.best_score <= 1
    state = ev.load_state(tmp_path / "trials" / res.best_trial / "state.ckpt")
    assert state.epoch == 3
