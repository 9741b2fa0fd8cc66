import json
import math
import os

import numpy as np
import pytest
from scipy import stats

from carid.hpo import (
    AllTrialsFailed,
    AlreadyComplete,
    NoCompleteTrials,
    ParamSpec,
    SearchSpace,
    StorageUnavailable,
    Study,
    TpeSettings,
    Trial,
    UnknownTrial,
    _sample_prior,
    best_trial,
    define_space,
    negate,
    run_study,
    split_good_bad,
    suggest_params,
)


class TestDefineSpace:
    def test_exact_parameter_set(self):
        space = define_space()
        by_name = {p.name: p for p in space.params}
        assert set(by_name) == {"optimizer", "dropout", "batch_size", "scheduler_patience",
                                "scheduler_factor", "weight_decay", "lr"}
        assert by_name["optimizer"].domain == ("adam", "sgd")
        assert by_name["dropout"].kind == "float_uniform"
        assert by_name["dropout"].domain == (0.3, 0.6)
        assert by_name["batch_size"].domain == (32, 64, 128)
        assert by_name["scheduler_patience"].kind == "int_uniform"
        assert by_name["scheduler_patience"].domain == (5, 10)
        assert by_name["scheduler_factor"].domain == (0.1, 0.5)
        assert by_name["weight_decay"].kind == "float_log_uniform"
        assert by_name["weight_decay"].domain == (1e-5, 1e-3)
        assert by_name["lr"].kind == "float_log_uniform"
        assert by_name["lr"].domain == (1e-4, 1e-2)


class TestParamSpec:
    def test_rejects_bad_domains(self):
        with pytest.raises(ValueError):
            ParamSpec("x", "float_uniform", (1.0, 1.0))
        with pytest.raises(ValueError):
            ParamSpec("x", "float_log_uniform", (0.0, 1.0))
        with pytest.raises(ValueError):
            ParamSpec("x", "categorical", ())
        with pytest.raises(ValueError):
            ParamSpec("x", "gaussian", (0, 1))

    def test_duplicate_names_rejected(self):
        p = ParamSpec("x", "float_uniform", (0.0, 1.0))
        with pytest.raises(ValueError):
            SearchSpace((p, p))

    def test_contains(self):
        p = ParamSpec("n", "int_uniform", (5, 10))
        assert p.contains(5) and p.contains(10)
        assert not p.contains(4) and not p.contains(7.5)


def _completed_trials(space, n, objective_fn, seed=0):
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(n):
        params = {p.name: _sample_prior(p, rng) for p in space.params}
        trials.append(Trial(id=i, params=params, objective=objective_fn(params),
                            state="complete"))
    return trials


class TestSplitGoodBad:
    def test_sizes_and_ordering(self):
        space = define_space()
        for n in (1, 4, 10, 30, 57):
            trials = _completed_trials(space, n, lambda p: p["dropout"])
            good, bad = split_good_bad(trials, 0.25)
            assert len(good) == max(1, math.ceil(0.25 * n))
            assert len(good) + len(bad) == n
            assert not ({t.id for t in good} & {t.id for t in bad})
            if bad:
                assert min(t.objective for t in good) >= max(t.objective for t in bad)


class TestSuggest:
    def test_prior_values_in_domain_and_deterministic(self):
        space = define_space()
        a = suggest_params(space, [], seed=3)
        b = suggest_params(space, [], seed=3)
        assert a == b
        assert suggest_params(space, [], seed=4) != a
        for spec in space.params:
            assert spec.contains(a[spec.name])

    def test_prior_lr_is_log_uniform(self):
        space = SearchSpace((ParamSpec("lr", "float_log_uniform", (1e-4, 1e-2)),))
        samples = [suggest_params(space, [], seed=i)["lr"] for i in range(2000)]
        result = stats.kstest(np.log10(samples), "uniform", args=(-4, 2))
        assert result.pvalue > 0.01

    def test_guided_suggestions_deterministic_in_history_and_seed(self):
        space = define_space()
        trials = _completed_trials(space, 20, lambda p: -(p["dropout"] - 0.4) ** 2)
        assert suggest_params(space, trials, seed=9) == suggest_params(space, trials, seed=9)

    def test_int_param_suggestions_are_integers(self):
        space = define_space()
        trials = _completed_trials(space, 15, lambda p: float(p["scheduler_patience"]))
        for seed in range(20):
            value = suggest_params(space, trials, seed=seed)["scheduler_patience"]
            assert isinstance(value, int) and 5 <= value <= 10


class TestStudyStateMachine:
    def test_tell_then_best_trial_singleton(self, tmp_path):
        study = Study(define_space(), tmp_path / "study.json")
        trial = study.suggest(seed=0)
        study.tell(trial.id, 0.5)
        assert study.best_trial().id == trial.id

    def test_tell_unknown_and_completed(self):
        study = Study(define_space())
        with pytest.raises(UnknownTrial):
            study.tell(99, 0.1)
        trial = study.suggest(seed=0)
        study.tell(trial.id, 0.1)
        with pytest.raises(AlreadyComplete):
            study.tell(trial.id, 0.2)

    def test_best_trial_tie_breaks_by_lowest_id(self):
        study = Study(define_space())
        t0 = study.suggest(seed=0)
        t1 = study.suggest(seed=1)
        study.tell(t0.id, 0.7)
        study.tell(t1.id, 0.7)
        assert study.best_trial().id == t0.id

    def test_no_complete_trials(self):
        study = Study(define_space())
        study.suggest(seed=0)
        with pytest.raises(NoCompleteTrials):
            study.best_trial()


class TestPersistence:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "study.json"
        study = Study(define_space(), path)
        trial = study.suggest(seed=0)
        study.tell(trial.id, 0.42)
        study.suggest(seed=1)

        loaded = Study.load(path)
        assert loaded.space == study.space
        assert [(t.id, t.state, t.objective) for t in loaded.trials] == \
               [(t.id, t.state, t.objective) for t in study.trials]
        assert loaded.trials[0].params == study.trials[0].params

    def test_file_schema(self, tmp_path):
        path = tmp_path / "study.json"
        study = Study(define_space(), path)
        trial = study.suggest(seed=0)
        study.tell(trial.id, 1.0)
        data = json.loads(path.read_text())
        assert set(data) == {"space", "trials"}
        assert set(data["trials"][0]) == {"id", "params", "objective", "state"}

    def test_failed_write_leaves_previous_study_readable(self, tmp_path, monkeypatch):
        path = tmp_path / "study.json"
        study = Study(define_space(), path)
        trial = study.suggest(seed=0)
        study.tell(trial.id, 0.9)
        before = path.read_text()

        def boom(*args, **kwargs):
            raise OSError("disk gone")

        monkeypatch.setattr(os, "replace", boom)
        with pytest.raises(OSError):
            study.suggest(seed=1)
        monkeypatch.undo()
        assert path.read_text() == before
        assert not list(tmp_path.glob("*.tmp"))

    def test_unreadable_study(self, tmp_path):
        with pytest.raises(StorageUnavailable):
            Study.load(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(StorageUnavailable):
            Study.load(bad)


class TestRunStudy:
    def test_all_failures_raise(self):
        def explode(params):
            raise RuntimeError("nope")

        with pytest.raises(AllTrialsFailed):
            run_study(explode, define_space(), n_trials=3, seed=0)

    def test_failed_trials_recorded_and_excluded(self):
        calls = {"n": 0}

        def sometimes(params):
            calls["n"] += 1
            if calls["n"] % 3 == 0:
                raise RuntimeError("flaky")
            return params["dropout"]

        study = run_study(sometimes, define_space(), n_trials=12, seed=0)
        states = [t.state for t in study.trials]
        assert states.count("failed") == 4
        assert states.count("complete") == 8
        assert study.best_trial().state == "complete"

    def test_quadratic_lr_recovery(self):
        space = SearchSpace((ParamSpec("lr", "float_log_uniform", (1e-4, 1e-2)),))
        study = run_study(negate(lambda p: (p["lr"] - 3e-3) ** 2), space,
                          n_trials=40, seed=7)
        assert 1e-3 <= study.best_trial().params["lr"] <= 9e-3

    def test_n_trials_validated(self):
        with pytest.raises(ValueError):
            run_study(lambda p: 0.0, define_space(), n_trials=0, seed=0)

    def test_module_level_helpers(self, tmp_path):
        from carid.hpo import suggest, tell

        study = Study(define_space(), tmp_path / "s.json")
        trial = suggest(study, seed=0)
        tell(study, trial.id, 0.3)
        assert best_trial(study).objective == 0.3
