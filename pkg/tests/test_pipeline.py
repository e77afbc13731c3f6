import json

import numpy as np
import pytest

from eegics import pipeline, selection
from eegics.config import ConfigError, TrainConfig, parse_config
from eegics.data import loso_splits
from eegics.model import Architecture
from eegics.pipeline import (PipelineError, derive_seed, loso_report, run_ics_fold, run_loso,
                             run_n_sweep)
from eegics.selection import NoConfidentSamples


@pytest.fixture(scope="module")
def loso_run(tiny_ds, tiny_cfg):
    return run_loso(tiny_ds, tiny_cfg)


class TestFold:
    def test_fold_record(self, tiny_ds, tiny_cfg):
        split = loso_splits(tiny_ds)[0]
        rec, models = run_ics_fold(tiny_ds, split, tiny_cfg, keep_models=True)
        assert rec.status == "ok" and rec.n_test == 40 and rec.n_train == 80
        assert rec.student(2).selected == sorted(rec.ranking[:2])
        assert models[2].spec.in_channels == 2
        assert models["teacher"].spec.in_channels == tiny_ds.n_channels
        assert rec.teacher_checksum == models["teacher"].checksum()

    def test_held_out_subject_never_reaches_selection(self, tiny_ds, tiny_cfg, monkeypatch):
        seen = []
        real = selection.rank_from_training

        def spy(model, ds, *a, **kw):
            seen.append(set(ds.subjects.tolist()))
            return real(model, ds, *a, **kw)

        monkeypatch.setattr(selection, "rank_from_training", spy)
        for split in loso_splits(tiny_ds):
            run_ics_fold(tiny_ds, split, tiny_cfg)
            assert split.subject not in seen[-1]
        assert len(seen) == 3

    def test_all_channels_student(self, tiny_ds, tiny_cfg):
        split = loso_splits(tiny_ds)[1]
        rec = run_ics_fold(tiny_ds, split, tiny_cfg, n_values=[tiny_ds.n_channels])
        assert rec.student(6).selected == list(range(6))

    def test_n_out_of_range(self, tiny_ds, tiny_cfg):
        with pytest.raises(ValueError):
            run_ics_fold(tiny_ds, loso_splits(tiny_ds)[0], tiny_cfg, n_values=[7])


class TestLoso:
    def test_recovers_planted_channels(self, loso_run, tiny_ds):
        report, records = loso_run
        assert report.summary["n_succeeded"] == 3
        assert report.summary["student"]["mean"] >= 0.9
        for r in records:
            assert r.student(2).selected == list(tiny_ds.planted)

    def test_deterministic(self, loso_run, tiny_ds, tiny_cfg):
        report, _ = run_loso(tiny_ds, tiny_cfg)
        assert report.to_json() == loso_run[0].to_json()

    def test_seed_changes_models(self, loso_run, tiny_ds, tiny_cfg):
        _, records = run_loso(tiny_ds, tiny_cfg.replace(seed=2))
        assert records[0].teacher_checksum != loso_run[1][0].teacher_checksum

    def test_summary_recomputable(self, loso_run, tmp_path):
        report, _ = loso_run
        report.save(tmp_path / "r.json")
        d = json.loads((tmp_path / "r.json").read_text())
        t = [f["teacher_accuracy"] for f in d["folds"]]
        s = [f["student_accuracy"] for f in d["folds"]]
        assert abs(np.mean(t) - d["summary"]["teacher"]["mean"]) <= 1e-12
        assert abs(np.std(t) - d["summary"]["teacher"]["std"]) <= 1e-12
        assert abs(np.mean(s) - d["summary"]["student"]["mean"]) <= 1e-12
        assert abs(np.std(s) - d["summary"]["student"]["std"]) <= 1e-12
        assert d["versions"]["eegics"]
        assert d["config"]["n_channels"] == 2

    def test_parallel_jobs_match_serial(self, loso_run, tiny_ds, tiny_cfg):
        report, _ = run_loso(tiny_ds, tiny_cfg, jobs=2)
        assert report.to_json() == loso_run[0].to_json()


class TestSweep:
    def test_teacher_trained_once_per_fold(self, tiny_ds, tiny_cfg, monkeypatch):
        calls = []
        real = pipeline.train

        def spy(spec, data, cfg, *a, **kw):
            calls.append(spec.in_channels)
            return real(spec, data, cfg, *a, **kw)

        monkeypatch.setattr(pipeline, "train", spy)
        report, _ = run_n_sweep(tiny_ds, tiny_cfg, [1, 2, 6])
        assert calls.count(6) == 3 + 3  # one teacher and one N=6 student per fold
        assert calls.count(1) == 3 and calls.count(2) == 3
        assert [row["n"] for row in report.summary["table"]] == [1, 2, 6]

    def test_single_value_matches_loso(self, loso_run, tiny_ds, tiny_cfg):
        report, records = run_n_sweep(tiny_ds, tiny_cfg, [2])
        assert loso_report(tiny_ds, tiny_cfg, records).to_json() == loso_run[0].to_json()
        assert report.summary["table"][0]["mean"] == loso_run[0].summary["student"]["mean"]

    def test_invalid_values(self, tiny_ds, tiny_cfg):
        with pytest.raises(ValueError):
            run_n_sweep(tiny_ds, tiny_cfg, [0, 2])
        with pytest.raises(ValueError):
            run_n_sweep(tiny_ds, tiny_cfg, [])


class TestFailedFolds:
    def test_partial_failure_is_reported(self, tiny_ds, tiny_cfg, monkeypatch):
        real = selection.rank_from_training

        def flaky(model, ds, tau, tau_floor):
            if 0 not in set(ds.subjects.tolist()):
                raise NoConfidentSamples(tau)
            return real(model, ds, tau, tau_floor)

        monkeypatch.setattr(selection, "rank_from_training", flaky)
        report, records = run_loso(tiny_ds, tiny_cfg)
        failed = [r for r in records if r.status == "failed"]
        held_out = [r.subject for r in failed]
        assert held_out == [0]
        assert "tau=0.9" in failed[0].diagnostic
        assert report.summary["n_succeeded"] == 2
        assert report.summary["teacher"]["count"] == 3
        assert report.summary["student"]["count"] == 2

    def test_all_failing_raises(self, tiny_ds, tiny_cfg, monkeypatch):
        def never(model, ds, tau, tau_floor):
            raise NoConfidentSamples(tau)

        monkeypatch.setattr(selection, "rank_from_training", never)
        with pytest.raises(PipelineError, match="all folds failed"):
            run_loso(tiny_ds, tiny_cfg)


def test_derive_seed_is_stable():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert len({derive_seed(0, s, 0) for s in range(50)}) == 50


class TestConfig:
    def test_defaults(self):
        cfg, paths = parse_config("")
        assert cfg == TrainConfig() and paths == {}
        assert cfg.tau == 0.90 and cfg.n_channels == 10 and cfg.lr == 1e-3

    def test_sections(self):
        cfg, paths = parse_config(
            "[training]\nlr = 0.01\nepochs = 4\n[selection]\ntau = 0.8\nn = 5\n"
            "[architecture]\nconv1_maps = 4\n[paths]\ndata = x.eegd\n")
        assert (cfg.lr, cfg.epochs, cfg.tau, cfg.n_channels) == (0.01, 4, 0.8, 5)
        assert cfg.arch == Architecture(conv1_maps=4)
        assert paths == {"data": "x.eegd"}

    @pytest.mark.parametrize("text", ["[bogus]\na = 1\n", "[training]\nfoo = 1\n",
                                      "[training]\nepochs = many\n", "[selection]\ntau = 0.4\n",
                                      "[training]\nepochs = 0\n"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)
