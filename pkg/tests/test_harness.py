import dataclasses
import os

import numpy as np
import pytest

from acoustic_cnn.data import FrameData
from acoustic_cnn.harness import (CorpusSpec, EvalReport, ExperimentError, IncomparableReports, comparison_table,
                                  driver_arms, emit_report, evaluate, generate_corpus, read_plot_data,
                                  resolve_config, run_driver, run_experiment, speaker_distortion, with_overrides,
                                  write_plot_data)
from acoustic_cnn.harness.corpus import class_templates
from acoustic_cnn.harness.drivers import count_params
from acoustic_cnn.network import ConfigError, Network, NetworkSpec
from configs import tiny_config, with_changes

SMALL = CorpusSpec(num_speakers=3, utterances_per_speaker=2, frames_per_utterance=30, num_classes=4,
                   spectral_dim=8, test_speakers=1)


class TestCorpus:
    def test_pure_function_of_the_spec(self):
        a, b = generate_corpus(SMALL), generate_corpus(dataclasses.replace(SMALL))
        for ua, ub in zip(a.train + a.heldout + a.test, b.train + b.heldout + b.test):
            assert ua.utterance_id == ub.utterance_id
            np.testing.assert_array_equal(ua.frames, ub.frames)
            np.testing.assert_array_equal(ua.labels, ub.labels)

    def test_seed_changes_the_data(self):
        a = generate_corpus(SMALL)
        b = generate_corpus(dataclasses.replace(SMALL, master_seed=1))
        assert not np.array_equal(a.train[0].frames, b.train[0].frames)

    def test_noiseless_corpus_is_separable(self):
        spec = dataclasses.replace(SMALL, noise=0.0, separation=5.0, distortion=False, num_classes=10)
        corpus = generate_corpus(spec)
        templates = class_templates(spec)
        for u in corpus.train:
            X = u.frames[:, :, 0]
            guess = np.argmin(((X[:, None, :] - templates[None]) ** 2).sum(-1), axis=1)
            np.testing.assert_array_equal(guess, u.labels)

    def test_distortion_shifts_speaker_means_by_the_offset(self):
        spec = dataclasses.replace(SMALL, num_speakers=2, utterances_per_speaker=20, frames_per_utterance=200,
                                   mixing=0.0, test_speakers=0, heldout_fraction=0.0)
        on = generate_corpus(spec)
        off = generate_corpus(dataclasses.replace(spec, distortion=False))
        for sid, dist in on.speakers.items():
            mean_on = np.mean([u.frames[:, :, 0].mean(0) for u in on.train if u.speaker_id == sid], axis=0)
            mean_off = np.mean([u.frames[:, :, 0].mean(0) for u in off.train if u.speaker_id == sid], axis=0)
            np.testing.assert_allclose(mean_on - mean_off, dist.b, atol=1e-10)

    def test_distortions_are_well_conditioned(self):
        spec = dataclasses.replace(SMALL, mixing=3.0, spectral_dim=20)
        for s in range(10):
            d = speaker_distortion(spec, f"spk{s:03d}")
            assert np.linalg.cond(d.A) <= 10.0 + 1e-9

    def test_splits(self):
        corpus = generate_corpus(dataclasses.replace(SMALL, utterances_per_speaker=10))
        train_speakers = {u.speaker_id for u in corpus.train + corpus.heldout}
        assert not train_speakers & {u.speaker_id for u in corpus.test}
        assert len(corpus.heldout) == 3
        assert len(corpus.train) == 27

    def test_spectra_corpus_is_positive_power(self):
        corpus = generate_corpus(dataclasses.replace(SMALL, representation="spectra", fft_bins=65))
        frames = corpus.train[0].frames
        assert frames.shape == (30, 65, 1)
        assert np.all(frames > 0)

    def test_degenerate_spec(self):
        with pytest.raises(ValueError, match="num_classes"):
            generate_corpus(dataclasses.replace(SMALL, num_classes=0))
        with pytest.raises(ValueError, match="num_speakers"):
            generate_corpus(dataclasses.replace(SMALL, num_speakers=0))


class _Uniform:
    num_params = 0

    def __init__(self, classes):
        self.classes = classes

    def logits(self, params, x):
        return np.zeros((len(x), self.classes))

    def loss(self, params, x, t):
        return len(x) * np.log(self.classes)


class _Oracle(_Uniform):
    """Reads the label back out of the first input cell."""

    def logits(self, params, x):
        return 10.0 * np.eye(self.classes)[x[:, 0, 0, 0].astype(int)]

    def loss(self, params, x, t):
        return 0.0


class TestEvaluate:
    def _split(self, classes=10, frames=5000, seed=0):
        g = np.random.default_rng(seed)
        from acoustic_cnn.features import UtteranceFeatures
        labels = g.integers(0, classes, frames)
        frames_ = np.tile(labels[:, None, None].astype(float), (1, 3, 1))
        return FrameData([UtteranceFeatures("u", "s", frames_, labels)], 0)

    def test_uniform_network_errs_nine_times_in_ten(self):
        # argmax of a uniform posterior is class 0: error is the fraction of non-zero labels
        report = evaluate(_Uniform(10), None, self._split())
        assert abs(report.frame_error - 0.9) < 0.02
        assert report.cross_entropy == pytest.approx(np.log(10))

    def test_oracle_network_is_perfect(self):
        assert evaluate(_Oracle(10), None, self._split()).frame_error == 0.0

    def test_repeatable(self):
        net = Network(NetworkSpec((3, 1, 1), 10, [[]], []))
        params = net.init_params(0)
        split = self._split(frames=200)
        assert evaluate(net, params, split).to_text() == evaluate(net, params, split).to_text()

    def test_unlabeled_split(self):
        from acoustic_cnn.features import UtteranceFeatures
        with pytest.raises(ValueError, match="unlabeled"):
            evaluate(_Uniform(2), None, [UtteranceFeatures("u", "s", np.zeros((4, 3)))], context=0)

    def test_frame_error_range(self):
        with pytest.raises(ValueError):
            EvalReport("x", "h", "c", 0, "heldout", 1.5, 0.0)


def _report(name, corpus="c1", error=0.5):
    return EvalReport(name, f"hash-{name}", corpus, 0, "heldout", error, 1.0, 10,
                      series=[{"iteration": 0, "heldout_loss": 1.0}])


class TestReports:
    def test_single_row(self):
        lines = comparison_table([_report("a")]).splitlines()
        assert lines[0] == "# corpus c1"
        assert lines[1].split() == ["config", "frame_error", "cross_entropy", "num_params", "iterations",
                                    "config_hash"]
        assert len(lines) == 3

    def test_rows_sorted_by_name(self):
        lines = comparison_table([_report("b", error=0.1), _report("a", error=0.2)]).splitlines()
        assert [l.split()[0] for l in lines[2:]] == ["a", "b"]
        assert lines[2].split()[1] == "0.2000"

    def test_mixed_corpora_are_refused(self):
        with pytest.raises(IncomparableReports):
            comparison_table([_report("a"), _report("b", corpus="c2")])

    def test_empty(self):
        with pytest.raises(ValueError):
            comparison_table([])

    def test_plot_data_round_trip(self, tmp_path):
        series = {"fixed": [(0, 1.0 / 3.0), (1, 0.1 + 0.2)], "per_cg": [(0, 2.0), (1, np.float64(1e-17))]}
        write_plot_data(tmp_path / "f.csv", series)
        assert read_plot_data(tmp_path / "f.csv") == series

    def test_emit_writes_table_and_figures(self, tmp_path):
        table = emit_report([_report("a")], tmp_path, {"fig": {"s": [(0, 1.0)]}}, title="t")
        assert (tmp_path / "t.txt").read_text() == table
        assert read_plot_data(tmp_path / "fig.csv") == {"s": [(0, 1.0)]}


class TestConfig:
    def test_defaults_resolve(self):
        resolved = resolve_config({})
        assert resolved["network"]["builder"] == "cnn"

    def test_unknown_field_has_a_path(self):
        with pytest.raises(ConfigError) as info:
            resolve_config({"optimizer": {"hf": {"lamda": 1.0}}})
        assert ("optimizer.hf.lamda", "unknown field") in info.value.problems

    def test_every_problem_is_reported(self):
        with pytest.raises(ConfigError) as info:
            resolve_config({"seed": -1, "eval_split": "dev", "optimizer": {"kind": "adam"}})
        paths = {p for p, _ in info.value.problems}
        assert {"seed", "eval_split", "optimizer.kind"} <= paths

    def test_time_pool_overlap_rule(self):
        cfg = with_changes(tiny_config(), network={
            "conv": [{"maps": 4, "filter": [4, 3], "pool": {"kind": "max", "size": 2, "stride": 2, "axis": "time"}}]})
        with pytest.raises(ConfigError, match="overlapping"):
            resolve_config(cfg)

    def test_default_dropout_on_the_third_and_fourth_hidden_layers(self):
        from acoustic_cnn.harness import build_network_spec
        spec = build_network_spec(resolve_config({}))
        full = [l for l in spec.trunk if l.type == "full"]
        dropped = [i for i, l in enumerate(spec.trunk) if l.type == "dropout"]
        assert len(full) == 4 and len(dropped) == 2
        assert spec.trunk[dropped[0] - 2] is full[2] and spec.trunk[dropped[1] - 2] is full[3]

    def test_dropout_must_name_an_existing_layer(self):
        with pytest.raises(ConfigError, match="no fully connected hidden layer 3"):
            resolve_config(with_changes(tiny_config(), network={"dropout": {"3": 0.5}}))

    def test_overrides(self):
        cfg = with_overrides({"a": {"b": 1}}, {"a.c": 2, "d.e": 3})
        assert cfg == {"a": {"b": 1, "c": 2}, "d": {"e": 3}}


class TestRunExperiment:
    def test_artifacts_and_determinism(self, tmp_path):
        a = run_experiment(tiny_config(optimizer="hf"), root=tmp_path / "a")
        b = run_experiment(tiny_config(optimizer="hf"), root=tmp_path / "b")
        for name in ("report.txt", "loss_series.csv", "cg_traces.csv", "config.json"):
            assert (tmp_path / "a" / a.config_hash / name).read_bytes() == \
                (tmp_path / "b" / b.config_hash / name).read_bytes()
        directory = tmp_path / "a" / a.config_hash
        assert {"model.npz", "train.log"} <= set(os.listdir(directory))
        header = (directory / "loss_series.csv").read_text().splitlines()[0]
        assert header == "iteration,loss,heldout_loss,lambda,cg_iters"
        assert f"config_hash: {a.config_hash}" in (directory / "report.txt").read_text()

    def test_series_length_matches_iterations(self):
        report = run_experiment(tiny_config(optimizer="sgd+hf"), write=False)
        # two SGD epochs (or fewer after annealing) then two HF iterations
        hf_rows = [r for r in report.series if r["lambda"] is not None]
        assert len(hf_rows) == 2
        assert len(report.cg_traces) == 2
        assert 0.0 <= report.frame_error <= 1.0

    def test_seed_changes_the_run(self):
        a = run_experiment(tiny_config(seed=0), write=False)
        b = run_experiment(tiny_config(seed=1), write=False)
        assert a.config_hash != b.config_hash
        assert a.cross_entropy != b.cross_entropy

    def test_stage_failure_names_the_stage(self):
        cfg = with_changes(tiny_config(), features={"adapt": True, "gmm_components": 10000})
        with pytest.raises(ExperimentError) as info:
            run_experiment(cfg, write=False)
        assert info.value.stage == "features"


class TestDrivers:
    def test_table1_rows_in_order(self):
        names = [a["name"] for a in driver_arms("table1", tiny_config())]
        assert names == ["table1/1-mel", "table1/2-vtln", "table1/3-vtln+fmllr", "table1/4-vtln+fmllr+d+dd",
                         "table1/5-vtln+fmllr+d+dd+energy"]

    def test_table2_parameter_counts_match(self):
        cfg = with_changes(tiny_config(), corpus={"spectral_dim": 40}, features={"context": 5},
                           network={"hidden": [64, 64]})
        arms = driver_arms("table2", cfg)
        counts = [count_params(a) for a in arms]
        reference = counts[2]
        assert len(arms) == 4
        assert all(abs(c - reference) <= 0.02 * reference for c in counts)
        assert [len(a["network"]["conv"]) for a in arms] == [0, 1, 2, 3]

    def test_figure1_modes(self):
        arms = driver_arms("figure1", tiny_config())
        assert [a["optimizer"]["hf"]["dropout_mode"] for a in arms] == ["fixed_per_utterance", "per_cg_iteration"]
        assert all(a["optimizer"]["kind"] == "hf" for a in arms)

    def test_unknown_driver(self):
        with pytest.raises(ValueError):
            driver_arms("table99", tiny_config())

    def test_figure1_run_writes_both_series(self, tmp_path):
        cfg = with_changes(tiny_config(optimizer="hf"), network={"dropout": {"1": 0.5, "2": 0.5}})
        reports, table, directory = run_driver("figure1", cfg, root=tmp_path)
        data = read_plot_data(os.path.join(directory, "figure1_heldout.csv"))
        for r in reports:
            key = r.name.split("/", 1)[1]
            assert data[key] == [(row["iteration"], row["heldout_loss"]) for row in r.series]
            logged = (tmp_path / r.config_hash / "loss_series.csv").read_text().splitlines()[1:]
            assert [float(line.split(",")[2]) for line in logged] == [y for _, y in data[key]]
        assert len(table.splitlines()) == 4
