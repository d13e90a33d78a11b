import json
from dataclasses import replace

import numpy as np
import pytest

from vbcls import shiftgen
from vbcls.errors import ConfigurationError, EmptyDatasetError, FileSystemError
from vbcls.harness import (
    DataSource,
    ExperimentConfig,
    cross_domain_code_divergence,
    emit_report,
    evaluate,
    load_config,
    load_domains,
    read_report,
    run_ablation,
    run_leave_one_out,
    run_variant,
    summarize,
    unused_parameters,
    variant_settings,
)
from vbcls.model import LossWeights, TrainConfig, train


def small_config(**kw):
    base = ExperimentConfig(
        data=DataSource(n_domains=4, n_classes=3, dim=4, n_per_domain=120, seed=0),
        train=TrainConfig(epochs=3, batch_size=32, latent_dim=3, hidden=8),
        weights=LossWeights(beta=5.0),
    )
    return replace(base, **kw)


class FixedPredictor:
    """Returns the same probabilities for every row."""

    def __init__(self, row):
        self.row = np.asarray(row, dtype=float)

    def predict_proba(self, x, p_dom, p_pool):
        return np.tile(self.row, (len(x), 1))


class PerfectPredictor:
    def __init__(self, labels, k):
        self.labels, self.k = labels, k

    def predict_proba(self, x, p_dom, p_pool):
        return np.eye(self.k)[self.labels]


def labelled(labels):
    labels = np.asarray(labels)
    return shiftgen.DomainDataset(np.zeros((labels.size, 2)), labels)


# -- evaluation -------------------------------------------------------------

def test_evaluate_perfect():
    y = np.array([0, 1, 2, 2])
    res = evaluate(PerfectPredictor(y, 3), labelled(y), None, None)
    assert res.accuracy == 1.0 and res.per_class_accuracy == [1.0, 1.0, 1.0]


def test_evaluate_constant_predictor():
    y = np.array([0, 0, 1, 2])
    res = evaluate(FixedPredictor([0.2, 0.5, 0.3]), labelled(y), None, None)
    assert res.accuracy == 0.25
    assert res.per_class_accuracy == [0.0, 1.0, 0.0]
    assert res.confusion.sum() == 4 and res.confusion[:, 1].sum() == 4


def test_evaluate_ties_go_to_lowest_index():
    res = evaluate(FixedPredictor([0.5, 0.5]), labelled([0, 1]), None, None)
    assert res.confusion[:, 0].sum() == 2


def test_evaluate_missing_class_has_no_accuracy():
    res = evaluate(FixedPredictor([1.0, 0.0, 0.0]), labelled([0, 0]), None, None)
    assert res.per_class_accuracy == [1.0, None, None]


def test_evaluate_empty():
    with pytest.raises(EmptyDatasetError):
        evaluate(FixedPredictor([1.0]), labelled(np.zeros(0, dtype=int)), None, None)


def test_summarize_population_sd():
    mean, sd = summarize([0.8, 0.9])
    assert mean == pytest.approx(0.85) and sd == pytest.approx(0.05)
    assert summarize([0.7]) == (0.7, 0.0)


# -- variants ---------------------------------------------------------------

def test_variant_settings_switchboard():
    cfg, w = TrainConfig(), LossWeights()
    assert variant_settings("vbcls", cfg, w) == (cfg, w)
    assert not variant_settings("vbcls_no_pa", cfg, w)[0].posterior_alignment
    assert variant_settings("vbcls_no_lyhat", cfg, w)[1].theta == 0.0
    assert variant_settings("uniform_yhat", cfg, w)[0].encoder_label_source == "uniform"
    assert variant_settings("erm", cfg, w)[0].label_prior_only
    with pytest.raises(ConfigurationError):
        variant_settings("bogus", cfg, w)


def test_unused_parameters():
    assert unused_parameters("vbcls") == ()
    assert set(unused_parameters("erm")) >= {"alpha", "beta", "theta"}
    with pytest.raises(ConfigurationError):
        unused_parameters("bogus")


def toy_fold(n=120, seed=0, scenario="conditional_and_label", severity=1.0):
    specs = shiftgen.make_benchmark(scenario, 3, 3, 4, n, severity, seed)
    domains = [shiftgen.generate_domain(s, i) for i, s in enumerate(specs)]
    return domains[:2], domains[2]


@pytest.mark.parametrize("variant", ["erm", "uniform_yhat", "vbcls_no_lyhat"])
def test_unused_parameters_do_not_change_results(variant):
    sources, target = toy_fold()
    cfg = small_config(variant=variant)
    alt_weights = replace(cfg.weights, theta=7.0)
    if variant == "erm":
        alt_weights = LossWeights(alpha=3.0, beta=0.1, theta=7.0)
    a = run_variant(variant, sources, target, cfg, 3)
    b = run_variant(variant, sources, target, replace(cfg, weights=alt_weights), 3)
    assert [r.accuracy for r in a] == [r.accuracy for r in b]


def test_no_lyhat_history_has_no_lyhat_contribution():
    sources, target = toy_fold()
    (res,) = run_variant("vbcls_no_lyhat", sources, target, small_config(), 3)
    w = small_config().weights
    for rec in res.history:
        b = rec.losses
        assert b.total_f == pytest.approx(b.l1 + w.alpha * b.l2 + w.beta * b.l_ce2, rel=1e-12)


def test_uniform_yhat_history_has_zero_lyhat():
    sources, target = toy_fold()
    (res,) = run_variant("uniform_yhat", sources, target, small_config(), 3)
    assert all(rec.losses.l_yhat == 0.0 for rec in res.history)


def test_no_pa_trains_identically_when_priors_match():
    # covariate_only keeps one prior everywhere, so alignment is the identity
    sources, _ = toy_fold(scenario="covariate_only", severity=0.5)
    priors = [np.bincount(s.labels, minlength=3) / len(s) for s in sources]
    assert np.array_equal(priors[0], priors[1])
    cfg = small_config()
    a, _ = train(sources, cfg.train, cfg.weights)
    b, _ = train(sources, *variant_settings("vbcls_no_pa", cfg.train, cfg.weights))
    for name in a.tensors:
        np.testing.assert_allclose(a[name].data, b[name].data, rtol=1e-12, atol=1e-14)


def test_divergence_is_recorded_not_raised():
    sources, target = toy_fold()
    cfg = small_config(train=TrainConfig(epochs=3, batch_size=32, lr=1e4, momentum=0.0), n_seeds=2)
    results = run_variant("vbcls", sources, target, cfg, 3)
    assert all(r.accuracy is None and r.error for r in results)


@pytest.mark.parametrize("mode", ["pooled", "oracle", "refined"])
def test_prior_modes_produce_valid_priors(mode):
    sources, target = toy_fold()
    (res,) = run_variant("vbcls", sources, target, small_config(target_prior_mode=mode), 3)
    assert sum(res.target_prior) == pytest.approx(1.0)
    if mode == "oracle":
        np.testing.assert_allclose(res.target_prior, np.bincount(target.labels, minlength=3) / len(target))


def test_covariate_only_no_severity_near_bayes():
    specs = shiftgen.make_benchmark("covariate_only", 3, 3, 4, 400, 0.0, 3, class_sep=3.0)
    domains = [shiftgen.generate_domain(s, i) for i, s in enumerate(specs)]
    cfg = small_config(train=TrainConfig(epochs=15, batch_size=32, latent_dim=3, hidden=16))
    (res,) = run_variant("vbcls", domains[:2], domains[2], cfg, 3)
    bayes = np.mean(shiftgen.bayes_posteriors(specs[2], domains[2].features).argmax(axis=1)
                    == domains[2].labels)
    assert res.accuracy >= 0.9 * bayes


# -- leave-one-domain-out ---------------------------------------------------

@pytest.fixture(scope="module")
def loo_report():
    return run_leave_one_out(small_config(n_seeds=2))


def test_loo_covers_every_target(loo_report):
    assert [t.target_index for t in loo_report.targets] == [0, 1, 2, 3]
    for t in loo_report.targets:
        assert len(t.sources) == 3 and t.target not in t.sources
        assert len(t.accuracies) == 2 and 0 <= t.mean <= 1 and t.sd >= 0
    assert len(loo_report.histories) == 8
    assert len(loo_report.label_shift_kl) == 12


def test_loo_report_bit_identical(tmp_path, loo_report):
    emit_report(loo_report, tmp_path / "a")
    emit_report(run_leave_one_out(small_config(n_seeds=2)), tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()


def test_report_files_and_round_trip(tmp_path, loo_report):
    emit_report(loo_report, tmp_path)
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert rows[0] == "target,variant,mean,sd,n_seeds" and len(rows) == 5
    history = sorted(tmp_path.glob("history_*.csv"))
    assert len(history) == 8
    assert history[0].read_text().splitlines()[0] == "epoch,L1,L2,L_CE1,L_CE2,L_yhat,total_f,train_acc"
    assert "duration_s" not in json.loads((tmp_path / "report.json").read_text())
    assert read_report(tmp_path) == loo_report


def test_read_report_missing(tmp_path):
    with pytest.raises(FileSystemError):
        read_report(tmp_path / "absent")


def test_loo_needs_three_domains():
    with pytest.raises(ConfigurationError):
        run_leave_one_out(small_config(data=DataSource(n_domains=2, dim=4, n_per_domain=60)))


def test_loo_target_subset_and_bad_index():
    report = run_leave_one_out(small_config(targets=[1]))
    assert [t.target_index for t in report.targets] == [1]
    with pytest.raises(ConfigurationError):
        run_leave_one_out(small_config(targets=[9]))


def test_ablation_runs_each_variant():
    reports = run_ablation(small_config(targets=[0]), ["vbcls", "erm"])
    assert set(reports) == {"vbcls", "erm"}
    assert reports["erm"].variant == "erm"


# -- config -----------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = small_config(targets=[0, 2])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg


def test_config_errors(tmp_path):
    path = tmp_path / "c.json"
    for text in ('{"varient": "vbcls"}', '{"train": {"epoch": 3}}', '{"variant": "x"}',
                 "[1]", "{not json", '{"data": {"scenario": "odd"}}', '{"n_seeds": 0}'):
        path.write_text(text)
        with pytest.raises(ConfigurationError):
            load_config(path)
    with pytest.raises(FileSystemError):
        load_config(tmp_path / "missing.json")


def test_config_relative_csv_paths(tmp_path):
    sub = tmp_path / "data"
    sub.mkdir()
    specs = shiftgen.make_benchmark("label_shift", 3, 2, 3, 30, 1.0, 0)
    for i, s in enumerate(specs):
        shiftgen.write_feature_csv(shiftgen.generate_domain(s, i), sub / f"d{i}.csv")
    (sub / "c.json").write_text(json.dumps({"data": {"csv": ["d0.csv", "d1.csv", "d2.csv"], "n_classes": 2}}))
    cfg = load_config(sub / "c.json")
    domains, k = load_domains(cfg)
    assert len(domains) == 3 and k == 2
    assert [d.domain_id for d in domains] == [0, 1, 2]


# -- alignment diagnostics --------------------------------------------------

def test_code_divergence_shapes_and_errors():
    from vbcls.model import Dims, init_params

    params = init_params(Dims(4, 3, 2, 3, 8), np.random.default_rng(0))
    sources, _ = toy_fold()
    for fit in ("aggregate", "means"):
        div = cross_domain_code_divergence(params, sources, 3, fit=fit)
        assert len(div) == 3 and all(v >= 0 for v in div)
    with pytest.raises(ConfigurationError):
        cross_domain_code_divergence(params, sources, 3, fit="median")
