import json
import struct

import numpy as np
import pytest

from vbcls import autodiff as ad
from vbcls import shiftgen
from vbcls.distributions import DiagGaussian, kl_diag
from vbcls.errors import (
    ConfigurationError,
    CorruptCheckpointError,
    DivergenceError,
    InvalidShapeError,
    UnknownDomainError,
)
from vbcls.labelshift import LabelDistribution, estimate_from_counts, pooled, posterior_align
from vbcls.model import (
    Batch,
    Dims,
    LossWeights,
    TrainConfig,
    VBCLSPredictor,
    classify,
    compute_losses,
    decode,
    encode,
    forward_terms,
    group_of,
    init_params,
    label_prior,
    load_checkpoint,
    predict,
    read_checkpoint,
    save_checkpoint,
    train,
)

DIMS = Dims(features=6, classes=3, domains=2, latent=4, hidden=8)
COMPONENTS = ("l1", "l2", "l_ce1", "l_ce2", "l_yhat")


def random_batch(seed, n=10, dims=DIMS):
    rng = np.random.default_rng(seed)
    params = init_params(dims, rng)
    batch = Batch(rng.standard_normal((n, dims.features)), rng.integers(0, dims.classes, n),
                  np.arange(n) % dims.domains)
    priors = [LabelDistribution.normalized(rng.random(dims.classes) + 0.2) for _ in range(dims.domains)]
    pool = LabelDistribution.normalized(rng.random(dims.classes) + 0.2)
    noise = rng.standard_normal((n, dims.latent))
    return params, batch, priors, pool, noise


def terms_fn(params, batch, priors, pool, noise, component, route=False, **opts):
    opts.setdefault("smoothing", 0.1)
    return lambda: getattr(forward_terms(batch, params, LossWeights(), priors, pool, noise,
                                         route=route, **opts), component)


def grads(fn, params):
    return {n: g.copy() for n, g in ad.analytic_gradients(fn, params.tensors).items()}


@pytest.fixture(scope="module")
def benchmark():
    specs = shiftgen.make_benchmark("conditional_and_label", 4, 3, 10, 2000, 1.0, 0)
    data = [shiftgen.generate_domain(s, i) for i, s in enumerate(specs)]
    return specs, data


@pytest.fixture(scope="module")
def trained(benchmark):
    _, data = benchmark
    sources = [shiftgen.split(d, 0.7, j)[0] for j, d in enumerate(data[:3])]
    runs = [train(sources, TrainConfig(seed=s), LossWeights(beta=5.0)) for s in range(5)]
    return sources, runs


# -- architecture -----------------------------------------------------------

def test_layer_shapes_consistent():
    params = init_params(DIMS, np.random.default_rng(0))
    params.validate()
    assert len([n for n in params.tensors if n.startswith("decoder") and n.endswith("W1")]) == DIMS.domains
    assert params["encoder.W1"].shape == (DIMS.features + DIMS.classes, DIMS.hidden)
    assert params["encoder.W2"].shape == (DIMS.hidden, 2 * DIMS.latent)
    assert params["decoder1.W1"].shape == (DIMS.latent + DIMS.classes, DIMS.hidden)
    assert {group_of(n) for n in params.tensors} == {"encoder", "decoder", "label_prior", "classifier"}


def test_glorot_bounds_and_zero_biases():
    params = init_params(DIMS, np.random.default_rng(0))
    for name, t in params.tensors.items():
        if name.endswith(("b1", "b2")):
            assert not t.data.any()
        else:
            assert np.abs(t.data).max() <= np.sqrt(6 / sum(t.shape))


def test_encode_deterministic_and_shaped():
    params = init_params(DIMS, np.random.default_rng(1))
    x, y = np.ones(6), np.array([0.2, 0.3, 0.5])
    a, b = encode(x, y, params), encode(x, y, params)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.log_var, b.log_var)
    assert a.mean.shape == a.log_var.shape == (4,)


def test_encode_dimension_mismatch():
    params = init_params(DIMS, np.random.default_rng(1))
    with pytest.raises(InvalidShapeError):
        encode(np.ones(5), np.ones(3) / 3, params)


def test_decode_shape_and_unknown_domain():
    params = init_params(DIMS, np.random.default_rng(2))
    assert decode(np.zeros(4), np.ones(3) / 3, 1, params).shape == (6,)
    with pytest.raises(UnknownDomainError):
        decode(np.zeros(4), np.ones(3) / 3, 2, params)


def test_label_prior_normalized_and_symmetric():
    params = init_params(DIMS, np.random.default_rng(3))
    p = label_prior(np.random.default_rng(0).standard_normal((5, 6)), params)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(label_prior(np.zeros(6), params), np.full(3, 1 / 3), atol=1e-15)


def test_classify_normalized_and_deterministic():
    params = init_params(DIMS, np.random.default_rng(4))
    z = np.random.default_rng(1).standard_normal((3, 4))
    p = classify(z, params)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.array_equal(p, classify(z, params))


# -- losses -----------------------------------------------------------------

def test_only_beta_weight():
    params, batch, priors, pool, noise = random_batch(0)
    b = compute_losses(batch, params, LossWeights(alpha=0, beta=2.5, theta=0), priors, pool, noise)
    assert b.total_f == pytest.approx(b.l1 + 2.5 * b.l_ce2, abs=1e-12)


def test_only_beta_weight_with_zero_kl():
    params, batch, priors, pool, noise = random_batch(0)
    for net in ("encoder",):
        params[f"{net}.W2"].data[:] = 0.0
    b = compute_losses(batch, params, LossWeights(alpha=0, beta=2.5, theta=0), priors, pool, noise)
    assert b.l1 == 0.0
    assert b.total_f == pytest.approx(2.5 * b.l_ce2, abs=1e-15)


def test_standard_normal_posterior_has_zero_kl():
    params, batch, priors, pool, noise = random_batch(1, n=1)
    params["encoder.W2"].data[:] = 0.0
    assert compute_losses(batch, params, LossWeights(), priors, pool, noise).l1 == 0.0


def test_components_nonnegative_and_finite():
    for seed in range(5):
        params, batch, priors, pool, noise = random_batch(seed)
        b = compute_losses(batch, params, LossWeights(), priors, pool, noise)
        assert b.is_finite()
        assert min(b.l1, b.l2, b.l_ce1, b.l_ce2, b.l_yhat) >= 0.0


def test_missing_prior_for_present_domain():
    params, batch, priors, pool, noise = random_batch(0)
    with pytest.raises(ConfigurationError):
        compute_losses(batch, params, LossWeights(), priors[:1], pool, noise)


def test_losses_permutation_invariant():
    params, batch, priors, pool, noise = random_batch(2)
    perm = np.random.default_rng(0).permutation(len(batch))
    shuffled = Batch(batch.x[perm], batch.labels[perm], batch.domains[perm])
    a = compute_losses(batch, params, LossWeights(), priors, pool, noise)
    b = compute_losses(shuffled, params, LossWeights(), priors, pool, noise[perm])
    np.testing.assert_allclose(a.values(), b.values(), rtol=1e-12)


def test_alignment_enters_classifier_loss():
    params, batch, priors, pool, noise = random_batch(3)
    cfg = TrainConfig()
    from dataclasses import replace
    aligned = compute_losses(batch, params, LossWeights(), priors, pool, noise, cfg)
    plain = compute_losses(batch, params, LossWeights(), priors, pool, noise,
                           replace(cfg, posterior_alignment=False))
    assert aligned.l_ce2 != plain.l_ce2
    assert aligned.l1 == plain.l1 and aligned.l2 == plain.l2


@pytest.mark.parametrize("component", ["l1", "l2", "l_ce1", "l_ce2", "total_f", "objective"])
@pytest.mark.parametrize("seed", range(5))
def test_component_gradients_match_finite_differences(component, seed):
    params, batch, priors, pool, noise = random_batch(seed)
    fn = terms_fn(params, batch, priors, pool, noise, component, label_source="pseudo")
    assert ad.finite_diff_check(fn, params.tensors) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_lyhat_gradients_match_finite_differences(seed):
    params, batch, priors, pool, noise = random_batch(seed)
    fn = terms_fn(params, batch, priors, pool, noise, "l_yhat", label_source="pseudo")
    assert ad.finite_diff_check(fn, params.tensors) <= 1e-4
    assert not grads(fn, params)["encoder.b2"][:DIMS.latent].any()


@pytest.mark.parametrize("source", ["ground_truth", "pseudo"])
def test_lyhat_equals_two_pass_kl(source):
    params, batch, priors, pool, noise = random_batch(4)
    with ad.no_grad():
        got = forward_terms(batch, params, LossWeights(), priors, pool, noise, label_source=source).l_yhat.item()
    y_hat = label_prior(batch.x, params)
    q_true = encode(batch.x, batch.one_hot(3), params)
    q_hat = encode(batch.x, y_hat, params)
    assert got == pytest.approx(float(np.mean(kl_diag(q_true, q_hat))), rel=1e-12)


# -- gradient routing -------------------------------------------------------

def routed_grads(seed, **opts):
    params, batch, priors, pool, noise = random_batch(seed)
    fn = terms_fn(params, batch, priors, pool, noise, "objective", route=True, **opts)
    return params, batch, priors, pool, noise, grads(fn, params)


@pytest.mark.parametrize("source", ["ground_truth", "pseudo"])
def test_routing_each_network_sees_its_own_loss(source):
    params, batch, priors, pool, noise, g = routed_grads(0, label_source=source)
    own = {"label_prior": "l_ce1", "decoder": "l2", "classifier": "l_ce2"}
    for group, component in own.items():
        ref = grads(terms_fn(params, batch, priors, pool, noise, component, route=True,
                             label_source=source), params)
        for name in params.tensors:
            if group_of(name) == group:
                np.testing.assert_allclose(g[name], ref[name], rtol=1e-12, atol=1e-15)


def test_routing_encoder_sees_weighted_objective():
    params, batch, priors, pool, noise, g = routed_grads(1, label_source="pseudo")
    ref = grads(terms_fn(params, batch, priors, pool, noise, "total_f", label_source="pseudo"), params)
    for name in params.group("encoder"):
        np.testing.assert_allclose(g[name], ref[name], rtol=1e-10, atol=1e-14)


def test_routing_pseudo_labels_do_not_reach_label_prior():
    params, batch, priors, pool, noise, g = routed_grads(2, label_source="pseudo")
    ref = grads(terms_fn(params, batch, priors, pool, noise, "l_ce1", route=True), params)
    for name in params.group("label_prior"):
        np.testing.assert_array_equal(g[name], ref[name])
    unrouted = grads(terms_fn(params, batch, priors, pool, noise, "objective", label_source="pseudo"), params)
    assert not np.allclose(unrouted["label_prior.W1"], ref["label_prior.W1"])


def test_other_decoder_branches_get_no_gradient():
    params, batch, priors, pool, noise = random_batch(3)
    only0 = Batch(batch.x, batch.labels, np.zeros(len(batch), dtype=np.int64))
    g = grads(terms_fn(params, only0, priors, pool, noise, "l2"), params)
    for name in params.tensors:
        if name.startswith("decoder1."):
            assert not g[name].any()
    assert g["decoder0.W2"].any()


# -- training ---------------------------------------------------------------

def small_sources(seed=0, n=150):
    specs = shiftgen.make_benchmark("conditional_and_label", 2, 3, 4, n, 1.0, seed)
    return [shiftgen.generate_domain(s, i) for i, s in enumerate(specs)]


def test_train_bit_identical():
    cfg = TrainConfig(epochs=3, batch_size=32, seed=4)
    pa, ha = train(small_sources(), cfg)
    pb, hb = train(small_sources(), cfg)
    assert [r.losses.values() for r in ha] == [r.losses.values() for r in hb]
    assert all(np.array_equal(pa[n].data, pb[n].data) for n in pa.tensors)


def test_train_needs_two_sources_with_matching_dims():
    a, b = small_sources()
    with pytest.raises(ConfigurationError):
        train([a], TrainConfig(epochs=1))
    c = shiftgen.DomainDataset(np.zeros((5, 7)), np.zeros(5, dtype=int))
    with pytest.raises(ConfigurationError):
        train([a, c], TrainConfig(epochs=1))


def test_train_divergence_reports_epoch_and_batch():
    with pytest.raises(DivergenceError) as info:
        train(small_sources(), TrainConfig(epochs=5, lr=1e4, momentum=0.0, seed=0))
    assert info.value.epoch is not None and info.value.batch is not None


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(lr=0.0), dict(lr_drop_fraction=0.0), dict(kl_formula="x")):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)
    assert TrainConfig(epochs=30).drop_epoch() == 24


def test_zero_weights_collapse_to_prior():
    _, history = train(small_sources(n=300), TrainConfig(epochs=30, batch_size=64, lr=1e-2, seed=0),
                       LossWeights(alpha=0.0, beta=0.0, theta=0.0))
    assert history[-1].losses.l1 < 0.1
    assert history[-1].losses.total_f == history[-1].losses.l1


def test_decoder_reconstructs_constant_features():
    rng = np.random.default_rng(0)
    const = np.array([0.5, -1.0, 2.0])
    sources = [shiftgen.DomainDataset(np.tile(const, (64, 1)), rng.integers(0, 2, 64), i) for i in (0, 1)]
    params, _ = train(sources, TrainConfig(epochs=150, batch_size=32, lr=0.05, weight_decay=0.0, seed=0))
    z = encode(sources[0].features, np.eye(2)[sources[0].labels], params).mean
    recon = decode(z, np.eye(2)[sources[0].labels], 0, params)
    assert np.abs(recon - const).max() < 1e-2


def test_label_prior_learns_separable_data():
    rng = np.random.default_rng(1)

    def domain(i):
        y = rng.integers(0, 2, 300)
        x = rng.standard_normal((300, 2)) * 0.5 + np.where(y[:, None] == 1, 2.0, -2.0)
        return shiftgen.DomainDataset(x, y, i)

    sources = [domain(0), domain(1)]
    params, _ = train(sources, TrainConfig(epochs=10, batch_size=32, seed=0))
    test = domain(2)
    assert np.mean(label_prior(test.features, params).argmax(axis=1) == test.labels) >= 0.95


def test_training_reduces_total_objective(trained):
    _, runs = trained
    for _, history in runs:
        assert history[-1].losses.total_f < history[0].losses.total_f


def test_encoder_uses_label_input(trained):
    sources, runs = trained
    params, _ = runs[0]
    x = sources[0].features[:20]
    a = encode(x, np.tile([1.0, 0, 0], (20, 1)), params).mean
    b = encode(x, np.tile([0, 1.0, 0], (20, 1)), params).mean
    assert np.linalg.norm(a - b) > 0


def test_trained_pipeline_beats_chance(benchmark, trained):
    _, data = benchmark
    sources, runs = trained
    pool = pooled(sources, 3)
    target = data[3]
    prior = estimate_from_counts(target.labels, 3)
    accs = [np.mean(predict(target.features, p, prior, pool).argmax(axis=1) == target.labels) for p, _ in runs]
    assert np.mean(accs) > 1 / 3 + 0.1


# -- prediction -------------------------------------------------------------

def test_predict_identity_alignment():
    params = init_params(DIMS, np.random.default_rng(5))
    x = np.random.default_rng(2).standard_normal((4, 6))
    p = LabelDistribution([0.2, 0.3, 0.5])
    q = encode(x, label_prior(x, params), params)
    np.testing.assert_allclose(predict(x, params, p, p), classify(q.mean, params), atol=1e-15)
    assert np.array_equal(predict(x, params, p, p), predict(x, params, p, p))


def test_predict_prior_mismatch():
    params = init_params(DIMS, np.random.default_rng(5))
    with pytest.raises(ConfigurationError):
        predict(np.zeros(6), params, LabelDistribution.uniform(2), LabelDistribution.uniform(3))


def test_predict_does_not_touch_decoders():
    params = init_params(DIMS, np.random.default_rng(6))
    x = np.random.default_rng(3).standard_normal((4, 6))
    p = LabelDistribution.uniform(3)
    before = predict(x, params, p, p)
    for name in params.group("decoder"):
        params[name].data[:] = np.nan
    assert np.array_equal(predict(x, params, p, p), before)


def test_alignment_helps_on_skewed_target(benchmark, trained):
    specs, _ = benchmark
    sources, runs = trained
    t = specs[3]
    target = shiftgen.generate_domain(shiftgen.DomainSpec("t", [0.7, 0.2, 0.1], t.class_means,
                                                          t.class_scales, 2000, t.seed))
    pool, truth = pooled(sources, 3), LabelDistribution([0.7, 0.2, 0.1])
    aligned, plain = [], []
    for params, _ in runs:
        model = VBCLSPredictor(params)
        base = model.base_probs(target.features)
        aligned.append(np.mean(posterior_align(base, truth, pool).argmax(axis=1) == target.labels))
        plain.append(np.mean(base.argmax(axis=1) == target.labels))
    assert np.mean(aligned) >= np.mean(plain)


# -- checkpoints ------------------------------------------------------------

def perturbed_params(seed=0):
    rng = np.random.default_rng(seed)
    params = init_params(DIMS, rng)
    for t in params.tensors.values():
        t.data += rng.standard_normal(t.shape)
    return params


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params, cfg = perturbed_params(), TrainConfig(latent_dim=4, hidden=8, seed=3)
    save_checkpoint(params, cfg, tmp_path / "m.ckpt", meta={"note": "x"})
    back, back_cfg = load_checkpoint(tmp_path / "m.ckpt")
    assert back_cfg == cfg and back.dims == params.dims
    for name, t in params.tensors.items():
        assert back[name].data.tobytes() == t.data.tobytes()
    assert read_checkpoint(tmp_path / "m.ckpt").meta == {"note": "x"}


def split_file(path):
    raw = path.read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, 8)
    return json.loads(raw[12:12 + hlen]), raw[12 + hlen:]


def write_file(path, header, payload, magic=b"VBCLSCK1"):
    text = json.dumps(header).encode()
    path.write_bytes(magic + struct.pack("<I", len(text)) + text + payload)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(perturbed_params(), TrainConfig(), path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(perturbed_params(), TrainConfig(), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(perturbed_params(), TrainConfig(), path)
    header, payload = split_file(path)
    header["arrays"][0]["shape"] = [header["arrays"][0]["shape"][1], header["arrays"][0]["shape"][0]]
    write_file(path, header, payload)
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


@pytest.mark.parametrize("seed", range(5))
def test_checkpoint_permuted_header_loads(tmp_path, seed):
    params = perturbed_params(seed)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, TrainConfig(), path)
    header, payload = split_file(path)
    rng = np.random.default_rng(seed)
    header["arrays"] = [header["arrays"][i] for i in rng.permutation(len(header["arrays"]))]
    write_file(path, header, payload)
    back, _ = load_checkpoint(path)
    for name, t in params.tensors.items():
        assert np.array_equal(back[name].data, t.data)


@pytest.mark.parametrize("seed", range(20))
def test_checkpoint_fuzzed_bytes_never_crash(tmp_path, seed):
    path = tmp_path / "m.ckpt"
    save_checkpoint(perturbed_params(), TrainConfig(), path)
    raw = bytearray(path.read_bytes())
    rng = np.random.default_rng(seed)
    for pos in rng.integers(0, 12 + 200, size=3):
        raw[pos] = int(rng.integers(0, 256))
    path.write_bytes(bytes(raw))
    try:
        load_checkpoint(path)
    except CorruptCheckpointError:
        pass


def test_diag_gaussian_shape_check():
    with pytest.raises(InvalidShapeError):
        DiagGaussian(np.zeros(2), np.zeros(3))
