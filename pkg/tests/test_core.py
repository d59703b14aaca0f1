import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from dhag import autograd as ag
from dhag import core
from dhag.autograd import Tensor
from dhag.core import ArchConfig, DhagModel, TrainConfig
from dhag.data import synthetic_two_gaussian
from dhag.exceptions import ConfigError, DimensionError, NonFiniteError

SMALL = ArchConfig(latent_dim=8, encoder_hidden=(6,), discriminator_hidden=(5,), perturbator_channels=(6,))


def small_model(d=4, n_pert=2, mode="latent", seed=0, arch=SMALL):
    return DhagModel(d, n_pert, arch, mode, np.random.default_rng(seed))


def test_perturbation_shapes():
    model = small_model(d=6, n_pert=3, arch=ArchConfig())
    eps = core.generate_perturbations(model, np.zeros((5, 6)), np.random.default_rng(0))
    assert eps.shape == (3, 5, 32)
    feat = small_model(d=6, n_pert=3, mode="feature")
    assert core.generate_perturbations(feat, np.zeros((5, 6)), np.random.default_rng(0)).shape == (3, 5, 6)


def test_perturbator_input_gets_noise_channel():
    model = small_model(d=6)
    assert model.perturbators[0].convs[0].kernels.shape[1] == 7


def test_perturbations_seeded():
    model = small_model()
    x = np.random.default_rng(1).normal(size=(5, 4))
    a = core.generate_perturbations(model, x, np.random.default_rng(9)).data
    b = core.generate_perturbations(model, x, np.random.default_rng(9)).data
    assert np.array_equal(a, b)


def test_zero_head_gives_zero_perturbations():
    model = small_model()
    for g in model.perturbators:
        g.head.weight.data = np.zeros_like(g.head.weight.data)
    eps = core.generate_perturbations(model, np.ones((5, 4)), np.random.default_rng(0))
    assert not eps.data.any()


def test_pseudo_label_examples():
    assert core.labels_from_norms([3.0, 1.0, 2.0], 1).tolist() == [[1, 0, 1]]
    assert core.labels_from_norms([3.0, 1.0, 2.0], 0).tolist() == [[1, 1, 1]]
    assert core.labels_from_norms([3.0, 1.0, 2.0], 3).tolist() == [[0, 0, 0]]
    assert core.labels_from_norms([1.0, 1.0, 1.0], 2).tolist() == [[0, 0, 1]]
    with pytest.raises(ConfigError):
        core.labels_from_norms([1.0, 2.0], 3)


def test_pseudo_labels_from_eps():
    eps = Tensor(np.array([[[3.0, 0.0], [1.0, 0.0], [0.0, 2.0]]]))
    assert core.assign_pseudo_labels(eps, 1).tolist() == [[1, 0, 1]]


def test_pseudo_labels_match_sort_oracle_on_200_norms():
    rng = np.random.default_rng(5)
    norms = rng.integers(0, 40, size=(3, 200)).astype(float)  # plenty of ties
    for k in (0, 1, 50, 199, 200):
        assert np.array_equal(core.labels_from_norms(norms, k), oracles.pseudo_labels(norms, k))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_pseudo_label_partition(data):
    m = data.draw(st.integers(1, 40))
    k = data.draw(st.integers(0, m))
    norms = data.draw(arrays(np.float64, (2, m), elements=st.sampled_from([0.0, 0.5, 1.0, 2.0, 3.5])))
    labels = core.labels_from_norms(norms, k)
    for row, lab in zip(norms, labels):
        assert int(np.sum(lab == 0)) == k
        if 0 < k < m:
            assert row[lab == 0].max() <= row[lab == 1].min()


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_pseudo_labels_follow_row_permutations(data):
    m = data.draw(st.integers(1, 30))
    k = data.draw(st.integers(0, m))
    # distinct norms: with ties the index tie-break is order dependent by design
    norms = np.array([data.draw(st.permutations(list(range(m))))], dtype=float)
    perm = np.array(data.draw(st.permutations(list(range(m)))))
    assert np.array_equal(core.labels_from_norms(norms[:, perm], k), core.labels_from_norms(norms, k)[:, perm])


def toy_batch(model, m=3, seed=1):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, model.n_features))
    noise = rng.standard_normal((model.n_perturbators, m))
    return x, noise


@pytest.mark.parametrize("mode", ["latent", "feature"])
def test_loss_ce_matches_scalar_recomputation(mode):
    model = small_model(n_pert=3, mode=mode)
    x, noise = toy_batch(model)
    eps = model.perturb(Tensor(x), noise)
    labels = core.assign_pseudo_labels(eps, 1)
    got = core.loss_ce(model, x, eps, labels).item()
    assert abs(got - oracles.loss_ce(model, x, eps.data, labels)) < 1e-12


def test_loss_ce_zero_perturbation_collapses_to_clean_term():
    model = small_model()
    x, _ = toy_batch(model)
    eps = Tensor(np.zeros((2, 3, 8)))
    got = core.loss_ce(model, x, eps, np.zeros((2, 3), dtype=int)).item()
    clean = np.mean([oracles.bce(oracles.score_row(model, r), 0) for r in x])
    assert abs(got - 2 * clean) < 1e-12


def test_loss_ce_uniform_discriminator():
    model = small_model()
    last = model.discriminator.layers[-1]
    last.weight.data = np.zeros_like(last.weight.data)
    x, noise = toy_batch(model)
    eps = model.perturb(Tensor(x), noise)
    labels = core.assign_pseudo_labels(eps, 1)
    assert core.loss_ce(model, x, eps, labels).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_loss_norm():
    assert core.loss_norm(Tensor(np.zeros((2, 3, 4)))).item() == 0.0
    assert core.loss_norm(Tensor([[[3.0, 4.0]]])).item() == 5.0
    eps = np.random.default_rng(2).normal(size=(3, 7, 5))
    assert abs(core.loss_norm(Tensor(eps)).item() - oracles.loss_norm(eps)) < 1e-12


def test_loss_div():
    same = np.broadcast_to(np.array([1.0, 2.0, -1.0]), (3, 4, 3)).copy()
    assert core.loss_div(Tensor(same)).item() == pytest.approx(1.0, abs=1e-12)
    orth = np.zeros((2, 3, 2))
    orth[0, :, 0] = [1.0, 2.0, 3.0]
    orth[1, :, 1] = [4.0, -1.0, 2.0]
    assert core.loss_div(Tensor(orth)).item() == 0.0
    eps = np.random.default_rng(3).normal(size=(3, 6, 5))
    assert abs(core.loss_div(Tensor(eps)).item() - oracles.loss_div(eps)) < 1e-12


def test_loss_div_single_perturbator():
    with pytest.warns(RuntimeWarning):
        assert core.loss_div(Tensor(np.ones((1, 3, 2)))).item() == 0.0


def test_loss_total():
    one, two, half = Tensor(1.0), Tensor(2.0), Tensor(0.5)
    assert core.loss_total(one, two, half, 0.0, 0.0).item() == 1.0
    assert core.loss_total(one, two, half, 0.1, 0.01).item() == pytest.approx(1.205, abs=1e-15)


def test_semi_sup_loss():
    model = small_model()
    x = np.random.default_rng(4).normal(size=(2, 4))
    assert abs(core.semi_sup_loss(model, x).item() - oracles.semi_sup(model, x)) < 1e-12
    last = model.discriminator.layers[-1]
    last.weight.data = np.zeros_like(last.weight.data)
    assert core.semi_sup_loss(model, x).item() == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ConfigError):
        core.semi_sup_loss(model, np.zeros((0, 4)))


def toy_gradient_errors(h=1e-6, l_aug=False, adversarial=False):
    model = small_model(n_pert=2)
    config = TrainConfig(n_perturbators=2, n_augment=1, batch_size=3, adversarial_perturbators=adversarial)
    x, noise = toy_batch(model)
    x_anom = np.random.default_rng(7).normal(size=(2, 4)) if l_aug else None

    def objective(_):
        total, _parts = core.compute_losses(model, Tensor(x), noise, config, x_anom)
        return total

    return {name: ag.grad_check(objective, p, h=h) for name, p in model.named_parameters()}


def test_total_loss_gradients_for_every_parameter():
    errors = toy_gradient_errors()
    assert {n.split(".")[0] for n in errors} == {"encoder", "discriminator", "perturbators"}
    assert max(errors.values()) < 1e-4, errors


def test_total_loss_gradients_with_known_anomalies():
    assert max(toy_gradient_errors(l_aug=True).values()) < 1e-4


def test_adversarial_flag_flips_only_the_cross_entropy_gradient():
    model = small_model()
    x, noise = toy_batch(model)
    grads = {}
    for flag in (False, True):
        cfg = TrainConfig(n_perturbators=2, n_augment=1, batch_size=3, lambda1=0.0, lambda2=0.0, adversarial_perturbators=flag)
        for p in model.parameters():
            p.grad = None
        total, _ = core.compute_losses(model, Tensor(x), noise, cfg)
        total.backward()
        grads[flag] = {n: p.grad.copy() for n, p in model.named_parameters()}
    for name in grads[False]:
        if name.startswith("perturbators"):
            np.testing.assert_allclose(grads[True][name], -grads[False][name], rtol=1e-12, atol=1e-15)
        else:
            assert np.array_equal(grads[True][name], grads[False][name])


def snapshot(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def test_train_step_updates_every_group():
    config = TrainConfig(n_perturbators=2, n_augment=4, batch_size=16)
    model = small_model()
    before = snapshot(model)
    x = np.random.default_rng(0).normal(size=(16, 4))
    core.train_step(model, x, config, core.make_optimizers(model, config), np.random.default_rng(1))
    after = snapshot(model)
    for group in ("encoder", "discriminator", "perturbators.0", "perturbators.1"):
        names = [n for n in before if n.startswith(group)]
        assert any(not np.array_equal(before[n], after[n]) for n in names), group


def test_train_step_deterministic():
    config = TrainConfig(n_perturbators=2, n_augment=4, batch_size=16)
    x = np.random.default_rng(0).normal(size=(16, 4))
    reports = []
    for _ in range(2):
        model = small_model()
        reports.append(core.train_step(model, x, config, core.make_optimizers(model, config), np.random.default_rng(1)))
    assert reports[0] == reports[1]


def test_short_final_batch_clips_k():
    config = TrainConfig(n_perturbators=2, n_augment=10, batch_size=16, epochs=1)
    model = small_model()
    seen = []
    core.fit(model, np.random.default_rng(0).normal(size=(20, 4)), config, on_step=lambda e, s, r: seen.append(r))
    assert len(seen) == 2


def test_non_finite_loss_reports_diagnostics():
    config = TrainConfig(n_perturbators=2, n_augment=1, batch_size=3)
    model = small_model()
    head = model.perturbators[0].head
    head.bias.data = np.full_like(head.bias.data, 1e308)
    with pytest.raises(NonFiniteError, match="perturbation norm"):
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            core.train_step(model, np.ones((3, 4)), config, core.make_optimizers(model, config), np.random.default_rng(0))


def synthetic_train(n=400, d=8, seed=0):
    ds = synthetic_two_gaussian(n, 0, d, 6.0, seed)
    return ds.features


def test_fit_zero_epochs_leaves_init():
    config = TrainConfig(epochs=0)
    model = core.build_model(8, config)
    before = snapshot(model)
    result = core.fit(model, synthetic_train(), config)
    assert result.history == []
    assert all(np.array_equal(before[n], p.data) for n, p in model.named_parameters())


def test_fit_history_length_and_ce_decreases():
    config = TrainConfig(epochs=200, batch_size=200, n_augment=20)
    model = core.build_model(8, config)
    steps = []
    result = core.fit(model, synthetic_train(), config, on_step=lambda e, s, r: steps.append(r))
    assert len(result.history) == 200
    assert steps[-1].l_ce < steps[0].l_ce


def test_fit_rejects_gamma_without_anomalies():
    with pytest.raises(ConfigError):
        core.fit(small_model(), np.zeros((4, 4)), TrainConfig(gamma=0.1, batch_size=4, n_augment=1))


def test_fit_dimension_mismatch():
    with pytest.raises(DimensionError):
        core.fit(small_model(), np.zeros((4, 5)), TrainConfig(batch_size=4, n_augment=1))


def trained(config, x, x_anom=None):
    model = core.build_model(x.shape[1], config)
    core.fit(model, x, config, x_anom=x_anom)
    return snapshot(model)


def test_fit_is_bit_deterministic():
    config = TrainConfig(epochs=3, batch_size=64, n_augment=8)
    x = synthetic_train(200)
    a, b = trained(config, x), trained(config, x)
    assert all(a[n].tobytes() == b[n].tobytes() for n in a)


def test_gamma_zero_equals_unsupervised_run():
    config = TrainConfig(epochs=3, batch_size=64, n_augment=8, gamma=0.0)
    x = synthetic_train(200)
    a = trained(config, x)
    b = trained(config, x, x_anom=np.zeros((0, 8)))
    assert all(a[n].tobytes() == b[n].tobytes() for n in a)


def test_anomaly_score_contract():
    model = core.build_model(8, TrainConfig())
    x = np.random.default_rng(0).normal(size=(5, 8)) * 1e3
    x[3] = x[1]
    s = core.anomaly_score(model, x)
    assert np.all((s > 0) & (s < 1))
    assert s[1] == s[3]
    with pytest.raises(DimensionError):
        core.anomaly_score(model, np.zeros((2, 3)))


def test_classify():
    assert core.classify([0.4, 0.6], 0.5).tolist() == [0, 1]
    assert core.classify([0.5], 0.5).tolist() == [0]
    assert not core.classify([0.3, 0.999999], 1 - 1e-12).any()
    with pytest.raises(ConfigError):
        core.classify([0.1], 1.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(n_augment=600, batch_size=512).validate()
    with pytest.raises(ConfigError):
        TrainConfig(perturb_mode="pixel").validate()
    with pytest.raises(ConfigError):
        ArchConfig(perturbator_arch="rnn")
