import numpy as np
import pytest
from numpy.testing import assert_allclose

from dataset_tool import Dataset, DatasetError, FidelityTag
from dense_net import ActivationKind, NetworkStateError
from gemini_model import (
    SEARCH_SPACE,
    SIGMA_FLOOR_CHEAP,
    SIGMA_FLOOR_EXP,
    BaselineVariant,
    GeminiHyperparams,
    GeminiModel,
    Normalizer,
    baseline_train,
    cross_validate_rho,
    cv_folds,
    gaussian_nll,
    random_search,
    rho_cv,
    sample_hyperparams,
    _holdout_split,
)
from surface_tool import trig_pair


def small_hyper(**overrides):
    values = dict(hidden_latent=8, depth_latent=2, learning_rate=0.01, max_epochs=40, patience=40, batch_size=20)
    values.update(overrides)
    return GeminiHyperparams(**values)


def sine_dataset(n_cheap=60, n_exp=6, seed=0):
    rng = np.random.default_rng(seed)
    Xc = rng.uniform(size=(n_cheap, 1))
    Xe = rng.uniform(size=(n_exp, 1))
    return Dataset(Xc, np.sin(6 * Xc[:, 0]), Xe, np.sin(6 * Xe[:, 0] + 0.3) + 0.5)


def test_default_hyperparameters():
    h = GeminiHyperparams()
    assert (h.batch_size, h.learning_rate) == (50, 0.000272)
    assert (h.depth_fbias, h.depth_latent, h.depth_tbias) == (1, 3, 1)
    assert (h.hidden_latent, h.hidden_tbias) == (96, 3)
    assert h.act_latent is ActivationKind.LEAKY_RELU and h.act_fbias is ActivationKind.SOFTPLUS
    assert (h.coeff_both, h.reg_latent, h.reg_bias) == (0.5, 1e-3, 0.0894)
    assert h.fbias_width(4) == 4


def test_unknown_hyperparameter_rejected():
    with pytest.raises(ValueError):
        GeminiHyperparams(hidden=3)


def test_predict_before_training():
    with pytest.raises(NetworkStateError):
        GeminiModel(2, small_hyper(), seed=0).predict_mean(np.zeros((1, 2)))


def test_zeroed_bias_nets_reduce_to_latent_net():
    model = GeminiModel(2, small_hyper(), seed=1)
    model.normalizer = Normalizer.identity(2)
    model.f_p.zero_parameters()
    model.f_t.zero_parameters()
    X = np.random.default_rng(1).uniform(size=(5, 2))
    mu_c, sigma_c = model.predict_arrays(X, FidelityTag.CHEAP)
    mu_e, sigma_e = model.predict_arrays(X, FidelityTag.EXPENSIVE)
    assert_allclose(mu_e, mu_c)
    assert_allclose(sigma_e - sigma_c, SIGMA_FLOOR_EXP - SIGMA_FLOOR_CHEAP)


def test_sigma_respects_floors():
    model = GeminiModel(1, small_hyper(), seed=2)
    model.normalizer = Normalizer.identity(1)
    X = np.linspace(-50, 50, 11)[:, None]
    assert np.all(model.predict_arrays(X, FidelityTag.CHEAP)[1] >= SIGMA_FLOOR_CHEAP)
    assert np.all(model.predict_arrays(X, FidelityTag.EXPENSIVE)[1] >= SIGMA_FLOOR_EXP)


def test_gaussian_nll_value():
    assert gaussian_nll([1.0, 2.0], [1.0, 2.0], [1.0, 1.0]) == 0.0
    assert gaussian_nll([1.0], [0.0], [2.0]) == pytest.approx(0.5 * (0.25 + np.log(4.0)))


def test_composite_loss_terms_add_up():
    model = GeminiModel(1, small_hyper(), seed=3)
    rng = np.random.default_rng(3)
    parts = model.loss(rng.uniform(size=(10, 1)), rng.normal(size=10), rng.uniform(size=(4, 1)), rng.normal(size=4))
    h = model.hyper
    assert parts.total == pytest.approx(parts.exp + h.coeff_both * parts.cheap + parts.regularization)
    assert parts.data == pytest.approx(parts.total - parts.regularization)


@pytest.mark.parametrize("batch_norm_latent", [False, True])
def test_gradients_match_finite_differences(batch_norm_latent):
    hyper = small_hyper(act_latent=ActivationKind.SOFTPLUS, batch_norm_latent=batch_norm_latent, depth_latent=1)
    model = GeminiModel(2, hyper, seed=4)
    rng = np.random.default_rng(4)
    batch = (rng.uniform(size=(6, 2)), rng.normal(size=6), rng.uniform(size=(3, 2)), rng.normal(size=3))
    _, grads = model.loss_and_grads(*batch)
    params = model.parameters()
    eps = 1e-6
    for name in ("f_p.layer0.W", "f_p.layer1.b", "f_l.layer0.W", "f_l.layer1.W", "f_t.layer0.W", "f_t.layer1.b"):
        param = params[name]
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            orig = param[idx]
            param[idx] = orig + eps
            up = model.loss(*batch, mode="train").total
            param[idx] = orig - eps
            down = model.loss(*batch, mode="train").total
            param[idx] = orig
            numeric[idx] = (up - down) / (2 * eps)
        assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-6, err_msg=name)


def test_cheap_only_batch_leaves_bias_nets_untouched():
    model = GeminiModel(1, small_hyper(), seed=5)
    _, grads = model.loss_and_grads(np.ones((4, 1)), np.zeros(4), None, None)
    assert np.all(grads["f_p.layer0.W"] == 2.0 * model.hyper.reg_bias * model.f_p.parameters()["layer0.W"])
    assert np.all(grads["f_t.layer0.W"] == 2.0 * model.hyper.reg_bias * model.f_t.parameters()["layer0.W"])


def test_training_reduces_loss_and_records_history(tmp_path):
    model = GeminiModel(1, small_hyper(), seed=6)
    history = model.train(sine_dataset())
    assert 1 <= len(history) <= 40
    assert min(row.loss for row in history[-10:]) < history[0].loss
    frame = model.history_frame()
    assert list(frame.columns) == ["epoch", "loss", "loss_exp", "loss_cheap", "holdout"]
    model.write_history(tmp_path / "history.csv")
    assert (tmp_path / "history.csv").exists()
    preds = model.predict_expensive(np.linspace(0, 1, 5)[:, None])
    assert len(preds) == 5 and all(p.tag is FidelityTag.EXPENSIVE and p.sigma > 0 for p in preds)


def test_training_is_seed_reproducible():
    X = np.linspace(0, 1, 7)[:, None]
    a = GeminiModel(1, small_hyper(max_epochs=5), seed=11)
    b = GeminiModel(1, small_hyper(max_epochs=5), seed=11)
    a.train(sine_dataset())
    b.train(sine_dataset())
    assert_allclose(a.predict_mean(X), b.predict_mean(X))


@pytest.mark.parametrize("n_cheap,n_exp", [(30, 0), (0, 8)])
def test_single_fidelity_training(n_cheap, n_exp):
    model = GeminiModel(1, small_hyper(max_epochs=5), seed=7)
    model.train(sine_dataset(n_cheap, n_exp))
    assert np.all(np.isfinite(model.predict_mean(np.linspace(0, 1, 4)[:, None])))


def test_empty_dataset_rejected():
    with pytest.raises(DatasetError):
        GeminiModel(1, small_hyper(), seed=0).train(Dataset(dim=1))


def test_save_and_load(tmp_path):
    model = GeminiModel(1, small_hyper(max_epochs=3), seed=8)
    model.train(sine_dataset())
    path = tmp_path / "gemini.json"
    model.save(path)
    X = np.linspace(0, 1, 6)[:, None]
    assert_allclose(GeminiModel.load(path).predict_mean(X), model.predict_mean(X))


@pytest.mark.parametrize("variant", list(BaselineVariant))
def test_baselines_train(variant):
    net = baseline_train(variant, sine_dataset(), small_hyper(max_epochs=5), seed=9)
    assert net.predict_mean(np.linspace(0, 1, 3)[:, None]).shape == (3,)


def test_baseline_needs_its_split():
    with pytest.raises(DatasetError):
        baseline_train(BaselineVariant.NN_CHEAP, sine_dataset(0, 4), small_hyper(), seed=0)


def test_cv_folds_cover_expensive_points():
    folds = cv_folds(7, 3, np.random.default_rng(0))
    assert len(folds) == 3
    assert sorted(np.concatenate(folds).tolist()) == list(range(7))
    assert min(len(f) for f in folds) >= 2
    assert cv_folds(1, 3, np.random.default_rng(0)) == []


def _oracle(train, X_val, seed):
    return np.sin(6 * X_val[:, 0] + 0.3)


def test_rho_with_oracle_predictions():
    estimate = cross_validate_rho(sine_dataset(n_exp=6), k_folds=3, seed=0, fit_predict=_oracle)
    assert estimate.defined
    assert len(estimate.fold_values) == 3
    assert estimate.value == pytest.approx(1.0)


def test_rho_undefined_below_two_expensive_points():
    assert rho_cv(sine_dataset(n_exp=1), fit_predict=_oracle) is None


def test_rho_with_few_points_pools_leave_one_out_folds():
    seen = []

    def fit_predict(train, X_val, seed):
        seen.append((train.n_exp, len(X_val)))
        return _oracle(train, X_val, seed)

    for n_exp in (2, 3):
        seen.clear()
        estimate = cross_validate_rho(sine_dataset(n_exp=n_exp), seed=1, fit_predict=fit_predict)
        assert seen == [(n_exp - 1, 1)] * n_exp
        assert len(estimate.fold_values) == 1
        assert sorted(estimate.folds[0].tolist()) == list(range(n_exp))
        assert estimate.value == pytest.approx(1.0)


def test_rho_constant_predictions_count_as_zero():
    flat = lambda train, X_val, seed: np.zeros(len(X_val))  # noqa: E731
    assert rho_cv(sine_dataset(n_exp=6), seed=0, fit_predict=flat) == 0.0


def test_sampled_hyperparameters_stay_in_range():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = sample_hyperparams(rng)
        assert SEARCH_SPACE["batch_size"][0] <= h.batch_size <= SEARCH_SPACE["batch_size"][1]
        assert SEARCH_SPACE["learning_rate"][0] <= h.learning_rate <= SEARCH_SPACE["learning_rate"][1]
        assert h.act_fbias in SEARCH_SPACE["act_bias"]
        assert 1 <= h.hidden_tbias <= 3
        assert 0.5 <= h.coeff_both <= 3.0
        assert 1e-3 <= h.reg_bias <= 2e-1


def test_random_search_sorts_trials():
    ds = sine_dataset()
    X_val = np.linspace(0, 1, 8)[:, None]
    y_val = np.sin(6 * X_val[:, 0] + 0.3) + 0.5
    trials = random_search([(ds, X_val, y_val)], n_trials=2, seed=0, base=small_hyper(max_epochs=3))
    assert len(trials) == 2
    assert trials[0].score >= trials[1].score


def test_cv_folds_small_sets_and_bad_k():
    folds = cv_folds(3, 3, np.random.default_rng(0))
    assert [len(f) for f in folds] == [1, 1, 1]
    assert sorted(np.concatenate(folds).tolist()) == [0, 1, 2]
    assert [len(f) for f in cv_folds(4, 3, np.random.default_rng(0))] == [2, 2]
    with pytest.raises(ValueError):
        cv_folds(8, 1, np.random.default_rng(0))


@pytest.mark.parametrize("n_exp", [2, 3])
def test_rho_cv_trains_on_expensive_only_data(n_exp):
    rng = np.random.default_rng(n_exp)
    X = rng.uniform(size=(n_exp, 1))
    value = rho_cv(Dataset(X_exp=X, y_exp=np.sin(6 * X[:, 0])), small_hyper(max_epochs=3), seed=0)
    assert value is not None and -1.0 <= value <= 1.0


def _linear_fit_predict(train, X_val, seed):
    coeffs = np.polyfit(train.X_exp[:, 0], train.y_exp, 1)
    return np.polyval(coeffs, X_val[:, 0])


def _curved_dataset(scale=1.0):
    rng = np.random.default_rng(21)
    Xe = rng.uniform(size=(8, 1))
    Xc = rng.uniform(size=(5, 1))
    return Dataset(Xc, np.cos(3 * Xc[:, 0]), Xe, scale * (np.exp(2 * Xe[:, 0]) + 0.3 * np.sin(9 * Xe[:, 0])))


def test_rho_cv_matches_brute_force_fold_loop():
    ds = _curved_dataset()
    estimate = cross_validate_rho(ds, k_folds=3, seed=4, fit_predict=_linear_fit_predict)
    assert len(estimate.folds) == 3
    assert sorted(np.concatenate(estimate.folds).tolist()) == list(range(8))
    expected = []
    for val in estimate.folds:
        train = np.setdiff1d(np.arange(8), val)
        coeffs = np.polyfit(ds.X_exp[train, 0], ds.y_exp[train], 1)
        pred = np.polyval(coeffs, ds.X_exp[val, 0])
        expected.append(np.corrcoef(pred, ds.y_exp[val])[0, 1])
    assert estimate.value == pytest.approx(np.mean(expected), abs=1e-12)


def test_rho_cv_is_scale_invariant():
    base = cross_validate_rho(_curved_dataset(), seed=5, fit_predict=_linear_fit_predict)
    scaled = cross_validate_rho(_curved_dataset(scale=37.5), seed=5, fit_predict=_linear_fit_predict)
    assert_allclose(scaled.fold_values, base.fold_values, rtol=0, atol=1e-9)


def test_rho_is_minus_one_for_negated_predictions():
    flipped = lambda train, X_val, seed: -np.sin(6 * X_val[:, 0] + 0.3)  # noqa: E731
    assert rho_cv(sine_dataset(n_exp=9), seed=2, fit_predict=flipped) == pytest.approx(-1.0)


def test_fresh_model_expensive_branch_equals_cheap_branch():
    model = GeminiModel(2, small_hyper(), seed=12)
    model.normalizer = Normalizer.identity(2)
    X = np.random.default_rng(12).uniform(size=(6, 2))
    assert_allclose(model.predict_arrays(X, FidelityTag.EXPENSIVE)[0], model.predict_arrays(X, FidelityTag.CHEAP)[0])


def test_zeroed_latent_output_gives_half_sigma():
    model = GeminiModel(3, small_hyper(), seed=13)
    model.normalizer = Normalizer.identity(3)
    last = model.f_l.layers[-1]
    last.W[...] = 0.0
    last.b[...] = 0.0
    preds = model.predict_cheap(np.random.default_rng(13).uniform(size=(4, 3)))
    assert all(p.mean == 0.0 and p.sigma == pytest.approx(0.51) for p in preds)


def test_loss_single_point_hand_value():
    model = GeminiModel(1, small_hyper(reg_bias=0.0, reg_latent=0.0), seed=14)
    for net in model.nets.values():
        net.zero_parameters()
    # sigma = logistic(raw) + 0.1 = 1
    model.f_l.layers[-1].b[...] = [0.0, np.log(0.9 / 0.1)]
    parts = model.loss(None, None, [[0.3]], [1.0])
    assert parts.total == pytest.approx(0.5, abs=1e-12)
    assert parts.cheap == 0.0


def _randomize(model, rng, scale=0.5):
    for arr in model.parameters().values():
        arr[...] = rng.normal(scale=scale, size=arr.shape)


def _reference_loss(model, Xc, yc, Xe, ye):
    h = model.hyper

    def nll(y, out, floor):
        sigma = 1.0 / (1.0 + np.exp(-out[:, 1])) + floor
        return np.sum(0.5 * ((y - out[:, 0]) ** 2 / sigma ** 2 + np.log(sigma ** 2)))

    cheap_out = model.f_l.forward(Xc)
    latent = model.f_l.forward(Xe + model.f_p.forward(Xe))
    exp_out = latent + model.f_t.forward(latent)

    def sq(net):
        return sum(np.sum(layer.W ** 2) + np.sum(layer.b ** 2) for layer in net.layers)

    reg = h.reg_bias * (sq(model.f_p) + sq(model.f_t)) + h.reg_latent * sq(model.f_l)
    return nll(ye, exp_out, SIGMA_FLOOR_EXP) + h.coeff_both * nll(yc, cheap_out, SIGMA_FLOOR_CHEAP) + reg


def test_loss_matches_reference_evaluator():
    rng = np.random.default_rng(15)
    model = GeminiModel(2, small_hyper(batch_norm_latent=False, coeff_both=1.7), seed=15)
    _randomize(model, rng)
    Xc, yc = rng.uniform(size=(9, 2)), rng.normal(size=9)
    Xe, ye = rng.uniform(size=(4, 2)), rng.normal(size=4)
    assert model.loss(Xc, yc, Xe, ye).total == pytest.approx(_reference_loss(model, Xc, yc, Xe, ye), abs=1e-10)


def test_loss_grows_with_bias_regularization():
    rng = np.random.default_rng(16)
    model = GeminiModel(2, small_hyper(), seed=16)
    _randomize(model, rng)
    batch = (rng.uniform(size=(6, 2)), rng.normal(size=6), rng.uniform(size=(3, 2)), rng.normal(size=3))
    totals = []
    for reg_bias in (0.0, 0.01, 0.1, 1.0):
        model.hyper = model.hyper.model_copy(update={"reg_bias": reg_bias})
        totals.append(model.loss(*batch).total)
    assert all(b > a for a, b in zip(totals, totals[1:]))


@pytest.mark.parametrize("activation", list(ActivationKind))
@pytest.mark.parametrize("batch_norm", [False, True])
def test_composite_gradients_across_activations(activation, batch_norm):
    hyper = small_hyper(act_latent=activation, act_fbias=activation, act_tbias=activation,
                        batch_norm_latent=batch_norm, batch_norm_bias=batch_norm, hidden_latent=4, depth_latent=2)
    model = GeminiModel(2, hyper, seed=17)
    rng = np.random.default_rng(17)
    _randomize(model, rng)
    batch = (rng.uniform(size=(5, 2)), rng.normal(size=5), rng.uniform(size=(4, 2)), rng.normal(size=4))
    _, grads = model.loss_and_grads(*batch)
    eps = 1e-5
    for name, param in model.parameters().items():
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            orig = param[idx]
            param[idx] = orig + eps
            up = model.loss(*batch, mode="train").total
            param[idx] = orig - eps
            down = model.loss(*batch, mode="train").total
            param[idx] = orig
            numeric[idx] = (up - down) / (2 * eps)
        assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-6, err_msg=f"{activation.value} {name}")


def test_holdout_needs_at_least_two_points():
    rng = np.random.default_rng(0)
    train, hold = _holdout_split(10, 0.1, rng)
    assert len(train) == 10 and len(hold) == 0
    train, hold = _holdout_split(20, 0.1, rng)
    assert len(train) == 18 and len(hold) == 2
    assert not set(train) & set(hold)


def test_epochs_run_at_least_min_steps():
    model = GeminiModel(1, small_hyper(max_epochs=1, min_steps_per_epoch=7, batch_size=50), seed=18)
    steps = []
    composite = model._composite

    def counting(*args, **kwargs):
        if kwargs.get("need_grads"):
            steps.append(1)
        return composite(*args, **kwargs)

    model._composite = counting
    model.train(sine_dataset(n_cheap=30, n_exp=4))
    assert len(steps) == 7


def test_training_restores_batch_norm_statistics_of_the_training_set():
    # no holdout is drawn at these sizes, so every point is a training point
    ds = sine_dataset(n_cheap=15, n_exp=6)
    model = GeminiModel(1, small_hyper(max_epochs=10), seed=19)
    model.train(ds)
    bn = model.f_l.layers[0].batch_norm
    mean, var = bn.running_mean.copy(), bn.running_var.copy()
    norm = model.normalizer
    model.refresh_batch_norm(norm.transform_x(ds.X_cheap), norm.transform_x(ds.X_exp))
    assert_allclose(bn.running_mean, mean, rtol=0, atol=1e-10)
    assert_allclose(bn.running_var, var, rtol=0, atol=1e-10)


def test_nn_cheap_is_offset_by_constant_bias():
    pair = trig_pair("constant")
    x = np.linspace(0.0, 1.0, 75)
    ds = Dataset(x[:, None], pair.cheap(x), x[:10, None], pair.expensive(x[:10]))
    hyper = small_hyper(hidden_latent=32, learning_rate=0.005, max_epochs=300, patience=50)
    net = baseline_train(BaselineVariant.NN_CHEAP, ds, hyper, seed=20)
    grid = np.linspace(0.0, 1.0, 200)
    residual = net.predict_mean(grid[:, None]) - pair.expensive(grid)
    assert residual.mean() == pytest.approx(2.0, abs=0.3)
