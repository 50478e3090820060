import math

import numpy as np
import pytest

from sepdgp.network import predict
from sepdgp.trainer import (AdamState, Architecture, History, MinibatchSampler,
                            NonFiniteGradient, TrainConfig, Trainer, _batch_logz,
                            adam_step,
                            init_model, median_lengthscales, train)

from reference import fitc_posterior, fitc_predictive


def toy_data(rng, N=80, D=2):
    X = rng.uniform(-2, 2, size=(N, D))
    y = np.sin(2 * X[:, 0]) + 0.3 * X[:, -1] + 0.05 * rng.normal(size=N)
    return X, y


@pytest.mark.parametrize("text,hidden,final", [
    ("y@50", (), 50),
    ("2@50,y@50", ((2, 50),), 50),
    (" 3@10 , 2@20 ,y@5", ((3, 10), (2, 20)), 5),
])
def test_architecture_parse(text, hidden, final):
    arch = Architecture.parse(text)
    assert arch.hidden == hidden and arch.final_m == final
    assert Architecture.parse(str(arch)) == arch


@pytest.mark.parametrize("text", ["", "50", "y@50,2@50", "2@0,y@5", "y@x",
                                  "0@3,y@3"])
def test_architecture_rejects(text):
    with pytest.raises(ValueError):
        Architecture.parse(text)


@pytest.mark.parametrize("kwargs", [dict(minibatch_size=0), dict(iterations=0),
                                    dict(learning_rate=-1.0),
                                    dict(objective="elbo"), dict(seed=-1),
                                    dict(architecture="bad")])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_config_hash_tracks_content():
    a, b = TrainConfig(seed=1), TrainConfig(seed=1)
    assert a.hash() == b.hash()
    assert a.hash() != TrainConfig(seed=2).hash()


def test_adam_first_step_is_signed_learning_rate():
    cfg = TrainConfig(learning_rate=0.05)
    g = np.array([3.0, -0.2, 0.0])
    p, st = adam_step(np.zeros(3), g, AdamState.zeros(3), cfg)
    np.testing.assert_allclose(p, 0.05 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert st.step_count == 1


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    cfg = TrainConfig(learning_rate=0.01)
    p, st = np.zeros(4), AdamState.zeros(4)
    m = v = np.zeros(4)
    ref = np.zeros(4)
    for t in range(1, 20):
        g = rng.normal(size=4)
        p, st = adam_step(p, g, st, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref + 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_adam_rejects_non_finite():
    with pytest.raises(NonFiniteGradient):
        adam_step(np.zeros(2), np.array([1.0, np.nan]), AdamState.zeros(2),
                  TrainConfig())


def test_median_lengthscale_example():
    X = np.array([[0.0], [1.0], [2.0]])
    assert median_lengthscales(X, np.random.default_rng(0)).tolist() == [1.0]


def test_all_points_inducing_gives_data():
    X = np.random.default_rng(0).normal(size=(6, 2))
    model, _ = init_model(X, np.zeros(6), "y@6", seed=0)
    np.testing.assert_array_equal(np.sort(model.layers[0].Z, axis=0),
                                  np.sort(X, axis=0))


def test_adam_zero_gradient():
    p, st = adam_step(np.ones(3), np.zeros(3), AdamState.zeros(3), TrainConfig())
    np.testing.assert_array_equal(p, np.ones(3))
    assert st.step_count == 1


def test_median_lengthscales():
    X = np.array([[0.0, 5.0], [1.0, 5.0], [3.0, 5.0]])
    # pairwise distances in column 0 are 1, 3, 2; column 1 is constant
    ell = median_lengthscales(X, np.random.default_rng(0))
    np.testing.assert_array_equal(ell, [2.0, 1.0])


def test_init_model_layout():
    rng = np.random.default_rng(1)
    X, y = toy_data(rng, N=60, D=3)
    model, state = init_model(X, y, "2@7,y@5", seed=3)
    l1, l2 = model.layers
    assert l1.Z.shape == (7, 3) and l1.output_dim == 2
    assert l2.Z.shape == (5, 2) and l2.output_dim == 1
    assert l1.kernel.sf2 == 1.0 and l2.kernel.sf2 == 1.0
    np.testing.assert_allclose(l2.kernel.lengthscales, 20.0)
    assert np.all(np.abs(l2.Z) <= 1.0)
    assert l1.noise == pytest.approx(0.01) and l2.noise == pytest.approx(0.1)
    assert all(not np.any(g.eta1) and not np.any(g.eta2) for g in state.factors)
    with pytest.raises(ValueError):
        init_model(X, y, "y@61")


def test_sampler_covers_each_epoch():
    s = MinibatchSampler(10, 4, np.random.default_rng(0))
    drawn = np.concatenate([s.next() for _ in range(5)])   # two epochs
    assert sorted(drawn[:10]) == list(range(10))
    assert sorted(drawn[10:]) == list(range(10))
    assert not np.array_equal(drawn[:10], drawn[10:])


def test_history_csv(tmp_path):
    h = History()
    h.append(1, -1.25, 0, 0)
    h.append(2, float("nan"), 3, 1)
    path = tmp_path / "h.csv"
    h.to_csv(path)
    assert path.read_text() == ("iter,mean_logZ,skips,jitter_events\n"
                                "1,-1.25,0,0\n2,nan,3,1\n")
    assert h.total_skips == 3


def test_training_improves_fit():
    rng = np.random.default_rng(2)
    X, y = toy_data(rng)
    cfg = TrainConfig("y@15", minibatch_size=20, iterations=300, seed=0)
    model, state, history = train(X, y, cfg)
    pred = predict(model, state, X)
    assert np.sqrt(np.mean((pred.mean - y)**2)) < 0.25 * np.std(y)
    assert np.mean(history.mean_logz[-20:]) > np.mean(history.mean_logz[:20])


@pytest.mark.parametrize("objective", ["energy", "logz"])
def test_deep_training_runs(objective):
    rng = np.random.default_rng(3)
    X, y = toy_data(rng, N=60)
    cfg = TrainConfig("2@8,y@8", minibatch_size=15, iterations=40, seed=1,
                      objective=objective)
    model, state, history = train(X, y, cfg)
    assert len(history.iteration) == 40
    pred = predict(model, state, X)
    assert np.all(np.isfinite(pred.mean)) and np.all(pred.variance > 0)


def test_training_is_deterministic():
    rng = np.random.default_rng(4)
    X, y = toy_data(rng, N=50)
    cfg = TrainConfig("2@6,y@6", minibatch_size=10, iterations=15, seed=7)
    a = train(X, y, cfg)
    b = train(X, y, cfg)
    np.testing.assert_array_equal(a[0].get_params(), b[0].get_params())
    np.testing.assert_array_equal(a[1].posteriors[1].eta2, b[1].posteriors[1].eta2)
    assert a[2].mean_logz == b[2].mean_logz


def test_parallel_evaluation_matches_serial():
    # threads only change the order of the hyperparameter-gradient sums.
    # Whole training runs are not compared: Adam normalizes each coordinate,
    # so a near-zero gradient whose sign flips on rounding moves a full step
    rng = np.random.default_rng(5)
    X, y = toy_data(rng, N=50)
    model, state = init_model(X, y, "2@6,y@6", seed=2)
    # a moderate second-layer lengthscale keeps K_zz well conditioned, so
    # reordered sums agree closely
    model.layers[1].kernel.log_lengthscales[:] = math.log(1.5)
    state.rebuild(model)
    cav = [s.moments() for s in state.cavity_sites()]
    _, kept_s, logz_s, grads_s = _batch_logz(model, cav, X, y, False)
    _, kept_p, logz_p, grads_p = _batch_logz(model, cav, X, y, True)
    np.testing.assert_array_equal(kept_s, kept_p)
    np.testing.assert_allclose(logz_s, logz_p, rtol=1e-12)
    for gs, gp in zip(grads_s, grads_p):
        # BLAS blocking depends on the batch shape, so allow rounding noise
        for k in ("mean", "cov", "log_sf2", "log_lengthscales", "Z",
                  "log_noise"):
            np.testing.assert_allclose(gs[k], gp[k], rtol=1e-9, atol=1e-12)


def test_parallel_training_runs():
    rng = np.random.default_rng(5)
    X, y = toy_data(rng, N=50)
    cfg = TrainConfig("2@6,y@6", minibatch_size=10, iterations=5, seed=2,
                      sep={"parallel_within_minibatch": True})
    _, _, history = train(X, y, cfg)
    assert len(history.iteration) == 5


def test_per_datapoint_mode_runs():
    rng = np.random.default_rng(6)
    X, y = toy_data(rng, N=40)
    cfg = TrainConfig("y@6", minibatch_size=8, iterations=10, seed=0,
                      sep={"per_datapoint": True})
    model, state, history = train(X, y, cfg)
    assert history.total_skips == 0


def test_frozen_single_layer_converges_to_fitc_posterior():
    rng = np.random.default_rng(7)
    X = rng.uniform(-2, 2, size=(5, 1))
    y = np.sin(2 * X[:, 0])
    cfg = TrainConfig("y@3", minibatch_size=5, iterations=50, learning_rate=0.0)
    model, state = init_model(X, y, cfg.arch, 0)
    trainer = Trainer(model, state, X, y, cfg)
    for _ in range(50):
        trainer.step()
    layer = model.layers[0]
    m, V = fitc_posterior(layer, X, y)
    ref_mean, _ = fitc_predictive(layer, m, V, X)
    pred = predict(model, state, X)
    assert math.sqrt(np.mean((pred.mean - ref_mean)**2)) < 1e-2


def sine_data(rng, N):
    X = rng.uniform(-3, 3, size=(N, 1))
    return X, np.sin(X[:, 0]) + 0.1 * rng.normal(size=N)


def test_zero_learning_rate_freezes_parameters():
    rng = np.random.default_rng(8)
    X, y = sine_data(rng, 40)
    cfg = TrainConfig("2@5,y@5", minibatch_size=10, iterations=20,
                      learning_rate=0.0)
    model0, _ = init_model(X, y, cfg.arch, cfg.seed)
    trainer = Trainer(model0.copy(), init_model(X, y, cfg.arch, cfg.seed)[1],
                      X, y, cfg)
    for _ in range(20):
        trainer.step()
    np.testing.assert_array_equal(trainer.model.get_params(),
                                  model0.get_params())
    assert np.any(trainer.state.factors[1].eta2 != 0)


def test_minibatch_gradient_is_scaled_sum():
    from sepdgp.network import flatten_param_grads, grad_log_z
    rng = np.random.default_rng(9)
    X, y = sine_data(rng, 30)
    cfg = TrainConfig("2@4,y@4", minibatch_size=6, iterations=1,
                      objective="logz")
    model, state = init_model(X, y, cfg.arch, 0)
    # keep the second-layer K_zz well conditioned so that batch and
    # per-point summation orders agree to rounding
    model.layers[1].kernel.log_lengthscales[:] = math.log(1.5)
    state.rebuild(model)
    trainer = Trainer(model, state, X, y, cfg)
    for _ in range(3):
        trainer.step()
    cav = [s.moments() for s in state.cavity_sites()]
    idx = np.array([0, 4, 9, 17, 22, 29])
    expected = sum(flatten_param_grads(grad_log_z(model, cav, X[n], y[n])[1])
                   for n in idx) * 30 / 6
    _, skips, _, grads = trainer._step_minibatch(idx)
    assert skips == 0
    np.testing.assert_allclose(flatten_param_grads(grads), expected,
                               rtol=1e-10, atol=1e-12)


@pytest.mark.slow
def test_sine_regression():
    rng = np.random.default_rng(0)
    X, y = sine_data(rng, 200)
    cfg = TrainConfig("y@20", iterations=2000, learning_rate=0.01, seed=0)
    model, state, history = train(X, y, cfg)
    Xt = np.linspace(-3, 3, 200)[:, None]
    pred = predict(model, state, Xt)
    assert math.sqrt(np.mean((pred.mean - np.sin(Xt[:, 0]))**2)) <= 0.15
    # 100-iteration block averages of mean log Z over the first 1000 steps
    # never fall by more than 5% of their magnitude
    blocks = np.mean(np.reshape(history.mean_logz[:1000], (10, 100)), axis=1)
    assert np.all(blocks[1:] >= blocks[:-1] - 0.05 * np.abs(blocks[:-1]))


def test_shallow_recovery_after_training():
    rng = np.random.default_rng(10)
    X, y = sine_data(rng, 50)
    trained, _, _ = train(X, y, TrainConfig("y@10", minibatch_size=25,
                                            iterations=200, seed=1))
    # freeze the trained hyperparameters and rerun SEP from scratch
    Xs = trained.standardizer.transform_inputs(X)
    ys = trained.standardizer.transform_target(y)
    from sepdgp.network import InferenceState
    state = InferenceState.initial(trained, 50)
    frozen = TrainConfig("y@10", minibatch_size=50, iterations=1,
                         learning_rate=0.0)
    trainer = Trainer(trained, state, Xs, ys, frozen)
    for _ in range(50):
        trainer.step()
    layer = trained.layers[0]
    m, V = fitc_posterior(layer, Xs, ys)
    ref_mean, _ = fitc_predictive(layer, m, V, Xs)
    pred = predict(trained, state, Xs, standardized_inputs=True)
    assert math.sqrt(np.mean((pred.std_mean - ref_mean)**2)) < 1e-2
