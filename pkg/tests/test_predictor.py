import numpy as np
import pytest

from icrl.predictor import (
    NetModel,
    PhiModel,
    PooledRiskPredictor,
    PredictorConfig,
    TwoStagePredictor,
    erm_baseline,
    evaluate,
    irm_penalty_value,
    irmv1_baseline,
    predict,
    train_phi,
    train_w,
)
from icrl.semgen import EnvSpec, MixingSpec, make_multi_env_dataset

TRAIN = [EnvSpec(1, 0, 0.2), EnvSpec(1, 0, 2)]
TEST = [EnvSpec(1, 0, 100)]


def data(kind, n=1000, seed=0):
    tr = make_multi_env_dataset(TRAIN, n, MixingSpec(kind, seed=seed), seed)
    te = make_multi_env_dataset(TEST, n, MixingSpec(kind, seed=seed), seed + 1000)
    return tr, te


def mse(a, b):
    return float(np.mean((np.asarray(a).ravel() - np.asarray(b).ravel()) ** 2))


def test_phi_realizable_identity():
    tr, _ = data("identity")
    phi = train_phi(tr.O, tr.X_true[:, :1], PredictorConfig(epochs=100))
    assert mse(phi(tr.O), tr.X_true[:, 0]) < 0.05
    assert phi.curve[-1] < phi.curve[0]


def test_zero_epochs_leaves_initial_network():
    tr, _ = data("identity", n=300)
    untrained = train_phi(tr.O, tr.X_true[:, :1], PredictorConfig(epochs=0))
    trained = train_phi(tr.O, tr.X_true[:, :1], PredictorConfig(epochs=60))
    assert len(untrained.curve) == 1
    assert untrained.curve[0] == trained.curve[0]
    assert untrained.curve[0] > 5 * trained.curve[-1]


def test_w_identity_map():
    r = np.random.default_rng(0)
    Z = r.normal(size=(1000, 2))
    w = train_w(Z, Z[:, 0], PredictorConfig(epochs=100))
    assert mse(w(Z), Z[:, 0]) < 0.05


def test_w_random_labels_chance_accuracy():
    r = np.random.default_rng(1)
    Z = r.normal(size=(4000, 1))
    y = (r.uniform(size=4000) < 0.5).astype(float)
    cfg = PredictorConfig(epochs=30, task="classification")
    w = train_w(Z, y, cfg)
    acc = evaluate(y, w(Z), np.zeros(4000), "classification").pooled
    assert abs(acc - 0.5) <= 0.05
    assert np.all((w(Z) > 0) & (w(Z) < 1))
    with pytest.raises(ValueError, match="0/1"):
        train_w(Z, y + 2, cfg)


def test_composition_and_batching():
    tr, _ = data("linear", n=200)
    cfg = PredictorConfig(epochs=5)
    phi = train_phi(tr.O, tr.X_true[:, :1], cfg)
    w = train_w(tr.X_true[:, :1], tr.Y, cfg)
    both = predict(phi, w, tr.O)
    np.testing.assert_array_equal(both, w(phi(tr.O)))
    single = np.vstack([predict(phi, w, tr.O[i:i + 1]) for i in range(10)])
    np.testing.assert_allclose(single, both[:10], rtol=0, atol=1e-12)
    with pytest.raises(ValueError, match="input columns"):
        predict(phi, w, tr.O[:, :3])
    w2 = train_w(tr.X_true, tr.Y, cfg)
    with pytest.raises(ValueError, match="expects"):
        predict(phi, w2, tr.O)


@pytest.mark.parametrize("kind", ["identity", "linear"])
def test_erm_generalises_without_mixing_nonlinearity(kind):
    tr, te = data(kind)
    model, train_eval = erm_baseline(tr.O, tr.Y, tr.E, PredictorConfig(hidden=None, epochs=100))
    assert train_eval.pooled < 0.05
    assert mse(model(te.O), te.Y) < 0.05
    assert model.curve[-1] < model.curve[0]


def test_zero_penalty_matches_erm():
    tr, _ = data("nonlinear", n=200)
    cfg = PredictorConfig(epochs=15, seed=3)
    erm, _ = erm_baseline(tr.O, tr.Y, tr.E, cfg)
    irm, _, trace = irmv1_baseline(tr.O, tr.Y, tr.E, cfg, penalty_weight=0.0)
    np.testing.assert_array_equal(erm.net.get_flat(), irm.net.get_flat())
    assert erm.curve == irm.curve
    assert trace == []


def test_penalty_nonnegative_and_starts_after_warmup():
    tr, _ = data("nonlinear", n=200)
    cfg = PredictorConfig(epochs=6, batch_size=100, seed=1)
    _, _, trace = irmv1_baseline(tr.O, tr.Y, tr.E, cfg, penalty_weight=100.0, warmup_epochs=2)
    assert len(trace) == 4 * 4  # 4 steps per epoch after 2 warmup epochs
    assert min(trace) >= 0.0


@pytest.mark.parametrize("task", ["regression", "classification"])
def test_penalty_matches_numerical_derivative(task):
    r = np.random.default_rng(4)
    X = r.normal(size=(120, 3))
    env = np.repeat([0, 1, 2], 40)
    y = (X[:, :1] > 0).astype(float) if task == "classification" else X[:, :1] + 0.3 * r.normal(size=(120, 1))
    model, _, _ = irmv1_baseline(X, y, env, PredictorConfig(epochs=2, task=task), penalty_weight=0.0)
    f = model.net(X)

    def risk(c, rows):
        out = c * f[rows]
        if task == "regression":
            return np.mean((out - y[rows]) ** 2)
        return np.mean(np.logaddexp(0.0, out) - out * y[rows])

    h = 1e-6
    expected = sum(((risk(1 + h, env == e) - risk(1 - h, env == e)) / (2 * h)) ** 2 for e in range(3))
    assert irm_penalty_value(model, X, y, env) == pytest.approx(expected, rel=1e-6)


def test_w_seed_does_not_touch_phi():
    tr, _ = data("nonlinear", n=200)
    Z = tr.X_true[:, :1]
    phi_a = train_phi(tr.O, Z, PredictorConfig(epochs=5, seed=0))
    train_w(Z, tr.Y, PredictorConfig(epochs=5, seed=7))
    phi_b = train_phi(tr.O, Z, PredictorConfig(epochs=5, seed=0))
    np.testing.assert_array_equal(phi_a.net.get_flat(), phi_b.net.get_flat())


def test_eval_pooled_is_row_weighted():
    y = np.array([0.0, 0.0, 0.0, 1.0])
    pred = np.array([1.0, 0.0, 0.0, 1.0])
    res = evaluate(y, pred, [0, 0, 0, 1])
    assert res.per_env == {0: pytest.approx(1 / 3), 1: 0.0}
    assert res.pooled == pytest.approx((3 * res.per_env[0] + 1 * res.per_env[1]) / 4)
    acc = evaluate(y, np.array([0.2, 0.9, 0.1, 0.7]), [0, 0, 1, 1], "classification")
    assert acc.metric == "accuracy" and acc.per_env == {0: 0.5, 1: 1.0}


def test_checkpoint_roundtrip(tmp_path):
    tr, _ = data("linear", n=100)
    phi = train_phi(tr.O, tr.X_true[:, :1], PredictorConfig(epochs=2))
    phi.save(tmp_path / "phi.json")
    back = PhiModel.load(tmp_path / "phi.json")
    np.testing.assert_array_equal(back(tr.O), phi(tr.O))
    assert isinstance(NetModel.from_dict(phi.to_dict()), NetModel)


def test_estimators():
    tr, te = data("identity", n=300)
    two = TwoStagePredictor(epochs=40).fit(tr.O, tr.Y.ravel(), parent_latents=tr.X_true[:, :1])
    assert two.predict(te.O).shape == (300,)
    assert two.transform(tr.O).shape == (600, 1)
    with pytest.raises(ValueError, match="parent_latents"):
        TwoStagePredictor().fit(tr.O, tr.Y.ravel())
    erm = PooledRiskPredictor(hidden=None, epochs=300).fit(tr.O, tr.Y.ravel(), env=tr.E)
    assert erm.score(te.O, te.Y.ravel()) > 0.99
    assert set(PooledRiskPredictor().get_params()) >= {"penalty_weight", "warmup_epochs", "hidden"}
    with pytest.raises(ValueError, match="task"):
        PredictorConfig(task="ranking")
