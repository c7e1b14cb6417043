import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plmodel.dataset import Dataset, FEATURES
from plmodel.ml import (DtrConfig, KnnConfig, ModelFileError, ModelSpec, RfrConfig, TrainConfig, cross_validate,
                        dtr_train, dumps_model, knn_fit, knn_predict, load_model, mlp_forward, mlp_grad_check,
                        mlp_init, mlp_train, model_from_dict, model_to_dict, rfr_train, save_model, train_model)
from plmodel.ml import mlp as mlp_mod
from plmodel.ml.forest import RandomForestModel
from plmodel.ml.tree import LEAF, TreeArrays

X1 = np.array([[0.0], [1.0], [2.0], [3.0]])
Y1 = np.array([0.0, 0.0, 10.0, 10.0])


def regression_data(rng, n=300, p=3):
    x = rng.uniform(0, 10, (n, p))
    y = 3 * x[:, 0] - 2 * np.sin(x[:, 1]) + 0.5 * x[:, 2] ** 2 + 80
    return x, y


def feature_dataset(x, y, los=None):
    cols = {f: np.zeros(len(y)) for f in FEATURES}
    for j in range(x.shape[1]):
        cols[FEATURES[j]] = x[:, j]
    cols["distance_m"] = np.full(len(y), 10.0) if x.shape[1] <= FEATURES.index("distance_m") else cols["distance_m"]
    cols["los"] = np.ones(len(y)) if los is None else los
    cols["pl_db"] = y
    return Dataset(cols)


# --- decision tree --------------------------------------------------------------

def test_tree_constant_target():
    m = dtr_train(np.random.default_rng(0).normal(size=(20, 2)), np.full(20, 7.5))
    assert m.tree.n_nodes == 1 and m.tree.feature[0] == LEAF
    assert np.all(m.predict(np.array([[100.0, -3.0], [0.0, 0.0]])) == 7.5)


def test_tree_one_dimensional_example():
    m = dtr_train(X1, Y1)
    t = m.tree
    assert t.n_nodes == 3 and t.feature[0] == 0 and t.threshold[0] == 1.5
    assert sorted([t.value[t.left[0]], t.value[t.right[0]]]) == [0.0, 10.0]
    assert np.array_equal(m.predict(X1), Y1)
    assert m.predict(np.array([[2.0]]))[0] == 10.0


def test_stump_depth_bound(rng):
    x, y = regression_data(rng)
    t = dtr_train(x, y, DtrConfig(max_depth=1)).tree
    assert int(np.sum(t.feature != LEAF)) <= 1 and t.depth() <= 1


def _best_root_split(x, y):
    best = (np.inf, None, None)
    for j in range(x.shape[1]):
        vals = np.unique(x[:, j])
        for a, b in zip(vals[:-1], vals[1:]):
            thr = (a + b) / 2
            l, r = y[x[:, j] <= thr], y[x[:, j] > thr]
            sse = ((l - l.mean()) ** 2).sum() + ((r - r.mean()) ** 2).sum()
            if sse < best[0] - 1e-9:
                best = (sse, j, thr)
    return best


def test_root_split_matches_exhaustive_search(rng):
    for _ in range(5):
        x, y = regression_data(rng, n=60)
        t = dtr_train(x, y, DtrConfig(max_depth=1)).tree
        _, j, thr = _best_root_split(x, y)
        assert t.feature[0] == j and t.threshold[0] == pytest.approx(thr, abs=1e-12)
        for child, mask in ((t.left[0], x[:, j] <= thr), (t.right[0], x[:, j] > thr)):
            assert t.value[child] == pytest.approx(y[mask].mean(), abs=1e-9)
            assert t.count[child] == mask.sum()


def test_tree_memorizes_distinct_points(rng):
    x, y = regression_data(rng)
    m = dtr_train(x, y, DtrConfig(max_depth=None))
    assert np.array_equal(m.predict(x), y)


def test_min_samples_split(rng):
    x, y = regression_data(rng)
    t = dtr_train(x, y, DtrConfig(max_depth=None, min_samples_split=50)).tree
    inner = t.feature != LEAF
    assert np.all(t.count[inner] >= 50)


def test_tree_leaf_value_is_mean_of_its_samples(rng):
    x, y = regression_data(rng)
    m = dtr_train(x, y, DtrConfig(max_depth=4))
    pred = m.predict(x)
    for v in np.unique(pred):
        assert v == pytest.approx(y[pred == v].mean(), abs=1e-9)


def test_tree_config_errors():
    with pytest.raises(ValueError):
        DtrConfig(max_depth=0)
    with pytest.raises(ValueError):
        DtrConfig(min_samples_split=1)


# --- random forest --------------------------------------------------------------

def test_single_tree_forest_equals_tree(rng):
    x, y = regression_data(rng)
    f = rfr_train(x, y, RfrConfig(n_estimators=1, bootstrap=False, max_depth=8))
    t = dtr_train(x, y, DtrConfig(max_depth=8))
    q = rng.uniform(0, 10, (50, 3))
    assert np.array_equal(f.predict(q), t.predict(q))


def _leaf(v):
    return TreeArrays(np.array([LEAF]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([float(v)]),
                      np.array([1]))


def test_forest_mean_of_stub_trees():
    f = RandomForestModel([_leaf(10), _leaf(20), _leaf(30)], RfrConfig(n_estimators=3), 1)
    assert f.predict(np.array([[0.0], [5.0]])).tolist() == [20.0, 20.0]


def _walk(t, row):
    i = 0
    while t.feature[i] != LEAF:
        i = t.left[i] if row[t.feature[i]] <= t.threshold[i] else t.right[i]
    return t.value[i]


def test_forest_on_1d_example_matches_brute_force():
    f = rfr_train(X1, Y1, RfrConfig(n_estimators=100))
    pred = f.predict(np.array([[2.0]]))[0]
    assert 0.0 <= pred <= 10.0
    assert pred == pytest.approx(np.mean([_walk(t, [2.0]) for t in f.trees]), abs=1e-12)


def test_forest_deterministic_and_seeded(rng):
    x, y = regression_data(rng)
    cfg = RfrConfig(n_estimators=10, seed=3)
    a, b = rfr_train(x, y, cfg), rfr_train(x, y, cfg)
    assert dumps_model(a) == dumps_model(b)
    c = rfr_train(x, y, RfrConfig(n_estimators=10, seed=4))
    assert dumps_model(a) != dumps_model(c)


def test_forest_feature_subsampling(rng):
    x, y = regression_data(rng, p=4)
    f = rfr_train(x, y, RfrConfig(n_estimators=5, feature_subsampling=True))
    assert f.predict(x).shape == (len(x),)


# --- KNN --------------------------------------------------------------------------

def test_knn_self_prediction(rng):
    x, y = regression_data(rng)
    m = knn_fit(x, y, KnnConfig(k=1))
    assert np.array_equal(knn_predict(m, x), y)


def test_knn_full_neighbourhood(rng):
    x, y = regression_data(rng, n=40)
    m = knn_fit(x, y, KnnConfig(k=40))
    assert knn_predict(m, rng.uniform(-5, 15, (7, 3))) == pytest.approx(np.full(7, y.mean()), abs=1e-12)


def test_knn_tie_goes_to_lowest_index():
    x = np.array([[1.0], [1.0], [5.0]])
    m = knn_fit(x, np.array([10.0, 20.0, 30.0]), KnnConfig(k=1))
    assert knn_predict(m, np.array([[1.0]]))[0] == 10.0
    m2 = knn_fit(x[[1, 0, 2]], np.array([20.0, 10.0, 30.0]), KnnConfig(k=1))
    assert knn_predict(m2, np.array([[1.0]]))[0] == 20.0


def test_knn_two_point_example():
    x, y = np.array([[0.0], [10.0]]), np.array([10.0, 20.0])
    assert knn_predict(knn_fit(x, y, KnnConfig(k=1)), np.array([[1.0]]))[0] == 10.0
    assert knn_predict(knn_fit(x, y, KnnConfig(k=2)), np.array([[1.0]]))[0] == 15.0


def test_knn_matches_brute_force(rng):
    x, y = regression_data(rng, n=400)
    x[:50] = np.round(x[:50])  # some duplicate coordinates to exercise ties
    m = knn_fit(x, y, KnnConfig(k=7))
    q = rng.uniform(0, 10, (60, 3))
    q[:10] = x[:10]
    lo, span = np.array(m.normalizer.minimum), np.array(m.normalizer.maximum) - np.array(m.normalizer.minimum)
    xn, qn = (x - lo) / span, (q - lo) / span
    for i in range(len(q)):
        d = np.abs(xn - qn[i]).sum(axis=1)
        order = np.lexsort((np.arange(len(x)), d))[:7]
        assert knn_predict(m, q[i:i + 1])[0] == pytest.approx(y[order].mean(), abs=1e-12)


def test_knn_k_too_large():
    with pytest.raises(ValueError, match="k exceeds training size"):
        knn_fit(np.zeros((3, 1)), np.zeros(3), KnnConfig(k=4))


# --- MLP ----------------------------------------------------------------------------

def straight_forward(model, x):
    h = np.asarray(x, dtype=float)
    n = len(model.weights)
    for i in range(n):
        z = np.zeros((h.shape[0], model.weights[i].shape[1]))
        for r in range(h.shape[0]):
            for c in range(model.weights[i].shape[1]):
                z[r, c] = sum(h[r, k] * model.weights[i][k, c] for k in range(h.shape[1])) + model.biases[i][c]
        h = z if i == n - 1 else 1.0 / (1.0 + np.exp(-z))
    return h[:, 0]


def test_mlp_init_deterministic():
    a, b = mlp_init(5), mlp_init(5)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
    assert a.layer_sizes == (8, 128, 128, 64, 32, 1)
    assert not np.array_equal(a.weights[0], mlp_init(6).weights[0])


def test_mlp_zero_model():
    m = mlp_init(1)
    m.weights = [np.zeros_like(w) for w in m.weights]
    m.biases = [np.zeros_like(b) for b in m.biases]
    assert np.all(mlp_forward(m, np.random.default_rng(0).normal(size=(5, 8))) == 0.0)
    m.biases[-1] = np.array([42.5])
    assert np.all(mlp_forward(m, np.random.default_rng(0).normal(size=(5, 8))) == 42.5)


def test_mlp_forward_matches_straight_line(rng):
    m = mlp_init(3, layers=(8, 6, 5, 4, 3, 1))
    m.biases = [rng.normal(size=b.shape) for b in m.biases]
    x = rng.normal(size=(4, 8))
    assert mlp_forward(m, x) == pytest.approx(straight_forward(m, x), abs=1e-12)


def test_mlp_zero_learning_rate(rng):
    m = mlp_init(2, layers=(3, 8, 8, 8, 4, 1))
    x, y = rng.uniform(size=(40, 3)), rng.uniform(size=40)
    out = mlp_train(m, x, y, cfg=TrainConfig(learning_rate=0.0, epochs=5, batch_size=8))
    assert all(np.array_equal(p, q) for p, q in zip(m.params(), out.params()))
    assert len(out.history["train_mse"]) == 5


def test_mlp_memorizes_single_sample():
    m = mlp_init(0, layers=(8, 16, 16, 8, 4, 1))
    x, y = np.full((1, 8), 0.3), np.array([1.7])
    out = mlp_train(m, x, y, cfg=TrainConfig(learning_rate=0.01, epochs=500, batch_size=1))
    assert float(np.mean((out.forward(x) - y) ** 2)) < 1e-4


def test_mlp_grad_check(rng):
    m = mlp_init(4)
    x, y = rng.uniform(size=(16, 8)), rng.uniform(50, 150, 16)
    assert mlp_grad_check(m, x, y, n_params=300) < 1e-4


def test_mlp_grad_check_detects_corruption(rng):
    m = mlp_init(4)
    x, y = rng.uniform(size=(16, 8)), rng.uniform(50, 150, 16)

    def corrupted(weights, biases, xx, yy):
        loss, g = mlp_mod.gradients(weights, biases, xx, yy)
        g[2] = -g[2]
        return loss, g

    sizes = [w.size for w in m.weights]
    start = sum(sizes[:2])
    # check every parameter of the corrupted layer
    worst = mlp_grad_check(m, x, y, n_params=sum(sizes) + sum(b.size for b in m.biases), gradient_fn=corrupted)
    assert worst > 1e-1
    assert start < sum(sizes)


def test_mlp_grad_check_zero_model():
    m = mlp_init(1)
    m.weights = [np.zeros_like(w) for w in m.weights]
    m.biases = [np.zeros_like(b) for b in m.biases]
    r = mlp_grad_check(m, np.full((4, 8), 0.5), np.array([1.0, 2.0, 3.0, 4.0]))
    assert np.isfinite(r) and r < 1e-4


def test_mlp_training_reduces_loss(rng):
    x = rng.uniform(size=(400, 8))
    y = 100 + 10 * x[:, 0] - 5 * x[:, 3]
    out = mlp_train(mlp_init(1), x, y, x[:50], y[:50], TrainConfig(learning_rate=0.01, epochs=30, batch_size=32))
    h = out.history["train_mse"]
    assert len(h) == 30 and len(out.history["val_mse"]) == 30
    assert h[-1] < h[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_mlp_divergence_raises(rng):
    x = rng.uniform(size=(20, 8))
    y = np.full(20, 1e300)
    with pytest.raises(mlp_mod.TrainingError):
        mlp_train(mlp_init(1), x, y, cfg=TrainConfig(learning_rate=1.0, epochs=3))


# --- model files and cross-validation -----------------------------------------------------

def _small_ds(rng, n=120):
    x = rng.uniform(0, 10, (n, len(FEATURES)))
    x[:, FEATURES.index("los")] = rng.integers(0, 2, n)
    x[:, FEATURES.index("distance_m")] += 1
    y = 80 + 2 * x[:, 3] + 5 * x[:, 5] + rng.normal(0, 0.1, n)
    return feature_dataset(x, y, x[:, FEATURES.index("los")])


@pytest.mark.parametrize("spec", [
    ModelSpec("dtr"), ModelSpec("rfr", RfrConfig(n_estimators=5)), ModelSpec("knn", KnnConfig(k=3)),
    ModelSpec("mlp", TrainConfig(epochs=2, batch_size=16)),
])
def test_model_file_roundtrip(tmp_path, rng, spec):
    ds = _small_ds(rng)
    model = train_model(spec, ds)
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    assert back.model_type == spec.model_type
    assert np.array_equal(back.predict(ds.features), model.predict(ds.features))
    assert dumps_model(back) == path.read_text()
    again = tmp_path / "m2.json"
    save_model(train_model(spec, ds), again)
    assert again.read_bytes() == path.read_bytes()


def test_model_file_errors(tmp_path):
    with pytest.raises(ModelFileError):
        model_from_dict({"version": 99})
    with pytest.raises(ModelFileError):
        model_from_dict({"version": 1, "model_type": "svm"})
    doc = model_to_dict(dtr_train(X1, Y1))
    doc["parameters"]["tree"]["left"]["shape"] = [7]
    with pytest.raises(ModelFileError):
        model_from_dict(doc)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ModelFileError):
        load_model(bad)


def test_wrong_feature_count():
    m = dtr_train(X1, Y1)
    with pytest.raises(ValueError):
        m.predict(np.zeros((2, 3)))


def test_cross_validate_constant_target(rng):
    ds = _small_ds(rng, 40)
    const = feature_dataset(ds.features, np.full(40, 90.0), ds.column("los"))
    for spec in (ModelSpec("dtr"), ModelSpec("knn", KnnConfig(k=3)), ModelSpec("rfr", RfrConfig(n_estimators=3))):
        res = cross_validate(spec, const, k=4, seed=1)
        assert res.fold_rmse() == [0.0] * 4


def test_cross_validate_deterministic(rng):
    ds = _small_ds(rng, 60)
    a = cross_validate(ModelSpec("rfr", RfrConfig(n_estimators=3)), ds, k=2, seed=5)
    b = cross_validate(ModelSpec("rfr", RfrConfig(n_estimators=3)), ds, k=2, seed=5)
    assert a == b and len(a.folds) == 2


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.floats(0, 200)), min_size=2, max_size=40),
       st.integers(1, 40))
def test_knn_prediction_within_target_range(rows, k):
    x = np.array([[a, b] for a, b, _ in rows])
    y = np.array([t for _, _, t in rows])
    k = min(k, len(y))
    pred = knn_predict(knn_fit(x, y, KnnConfig(k=k)), x)
    assert np.all(pred >= y.min() - 1e-9) and np.all(pred <= y.max() + 1e-9)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(0, 200)), min_size=1, max_size=60),
       st.one_of(st.none(), st.integers(1, 6)))
def test_tree_prediction_within_target_range(rows, depth):
    x = np.array([[a] for a, _ in rows])
    y = np.array([t for _, t in rows])
    m = dtr_train(x, y, DtrConfig(max_depth=depth))
    pred = m.predict(np.linspace(-150, 150, 31)[:, None])
    assert np.all(pred >= y.min() - 1e-9) and np.all(pred <= y.max() + 1e-9)
    assert m.tree.depth() <= (depth if depth is not None else len(y))
