"""Tests pour les réseaux différentiables (passage avant, JVP, VJP, entraînement)."""

import itertools

import numpy as np
import pytest

from conftest import dense_model
from tpower_uap.datasets import LabeledDataset
from tpower_uap.diffnet import (
    AvgPool2d,
    Conv2d,
    Dense,
    Flatten,
    Linearization,
    MaxPool2d,
    Model,
    ReLU,
    accuracy,
    build_model,
    forward,
    forward_batch,
    forward_to_layer,
    jvp,
    layer_depth_ratio,
    load_model,
    model_id,
    predict,
    save_model,
    small_convnet,
    softmax_cross_entropy,
    train_sgd,
    vjp,
)
from tpower_uap.errors import CutPointError, EmptyDataError, FormatError, LabelError, ShapeError
from tpower_uap.tensorfile import write_tensor


def _decisions(model, cut, x):
    """Masques ReLU et argmax MaxPool du passage primal."""
    lin = Linearization(model, cut, x[None])
    out = []
    for layer, state in zip(lin.layers, lin.states):
        if isinstance(layer, ReLU):
            out.append(state)
        elif isinstance(layer, MaxPool2d):
            out.append(state[0])
    return out


def _same(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def _naive_conv(x, kernel, bias, stride, padding):
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    kh, kw, _, c_out = kernel.shape
    h_out = (xp.shape[0] - kh) // stride + 1
    w_out = (xp.shape[1] - kw) // stride + 1
    out = np.zeros((h_out, w_out, c_out))
    for i in range(h_out):
        for j in range(w_out):
            patch = xp[i * stride : i * stride + kh, j * stride : j * stride + kw, :]
            out[i, j] = np.tensordot(patch, kernel, axes=([0, 1, 2], [0, 1, 2])) + bias
    return out


class TestModelStructure:
    """Tests pour les formes et les points de coupe."""

    def test_layer_shapes(self, conv_model):
        """Formes après chaque couche."""
        assert conv_model.layer_shapes == ((8, 8, 3), (8, 8, 3), (4, 4, 3), (2, 2, 4), (1, 1, 4), (4,), (3,))

    def test_default_cut_names(self, conv_model):
        """Un point de coupe nommé "<type>_<indice>" par couche."""
        assert conv_model.cut_points == {
            "conv2d_0": 0,
            "relu_1": 1,
            "maxpool_2": 2,
            "conv2d_3": 3,
            "avgpool_4": 4,
            "flatten_5": 5,
            "dense_6": 6,
        }

    def test_cut_index_lookup(self, conv_model):
        """Résolution par nom, par entier et par chaîne numérique."""
        assert conv_model.cut_index("conv2d_3") == 3
        assert conv_model.cut_index(3) == 3
        assert conv_model.cut_index("3") == 3
        assert conv_model.cut_shape("maxpool_2") == (4, 4, 3)

    @pytest.mark.parametrize("cut", ["nope", 7, -1, "12"])
    def test_unknown_cut(self, conv_model, cut):
        """Point de coupe inconnu ou hors limites."""
        with pytest.raises(CutPointError):
            conv_model.cut_index(cut)

    def test_final_shape_must_match_classes(self):
        """La dernière couche doit produire num_classes logits."""
        with pytest.raises(ShapeError):
            Model((Dense(np.ones((2, 3)), np.zeros(2)),), (3,), 3)

    def test_dense_requires_flatten(self):
        """Une couche dense sur une image exige un flatten."""
        with pytest.raises(ShapeError):
            build_model([{"kind": "dense", "units": 2}], (4, 4, 1), 2)

    def test_depth_ratio(self, conv_model):
        """Profondeur relative (indice + 1) / nombre de couches."""
        assert layer_depth_ratio(conv_model, "conv2d_3") == pytest.approx(4 / 7)
        assert layer_depth_ratio(conv_model, "dense_6") == 1.0

    def test_small_convnet_shapes(self):
        """Le réseau de l'expérience de bureau sur des images 32×32×3."""
        model = small_convnet((32, 32, 3), 10, seed=0)
        assert model.cut_shape("conv2d_3") == (16, 16, 16)
        assert model.cut_shape("flatten_6") == (1024,)
        assert model.layer_shapes[-1] == (10,)


class TestForward:
    """Tests pour le passage avant."""

    def test_conv_matches_naive_loop(self, rng):
        """Convolution avec stride et padding contre une boucle explicite."""
        kernel = rng.normal(size=(3, 3, 2, 4))
        bias = rng.normal(size=4)
        layer = Conv2d(kernel, bias, stride=2, padding=1)
        x = rng.normal(size=(1, 5, 5, 2))
        out, _ = layer.forward(x)
        assert out.shape == (1, *layer.output_shape((5, 5, 2)))
        np.testing.assert_allclose(out[0], _naive_conv(x[0], kernel, bias, 2, 1), atol=1e-12)

    def test_forward_batch_matches_single(self, conv_model, rng):
        """Le calcul par paquets donne les mêmes logits que le calcul unitaire."""
        x = rng.uniform(size=(5, 8, 8, 2))
        batched = forward_batch(conv_model, x, batch_size=2)
        for i in range(5):
            np.testing.assert_allclose(batched[i], forward(conv_model, x[i]), atol=1e-12)

    def test_forward_to_last_layer_is_logits(self, conv_model, rng):
        """L'activation au dernier point de coupe est le vecteur de logits."""
        x = rng.uniform(size=(8, 8, 2))
        np.testing.assert_array_equal(forward_to_layer(conv_model, "dense_6", x), forward(conv_model, x))

    def test_wrong_input_shape(self, conv_model):
        """Une entrée mal formée est refusée."""
        with pytest.raises(ShapeError):
            forward(conv_model, np.zeros((8, 8, 3)))

    def test_predict_ties_lowest_class(self):
        """Logits égaux: la plus petite classe."""
        model = dense_model(np.zeros((3, 2)))
        assert predict(model, np.array([0.3, 0.4])) == 0

    def test_accuracy_empty(self, conv_model):
        """Précision indéfinie sans échantillon."""
        with pytest.raises(EmptyDataError):
            accuracy(conv_model, np.zeros((0, 8, 8, 2)), np.zeros(0, dtype=np.int64))


class TestDerivatives:
    """Tests pour JVP et VJP."""

    def test_jvp_matches_finite_differences(self, conv_model):
        """Différences centrées quand aucune décision primale ne change."""
        h = 1e-5
        checked = 0
        for seed in range(30):
            local = np.random.default_rng(seed)
            x = local.uniform(size=(8, 8, 2))
            v = local.normal(size=(8, 8, 2))
            for cut in conv_model.cut_points:
                base = _decisions(conv_model, cut, x)
                above, below = _decisions(conv_model, cut, x + h * v), _decisions(conv_model, cut, x - h * v)
                if not (_same(base, above) and _same(base, below)):
                    continue
                diff = forward_to_layer(conv_model, cut, x + h * v) - forward_to_layer(conv_model, cut, x - h * v)
                fd = diff / (2 * h)
                np.testing.assert_allclose(jvp(conv_model, cut, x, v), fd, atol=1e-6)
                checked += 1
        assert checked >= 100

    def test_adjoint_identity_every_cut(self, conv_model, rng):
        """⟨J v, u⟩ = ⟨v, Jᵀ u⟩ pour chaque point de coupe, sur 30 entrées."""
        for x, cut in itertools.product(rng.uniform(size=(30, 8, 8, 2)), conv_model.cut_points):
            v = rng.normal(size=(8, 8, 2))
            u = rng.normal(size=conv_model.cut_shape(cut))
            lhs = float(np.sum(jvp(conv_model, cut, x, v) * u))
            rhs = float(np.sum(v * vjp(conv_model, cut, x, u)))
            assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)

    def test_jvp_is_linear(self, conv_model, rng):
        """jvp(αv₁ + βv₂) = α·jvp(v₁) + β·jvp(v₂) à chaque point de coupe."""
        for x, cut in itertools.product(rng.uniform(size=(10, 8, 8, 2)), conv_model.cut_points):
            v1, v2 = rng.normal(size=(2, 8, 8, 2))
            alpha, beta = rng.normal(size=2)
            lhs = jvp(conv_model, cut, x, alpha * v1 + beta * v2)
            rhs = alpha * jvp(conv_model, cut, x, v1) + beta * jvp(conv_model, cut, x, v2)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)

    def test_linearization_batch_matches_single(self, conv_model, rng):
        """push sur un batch = jvp échantillon par échantillon."""
        x = rng.uniform(size=(3, 8, 8, 2))
        v = rng.normal(size=(8, 8, 2))
        lin = Linearization(conv_model, "conv2d_3", x)
        pushed = lin.push(v)
        assert pushed.shape == (3, 2, 2, 4)
        for n in range(3):
            np.testing.assert_allclose(pushed[n], jvp(conv_model, "conv2d_3", x[n], v), atol=1e-12)

    def test_relu_derivative_at_zero(self):
        """La dérivée de ReLU en 0 vaut 0."""
        model = Model((Dense(np.eye(2), np.zeros(2)), ReLU()), (2,), 2)
        np.testing.assert_array_equal(jvp(model, 1, np.array([0.0, 1.0]), np.array([1.0, 1.0])), [0.0, 1.0])

    def test_maxpool_ties_route_to_first(self):
        """Égalités dans une fenêtre: gradient vers la première position."""
        layer = MaxPool2d(2)
        _, state = layer.forward(np.ones((1, 2, 2, 1)))
        grad = layer.pull(state, np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(grad[0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])

    @pytest.mark.parametrize(
        "layer,shape",
        [
            (AvgPool2d(2, stride=1), (2, 4, 5, 3)),
            (MaxPool2d(3, stride=2), (2, 7, 7, 2)),
            (Flatten(), (2, 3, 3, 2)),
        ],
    )
    def test_layer_push_pull_adjoint(self, layer, shape, rng):
        """Chaque couche isolée: push et pull sont transposés (fenêtres recouvrantes incluses)."""
        x = rng.normal(size=shape)
        out, state = layer.forward(x)
        v = rng.normal(size=shape)
        u = rng.normal(size=out.shape)
        lhs = float(np.sum(layer.push(state, v) * u))
        assert lhs == pytest.approx(float(np.sum(v * layer.pull(state, u))), rel=1e-10)

    def test_conv_strided_adjoint(self, rng):
        """Convolution avec stride 2 et padding 1: pull est l'adjoint de push."""
        layer = Conv2d(rng.normal(size=(3, 3, 2, 3)), np.zeros(3), stride=2, padding=1)
        x = rng.normal(size=(2, 6, 7, 2))
        out, state = layer.forward(x)
        v = rng.normal(size=x.shape)
        u = rng.normal(size=out.shape)
        lhs = float(np.sum(layer.push(state, v) * u))
        assert lhs == pytest.approx(float(np.sum(v * layer.pull(state, u))), rel=1e-10)


class TestTraining:
    """Tests pour les gradients de paramètres et train_sgd."""

    def test_cross_entropy_gradient(self, rng):
        """Gradient de l'entropie croisée contre différences finies."""
        logits = rng.normal(size=(3, 4))
        labels = np.array([0, 2, 1])
        _, grad = softmax_cross_entropy(logits, labels)
        h = 1e-6
        for i, j in [(0, 0), (1, 3), (2, 1)]:
            bumped = logits.copy()
            bumped[i, j] += h
            lowered = logits.copy()
            lowered[i, j] -= h
            fd = (softmax_cross_entropy(bumped, labels)[0] - softmax_cross_entropy(lowered, labels)[0]) / (2 * h)
            assert grad[i, j] == pytest.approx(fd, abs=1e-7)

    def test_conv_param_grads(self, rng):
        """⟨u, conv_D(x)⟩ = ⟨∂k, D⟩: la sortie est linéaire en le noyau."""
        layer = Conv2d(rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4), stride=1, padding=1)
        x = rng.normal(size=(2, 5, 5, 2))
        out, _ = layer.forward(x)
        u = rng.normal(size=out.shape)
        grads = layer.param_grads(x, u)
        direction = rng.normal(size=layer.kernel.shape)
        directional = Conv2d(direction, np.zeros(4), stride=1, padding=1)
        lhs = float(np.sum(u * directional.push(None, x)))
        assert lhs == pytest.approx(float(np.sum(grads["kernel"] * direction)), rel=1e-10)
        np.testing.assert_allclose(grads["bias"], u.sum(axis=(0, 1, 2)))

    def test_dense_param_grads(self, rng):
        """Gradient de Dense: uᵀx et Σu."""
        layer = Dense(rng.normal(size=(3, 4)), np.zeros(3))
        x = rng.normal(size=(5, 4))
        u = rng.normal(size=(5, 3))
        direction = rng.normal(size=(3, 4))
        grads = layer.param_grads(x, u)
        assert float(np.sum(u * (x @ direction.T))) == pytest.approx(float(np.sum(grads["weight"] * direction)))

    @pytest.fixture
    def linear_model(self):
        return build_model([{"kind": "flatten"}, {"kind": "dense", "units": 2}], (8, 8, 1), 2, seed=0)

    def test_zero_lr_keeps_weights(self, linear_model, tiny_dataset):
        """lr = 0: poids inchangés."""
        trained = train_sgd(linear_model, tiny_dataset, epochs=2, lr=0.0, batch_size=3, seed=0)
        np.testing.assert_array_equal(trained.layers[1].weight, linear_model.layers[1].weight)

    def test_loss_decreases(self, linear_model, tiny_dataset):
        """La perte d'entraînement diminue."""
        trained = train_sgd(linear_model, tiny_dataset, epochs=30, lr=0.1, batch_size=4, seed=0)
        assert trained.metadata["train_loss"] < trained.metadata["initial_train_loss"]
        assert trained.metadata["epochs"] == 30
        assert 0.0 <= trained.metadata["train_accuracy"] <= 1.0

    def test_deterministic(self, linear_model, tiny_dataset):
        """Même graine, mêmes poids."""
        a = train_sgd(linear_model, tiny_dataset, epochs=3, lr=0.1, batch_size=3, seed=4)
        b = train_sgd(linear_model, tiny_dataset, epochs=3, lr=0.1, batch_size=3, seed=4)
        np.testing.assert_array_equal(a.layers[1].weight, b.layers[1].weight)

    def test_label_out_of_range(self, linear_model):
        """Étiquette ≥ num_classes refusée."""
        dataset = LabeledDataset(np.zeros((2, 8, 8, 1)), np.array([0, 5]))
        with pytest.raises(LabelError):
            train_sgd(linear_model, dataset, epochs=1, lr=0.1, batch_size=2, seed=0)


class TestSerialization:
    """Tests pour save_model / load_model."""

    def test_save_load_preserves_model(self, conv_model, tmp_path, rng):
        """Le modèle relu calcule les mêmes logits et garde son empreinte."""
        path = save_model(conv_model, tmp_path / "m.tpnn")
        loaded = load_model(path)
        x = rng.uniform(size=(8, 8, 2))
        np.testing.assert_array_equal(forward(loaded, x), forward(conv_model, x))
        assert loaded.cut_points == conv_model.cut_points
        assert loaded.metadata == conv_model.metadata
        assert model_id(loaded) == model_id(conv_model)

    def test_wrong_magic(self, tmp_path):
        """Un TensorFile n'est pas un modèle."""
        path = write_tensor(tmp_path / "x.tnsr", np.zeros(3))
        with pytest.raises(FormatError):
            load_model(path)
