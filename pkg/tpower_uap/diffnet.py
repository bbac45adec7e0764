"""Réseaux séquentiels différentiables (NumPy) avec JVP/VJP exacts.

Convention: images HWC, batchs (N, H, W, C). Toutes les couches travaillent sur
des batchs; les fonctions publiques mono-échantillon ajoutent/retirent l'axe N.

Une linéarisation fige les décisions du passage primal (masques ReLU, argmax
MaxPool) de sorte que JVP et VJP sont exactement transposés l'un de l'autre.
"""

from __future__ import annotations

import hashlib
import logging
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, ClassVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datasets import LabeledDataset
from .errors import CutPointError, EmptyDataError, FormatError, LabelError, ShapeError
from .tensorfile import encode_framed, read_framed, write_framed
from .validation import LayerSpec

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"TPNN1"
MODEL_FORMAT_VERSION = 1

Shape = tuple[int, ...]


class Layer(ABC):
    """Couche d'un réseau séquentiel.

    `forward` retourne la sortie et un état (décisions du passage primal);
    `push` applique la dérivée directionnelle et `pull` son adjoint avec cet état.
    """

    kind: ClassVar[str]

    @abstractmethod
    def output_shape(self, input_shape: Shape) -> Shape: ...

    @abstractmethod
    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]: ...

    @abstractmethod
    def push(self, state: Any, v: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def pull(self, state: Any, u: np.ndarray) -> np.ndarray: ...

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def with_params(self, params: dict[str, np.ndarray]) -> Layer:
        return self

    def param_grads(self, x: np.ndarray, u: np.ndarray) -> dict[str, np.ndarray]:
        return {}

    def hyper(self) -> dict[str, Any]:
        return {}


@dataclass(frozen=True, eq=False)
class Dense(Layer):
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    kind: ClassVar[str] = "dense"

    def __post_init__(self) -> None:
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError(f"Dense: poids {w.shape} et biais {b.shape} incompatibles")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    def output_shape(self, input_shape: Shape) -> Shape:
        if tuple(input_shape) != (self.weight.shape[1],):
            raise ShapeError(f"Dense attend ({self.weight.shape[1]},), reçu {tuple(input_shape)}")
        return (self.weight.shape[0],)

    def forward(self, x):
        return x @ self.weight.T + self.bias, None

    def push(self, state, v):
        return v @ self.weight.T

    def pull(self, state, u):
        return u @ self.weight

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def with_params(self, params):
        return Dense(params["weight"], params["bias"])

    def param_grads(self, x, u):
        return {"weight": u.T @ x, "bias": u.sum(axis=0)}


@dataclass(frozen=True, eq=False)
class Conv2d(Layer):
    kernel: np.ndarray  # (kh, kw, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    stride: int = 1
    padding: int = 0

    kind: ClassVar[str] = "conv2d"

    def __post_init__(self) -> None:
        k = np.asarray(self.kernel, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if k.ndim != 4 or b.shape != (k.shape[3],):
            raise ShapeError(f"Conv2d: noyau {k.shape} et biais {b.shape} incompatibles")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("Conv2d: stride ≥ 1 et padding ≥ 0 requis")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)

    def output_shape(self, input_shape: Shape) -> Shape:
        kh, kw, c_in, c_out = self.kernel.shape
        if len(input_shape) != 3 or input_shape[2] != c_in:
            raise ShapeError(f"Conv2d attend (H, W, {c_in}), reçu {tuple(input_shape)}")
        h, w, _ = input_shape
        h_out = (h + 2 * self.padding - kh) // self.stride + 1
        w_out = (w + 2 * self.padding - kw) // self.stride + 1
        if h_out <= 0 or w_out <= 0:
            raise ShapeError(f"Conv2d: entrée {tuple(input_shape)} trop petite pour le noyau")
        return (h_out, w_out, c_out)

    def _pad(self, x):
        p = self.padding
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))

    def _windows(self, x):
        kh, kw = self.kernel.shape[:2]
        win = sliding_window_view(self._pad(x), (kh, kw), axis=(1, 2))
        return win[:, :: self.stride, :: self.stride]

    def _linear(self, x):
        # (N, Ho, Wo, C, kh, kw) · (kh, kw, C, Co) -> (N, Ho, Wo, Co)
        return np.tensordot(self._windows(x), self.kernel, axes=([3, 4, 5], [2, 0, 1]))

    def forward(self, x):
        return self._linear(x) + self.bias, x.shape

    def push(self, state, v):
        return self._linear(v)

    def pull(self, state, u):
        n, h, w, c = state
        kh, kw = self.kernel.shape[:2]
        s, p = self.stride, self.padding
        h_out, w_out = u.shape[1:3]
        grad = np.zeros((n, h + 2 * p, w + 2 * p, c))
        for a in range(kh):
            for b in range(kw):
                grad[:, a : a + s * (h_out - 1) + 1 : s, b : b + s * (w_out - 1) + 1 : s, :] += u @ self.kernel[a, b].T
        return grad[:, p : p + h, p : p + w, :]

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def with_params(self, params):
        return Conv2d(params["kernel"], params["bias"], self.stride, self.padding)

    def param_grads(self, x, u):
        dk = np.tensordot(self._windows(x), u, axes=([0, 1, 2], [0, 1, 2]))  # (C, kh, kw, Co)
        return {"kernel": dk.transpose(1, 2, 0, 3), "bias": u.sum(axis=(0, 1, 2))}

    def hyper(self):
        return {"stride": self.stride, "padding": self.padding}


class ReLU(Layer):
    kind: ClassVar[str] = "relu"

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x):
        # Dérivée en 0 prise égale à 0
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def push(self, state, v):
        return np.where(state, v, 0.0)

    def pull(self, state, u):
        return np.where(state, u, 0.0)


@dataclass(frozen=True, eq=False)
class _Pool2d(Layer):
    window: int = 2
    stride: int | None = None

    def __post_init__(self) -> None:
        if self.window < 1 or (self.stride is not None and self.stride < 1):
            raise ShapeError("Pooling: fenêtre et stride doivent être ≥ 1")

    @property
    def step(self) -> int:
        return self.stride or self.window

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"{self.kind} attend (H, W, C), reçu {tuple(input_shape)}")
        h, w, c = input_shape
        if h < self.window or w < self.window:
            raise ShapeError(f"{self.kind}: entrée {tuple(input_shape)} plus petite que la fenêtre")
        return ((h - self.window) // self.step + 1, (w - self.window) // self.step + 1, c)

    def _windows(self, x):
        win = sliding_window_view(x, (self.window, self.window), axis=(1, 2))
        return win[:, :: self.step, :: self.step]

    def hyper(self):
        return {"window": self.window, "stride": self.step}


class MaxPool2d(_Pool2d):
    kind: ClassVar[str] = "maxpool"

    def _gather(self, x, idx):
        win = self._windows(x)
        flat = win.reshape(*win.shape[:4], -1)
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def forward(self, x):
        win = self._windows(x)
        flat = win.reshape(*win.shape[:4], -1)
        # argmax retourne la première occurrence: égalités routées vers le plus petit indice
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def push(self, state, v):
        idx, _ = state
        return self._gather(v, idx)

    def pull(self, state, u):
        idx, x_shape = state
        n, i, j, c = np.indices(idx.shape, sparse=True)
        rows = i * self.step + idx // self.window
        cols = j * self.step + idx % self.window
        grad = np.zeros(x_shape)
        np.add.at(grad, (n, rows, cols, c), u)
        return grad


class AvgPool2d(_Pool2d):
    kind: ClassVar[str] = "avgpool"

    def forward(self, x):
        return self._windows(x).mean(axis=(-2, -1)), x.shape

    def push(self, state, v):
        return self._windows(v).mean(axis=(-2, -1))

    def pull(self, state, u):
        grad = np.zeros(state)
        s, w = self.step, self.window
        h_out, w_out = u.shape[1:3]
        share = u / (w * w)
        for a in range(w):
            for b in range(w):
                grad[:, a : a + s * (h_out - 1) + 1 : s, b : b + s * (w_out - 1) + 1 : s, :] += share
        return grad


class Flatten(Layer):
    kind: ClassVar[str] = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def push(self, state, v):
        return v.reshape(v.shape[0], -1)

    def pull(self, state, u):
        return u.reshape(state)


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Dense, Conv2d, ReLU, MaxPool2d, AvgPool2d, Flatten)
}


@dataclass(frozen=True, eq=False)
class Model:
    """Classifieur séquentiel avec points de coupe nommés.

    Le point de coupe d'indice i désigne l'activation après la couche i.
    """

    layers: tuple[Layer, ...]
    input_shape: Shape
    num_classes: int
    cut_points: dict[str, int] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)
    layer_shapes: tuple[Shape, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("Un modèle doit contenir au moins une couche")
        shapes = []
        shape = tuple(int(s) for s in self.input_shape)
        for layer in layers:
            shape = tuple(layer.output_shape(shape))
            shapes.append(shape)
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"Sortie finale {shapes[-1]} ≠ ({self.num_classes},)")
        cuts = dict(self.cut_points) or {f"{layer.kind}_{i}": i for i, layer in enumerate(layers)}
        for name, index in cuts.items():
            if not 0 <= index < len(layers):
                raise CutPointError(f"Point de coupe {name!r} hors limites ({index})")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "cut_points", cuts)
        object.__setattr__(self, "layer_shapes", tuple(shapes))

    def cut_index(self, cut: str | int) -> int:
        """Résout un point de coupe (nom, indice entier, ou indice sous forme de chaîne)."""
        if isinstance(cut, (int, np.integer)) and not isinstance(cut, bool):
            if 0 <= cut < len(self.layers):
                return int(cut)
            raise CutPointError(f"Indice de couche hors limites: {cut}")
        if cut in self.cut_points:
            return self.cut_points[cut]
        if isinstance(cut, str) and cut.isdigit():
            return self.cut_index(int(cut))
        raise CutPointError(f"Point de coupe inconnu: {cut!r}", {"available": sorted(self.cut_points)})

    def cut_shape(self, cut: str | int) -> Shape:
        return self.layer_shapes[self.cut_index(cut)]

    def with_layers(self, layers: Sequence[Layer], **metadata: Any) -> Model:
        return replace(self, layers=tuple(layers), metadata={**self.metadata, **metadata})


def layer_depth_ratio(model: Model, cut: str | int) -> float:
    """Profondeur relative du point de coupe: (indice + 1) / nombre de couches."""
    return (model.cut_index(cut) + 1) / len(model.layers)


def _check_batch(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"Entrée de forme {x.shape[1:]}, attendu {model.input_shape}")
    return x


def _check_single(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ShapeError(f"Entrée de forme {x.shape}, attendu {model.input_shape}")
    return x[None]


def _run(layers: Sequence[Layer], x: np.ndarray) -> tuple[np.ndarray, list[Any], list[np.ndarray]]:
    states, inputs = [], []
    for layer in layers:
        inputs.append(x)
        x, state = layer.forward(x)
        states.append(state)
    return x, states, inputs


class Linearization:
    """Passage primal figé d'un batch jusqu'à un point de coupe.

    `push` (JVP) et `pull` (VJP) réutilisent les mêmes masques et argmax.
    """

    def __init__(self, model: Model, cut: str | int, x_batch: np.ndarray):
        self.model = model
        self.index = model.cut_index(cut)
        self.layers = model.layers[: self.index + 1]
        self.x = _check_batch(model, x_batch)
        self.output, self.states, _ = _run(self.layers, self.x)

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    @property
    def in_shape(self) -> Shape:
        return self.model.input_shape

    @property
    def out_shape(self) -> Shape:
        return self.model.layer_shapes[self.index]

    def push(self, v: np.ndarray) -> np.ndarray:
        """J(x_n) v_n pour chaque échantillon; v de forme (N, *in) ou (*in) (diffusé)."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape == self.in_shape:
            v = np.broadcast_to(v, (self.batch_size, *self.in_shape))
        if v.shape != (self.batch_size, *self.in_shape):
            raise ShapeError(f"Direction de forme {v.shape}, attendu {(self.batch_size, *self.in_shape)}")
        for layer, state in zip(self.layers, self.states):
            v = layer.push(state, v)
        return v

    def pull(self, u: np.ndarray) -> np.ndarray:
        """J(x_n)ᵀ u_n pour chaque échantillon; u de forme (N, *out)."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.batch_size, *self.out_shape):
            raise ShapeError(f"Covecteur de forme {u.shape}, attendu {(self.batch_size, *self.out_shape)}")
        for layer, state in zip(reversed(self.layers), reversed(self.states)):
            u = layer.pull(state, u)
        return u


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits d'un échantillon."""
    out, _, _ = _run(model.layers, _check_single(model, x))
    return out[0]


def forward_batch(model: Model, x_batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits d'un batch, calculés par paquets pour borner la mémoire."""
    x_batch = _check_batch(model, x_batch)
    outs = [_run(model.layers, x_batch[i : i + batch_size])[0] for i in range(0, len(x_batch), batch_size)]
    if not outs:
        return np.zeros((0, model.num_classes))
    return np.concatenate(outs, axis=0)


def forward_to_layer(model: Model, cut: str | int, x: np.ndarray) -> np.ndarray:
    """Activation l(x) après la couche désignée par `cut`."""
    index = model.cut_index(cut)
    out, _, _ = _run(model.layers[: index + 1], _check_single(model, x))
    return out[0]


def jvp(model: Model, cut: str | int, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """J_i(x) v: dérivée directionnelle de x ↦ l(x) dans la direction v."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != model.input_shape:
        raise ShapeError(f"Direction de forme {v.shape}, attendu {model.input_shape}")
    lin = Linearization(model, cut, _check_single(model, x))
    return lin.push(v[None])[0]


def vjp(model: Model, cut: str | int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """J_i(x)ᵀ u avec la même linéarisation que `jvp`."""
    lin = Linearization(model, cut, _check_single(model, x))
    u = np.asarray(u, dtype=np.float64)
    if u.shape != lin.out_shape:
        raise ShapeError(f"Covecteur de forme {u.shape}, attendu {lin.out_shape}")
    return lin.pull(u[None])[0]


def predict(model: Model, x: np.ndarray) -> int:
    """Classe prédite (argmax des logits, égalités → plus petit indice)."""
    return int(np.argmax(forward(model, x)))


def predict_batch(model: Model, x_batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.argmax(forward_batch(model, x_batch, batch_size), axis=1)


def accuracy(model: Model, samples: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(labels) == 0:
        raise EmptyDataError("accuracy: aucun échantillon")
    return float(np.mean(predict_batch(model, samples, batch_size) == np.asarray(labels)))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Perte moyenne et gradient par rapport aux logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(-np.mean(np.log(probs[rows, labels] + 1e-300)))
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / n


def input_gradient(model: Model, x_batch: np.ndarray, logits_grad: np.ndarray) -> np.ndarray:
    """Rétropropage un gradient de logits jusqu'à l'entrée (par échantillon)."""
    lin = Linearization(model, len(model.layers) - 1, x_batch)
    return lin.pull(logits_grad)


def _backprop(layers: Sequence[Layer], x: np.ndarray, labels: np.ndarray) -> tuple[float, list[dict[str, np.ndarray]]]:
    logits, states, inputs = _run(layers, x)
    loss, u = softmax_cross_entropy(logits, labels)
    grads: list[dict[str, np.ndarray]] = [{} for _ in layers]
    for index in range(len(layers) - 1, -1, -1):
        layer = layers[index]
        grads[index] = layer.param_grads(inputs[index], u)
        if index > 0:
            u = layer.pull(states[index], u)
    return loss, grads


def train_sgd(
    model: Model,
    dataset: LabeledDataset,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> Model:
    """
    SGD simple sur l'entropie croisée, mélange déterministe par graine.

    Args:
        model: Modèle initial (non modifié)
        dataset: Données d'entraînement
        epochs: Nombre d'époques
        lr: Pas d'apprentissage (0 laisse les poids inchangés)
        batch_size: Taille des mini-batchs
        seed: Graine du mélange

    Returns:
        Nouveau modèle; `metadata` contient train_loss, train_accuracy et initial_train_loss
    """
    if len(dataset) == 0:
        raise EmptyDataError("train_sgd: dataset vide")
    labels = dataset.labels
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise LabelError(f"Étiquettes hors de [0, {model.num_classes})")
    samples = _check_batch(model, dataset.samples)

    layers = list(model.layers)
    initial_loss = softmax_cross_entropy(forward_batch(model, samples), labels)[0]
    rng = np.random.default_rng(seed)
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = _backprop(layers, samples[idx], labels[idx])
            epoch_loss += loss * len(idx)
            for i, (layer, grad) in enumerate(zip(layers, grads)):
                if grad:
                    params = layer.params()
                    layers[i] = layer.with_params({k: params[k] - lr * grad[k] for k in params})
        logger.debug("Époque %d/%d: perte moyenne %.4f", epoch + 1, epochs, epoch_loss / n, extra={"epoch": epoch + 1})

    trained = model.with_layers(layers)
    logits = forward_batch(trained, samples)
    final_loss = softmax_cross_entropy(logits, labels)[0]
    train_acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    logger.info("Entraînement terminé: perte %.4f -> %.4f, précision %.3f", initial_loss, final_loss, train_acc)
    return trained.with_layers(
        layers,
        initial_train_loss=float(initial_loss),
        train_loss=float(final_loss),
        train_accuracy=train_acc,
        epochs=int(epochs),
        seed=int(seed),
    )


def _init_dense(rng: np.random.Generator, n_in: int, n_out: int) -> Dense:
    return Dense(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)), np.zeros(n_out))


def build_model(
    layers: Sequence[LayerSpec | dict[str, Any]],
    input_shape: Shape,
    num_classes: int,
    seed: int = 0,
    cut_points: dict[str, int] | None = None,
) -> Model:
    """Construit un modèle depuis des LayerSpec (initialisation He-normale, biais nuls)."""
    rng = np.random.default_rng(seed)
    built: list[Layer] = []
    shape = tuple(input_shape)
    for raw in layers:
        spec = raw if isinstance(raw, LayerSpec) else LayerSpec.model_validate(raw)
        if spec.kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"dense après une sortie de forme {shape}: ajouter une couche flatten")
            layer: Layer = _init_dense(rng, shape[0], spec.units)
        elif spec.kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"conv2d attend une entrée (H, W, C), reçu {shape}")
            k = spec.kernel_size
            fan_in = k * k * shape[2]
            kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(k, k, shape[2], spec.filters))
            layer = Conv2d(kernel, np.zeros(spec.filters), spec.stride, spec.padding)
        elif spec.kind == "relu":
            layer = ReLU()
        elif spec.kind == "maxpool":
            layer = MaxPool2d(spec.window)
        elif spec.kind == "avgpool":
            layer = AvgPool2d(spec.window)
        else:
            layer = Flatten()
        shape = layer.output_shape(shape)
        built.append(layer)
    return Model(tuple(built), tuple(input_shape), num_classes, cut_points or {}, {"init_seed": int(seed)})


def small_convnet_spec(num_classes: int) -> list[LayerSpec]:
    return [
        LayerSpec(kind="conv2d", filters=8, kernel_size=3, padding=1),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool", window=2),
        LayerSpec(kind="conv2d", filters=16, kernel_size=3, padding=1),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool", window=2),
        LayerSpec(kind="flatten"),
        LayerSpec(kind="dense", units=num_classes),
    ]


def small_convnet(input_shape: Shape, num_classes: int, seed: int = 0) -> Model:
    """Petit réseau convolutif utilisé pour l'expérience de bureau."""
    return build_model(small_convnet_spec(num_classes), input_shape, num_classes, seed)


# Sérialisation ---------------------------------------------------------


def _model_header(model: Model) -> tuple[dict[str, Any], list[np.ndarray]]:
    arrays: list[np.ndarray] = []
    layer_entries = []
    for layer in model.layers:
        params = layer.params()
        layer_entries.append({"kind": layer.kind, "hyper": layer.hyper(), "params": list(params)})
        arrays.extend(params.values())
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "cut_points": model.cut_points,
        "layers": layer_entries,
        "metadata": model.metadata,
        "block_shapes": [list(a.shape) for a in arrays],
    }
    return header, arrays


def encode_model(model: Model) -> bytes:
    header, arrays = _model_header(model)
    return encode_framed(MODEL_MAGIC, header, arrays)


def model_id(model: Model) -> str:
    """Empreinte du contenu sérialisé (16 caractères hexadécimaux)."""
    return hashlib.sha256(encode_model(model)).hexdigest()[:16]


def save_model(model: Model, path: Path) -> Path:
    header, arrays = _model_header(model)
    write_framed(path, MODEL_MAGIC, header, arrays)
    logger.info("Modèle écrit -> %s", path)
    return Path(path)


def load_model(path: Path) -> Model:
    header, arrays = read_framed(path, MODEL_MAGIC)
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatError(f"Version de format de modèle non supportée: {header.get('format_version')}")
    blocks = iter(arrays)
    layers: list[Layer] = []
    for entry in header["layers"]:
        kind = entry["kind"]
        params = {name: next(blocks) for name in entry["params"]}
        hyper = entry.get("hyper", {})
        if kind == "dense":
            layers.append(Dense(params["weight"], params["bias"]))
        elif kind == "conv2d":
            layers.append(Conv2d(params["kernel"], params["bias"], hyper["stride"], hyper["padding"]))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "maxpool":
            layers.append(MaxPool2d(hyper["window"], hyper["stride"]))
        elif kind == "avgpool":
            layers.append(AvgPool2d(hyper["window"], hyper["stride"]))
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise FormatError(f"Type de couche inconnu: {kind!r}")
    return Model(
        tuple(layers),
        tuple(header["input_shape"]),
        int(header["num_classes"]),
        dict(header["cut_points"]),
        dict(header.get("metadata", {})),
    )
