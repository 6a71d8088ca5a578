"""Multiclass logistic regression on sparse-coding features."""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .inference import encode

STD_FLOOR = 1e-6
CHUNK = 1024


def feature_layout(encoding, all_scales=False):
    """``[(name, shape), ...]`` in concatenation order for one example."""
    single = encoding.x[0].ndim == 3
    shape = (lambda a: a.shape) if single else (lambda a: a.shape[1:])
    layout = [(f"u{i + 1}", shape(u)) for i, u in enumerate(encoding.u)]
    if all_scales:
        layout += [(f"x{i + 1}", shape(x)) for i, x in enumerate(encoding.x)]
    else:
        layout.append((f"x{encoding.depth}", shape(encoding.x[-1])))
    return layout


def featurize(encoding, all_scales=False):
    """Flatten ``u_1 .. u_L`` then ``x_L`` into one vector per example.

    With ``all_scales=True`` every ``x_l`` is appended instead of only the
    deepest one. Returns ``(F,)`` for a single encoding or ``(N, F)`` for a
    batched one.
    """
    single = encoding.x[0].ndim == 3
    parts = list(encoding.u) + (list(encoding.x) if all_scales else [encoding.x[-1]])
    if single:
        return np.concatenate([np.ravel(p) for p in parts]).astype(np.float32)
    n = len(parts[0])
    return np.concatenate([np.reshape(p, (n, -1)) for p in parts], axis=1).astype(np.float32)


def encode_features(model, images, settings=None, threads=1, all_scales=False, chunk=CHUNK):
    """Encode ``images`` and featurize them ``chunk`` examples at a time.

    Same result as ``featurize(encode(model, images, ...))`` without ever
    holding the full encoding in memory, which matters for deep models
    (a 3-layer MNIST feature row is ~40k floats).
    """
    images = np.asarray(images, dtype=np.float32)
    out = None
    for start in range(0, len(images), chunk):
        f = featurize(encode(model, images[start:start + chunk], settings, threads=threads),
                      all_scales)
        if out is None:
            out = np.empty((len(images), f.shape[1]), dtype=np.float32)
        out[start:start + len(f)] = f
    if out is None:
        raise ShapeError("no images to encode")
    return out


def _column_stats(features):
    # float64 accumulation in chunks, so no full-size float64 copy is made
    n = len(features)
    total = np.zeros(features.shape[1])
    for start in range(0, n, CHUNK):
        total += features[start:start + CHUNK].sum(axis=0, dtype=np.float64)
    mean = total / n
    sq = np.zeros_like(total)
    for start in range(0, n, CHUNK):
        d = features[start:start + CHUNK] - mean
        sq += np.einsum("ij,ij->j", d, d)
    return mean, np.sqrt(sq / n)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class LogisticModel:
    weights: np.ndarray  # (classes, features)
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def class_count(self):
        return self.weights.shape[0]

    def standardize(self, features):
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2 or features.shape[1] != self.weights.shape[1]:
            raise ShapeError(
                f"expected (N, {self.weights.shape[1]}) features, got {features.shape}")
        return (features - self.mean) / self.std

    def logits(self, features):
        features = np.asarray(features, dtype=np.float32)
        if len(features) <= CHUNK:
            return self.standardize(features) @ self.weights.T + self.bias
        return np.concatenate([self.logits(features[i:i + CHUNK])
                               for i in range(0, len(features), CHUNK)])

    def predict_proba(self, features):
        return softmax(self.logits(features).astype(np.float64))

    def predict(self, features):
        # argmax returns the lowest index among ties
        return np.argmax(self.logits(features), axis=1)

    def header(self):
        return {"classes": int(self.class_count), "features": int(self.weights.shape[1])}

    def tensors(self):
        return [("clf_weights", self.weights), ("clf_bias", self.bias),
                ("clf_mean", self.mean), ("clf_std", self.std)]

    @classmethod
    def from_container(cls, header, tensors):
        return cls(weights=tensors["clf_weights"], bias=tensors["clf_bias"],
                   mean=tensors["clf_mean"], std=tensors["clf_std"])


def cross_entropy(model, features, labels):
    p = model.predict_proba(features)
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-300))))


def fit(features, labels, lr=0.1, epochs=30, seed=0, batch_size=128, classes=None,
        callback=None):
    """Fit softmax regression by minibatch gradient descent.

    Features are standardized with training mean/std (std floored at
    ``1e-6``); weights start at zero. ``callback(epoch, model)`` is called
    after every epoch.
    """
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels)
    if features.ndim != 2 or len(features) != len(labels):
        raise ShapeError(
            f"features {features.shape} and labels {labels.shape} do not line up")
    if len(labels) == 0:
        raise ShapeError("fit needs at least one example")
    if labels.dtype.kind not in "iu" or labels.min() < 0:
        raise ValueError("labels must be nonnegative integers")
    classes = int(classes or labels.max() + 1)
    if labels.max() >= classes:
        raise ValueError(f"label {labels.max()} out of range for {classes} classes")
    mean, std = _column_stats(features)
    std = np.maximum(std, STD_FLOOR)
    model = LogisticModel(
        weights=np.zeros((classes, features.shape[1]), dtype=np.float32),
        bias=np.zeros(classes, dtype=np.float32),
        mean=mean.astype(np.float32), std=std.astype(np.float32))
    onehot = np.eye(classes, dtype=np.float32)[labels]
    rng = np.random.default_rng(seed)
    n = len(features)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            zb = (features[idx] - model.mean) / model.std
            p = softmax(zb @ model.weights.T + model.bias)
            delta = (p - onehot[idx]) / np.float32(len(idx))
            model.weights -= np.float32(lr) * (delta.T @ zb)
            model.bias -= np.float32(lr) * delta.sum(axis=0)
        if callback is not None:
            callback(epoch, model)
    return model


def accuracy(model, features, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(model.predict(features) == labels))
