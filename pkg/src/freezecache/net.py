"""Minimal feedforward classifier machinery shared by the reference model
and the per-layer reducers.

Parameters live in float64 end to end so finite-difference checks stay
sharp; float32 inputs are upcast on entry. The cross-entropy loss is summed
over the batch rather than averaged, so duplicating a row doubles its
gradient contribution exactly; the SGD step divides by the batch size,
keeping the learning rate batch-size stable.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import TrainingDivergedError

# One (weights, bias) pair per affine layer, hidden layers ReLU-activated.
Params = list[tuple[np.ndarray, np.ndarray]]


def affine_relu(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.maximum(x @ w + b, 0.0)


def init_params(dims: Sequence[int], seed: int) -> Params:
    """He-initialized parameters for the affine chain dims[0] -> dims[-1]."""
    if len(dims) < 2:
        raise ValueError("need at least an input and an output dimension")
    if any(int(d) < 1 for d in dims):
        raise ValueError(f"layer dims must be positive, got {list(dims)}")
    rng = np.random.default_rng(seed)
    params: Params = []
    for din, dout in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((din, dout)) * np.sqrt(2.0 / din)
        params.append((w, np.zeros(dout)))
    return params


def forward(params: Params, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Forward pass; returns (hidden post-activations, logits)."""
    a = np.asarray(x, dtype=np.float64)
    hidden: list[np.ndarray] = []
    for w, b in params[:-1]:
        a = affine_relu(a, w, b)
        hidden.append(a)
    w, b = params[-1]
    return hidden, a @ w + b


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(params: Params, x: np.ndarray, y: np.ndarray) -> float:
    """Softmax cross-entropy summed over the batch."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).ravel()
    _, logits = forward(params, x)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(x.shape[0]), y].sum())


def loss_and_grads(params: Params, x: np.ndarray, y: np.ndarray) -> tuple[float, Params]:
    """Summed cross-entropy loss and its gradients for every parameter."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).ravel()
    if y.shape[0] != x.shape[0]:
        raise ValueError("batch and label counts differ")
    hidden, logits = forward(params, x)
    logp = _log_softmax(logits)
    n = x.shape[0]
    total = float(-logp[np.arange(n), y].sum())

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    acts = [x] + hidden
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params)  # type: ignore[list-item]
    for li in range(len(params) - 1, -1, -1):
        grads[li] = (acts[li].T @ delta, delta.sum(axis=0))
        if li > 0:
            # post-activation > 0 marks exactly the active ReLU units
            delta = (delta @ params[li][0].T) * (hidden[li - 1] > 0)
    return total, grads


def predict(params: Params, x: np.ndarray) -> np.ndarray:
    _, logits = forward(params, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return np.argmax(logits, axis=1)


def accuracy(params: Params, x: np.ndarray, y: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.int64).ravel()
    return float(np.mean(predict(params, x) == y))


def train_sgd(
    params: Params,
    x: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    lr: float,
    batch_size: int = 32,
    seed: int = 0,
) -> Params:
    """Plain mini-batch SGD. Returns new parameters; inputs are untouched.

    Zero epochs returns a copy of the initial parameters. A non-finite
    epoch loss raises TrainingDivergedError naming the epoch.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    if x.shape[0] == 0:
        raise ValueError("cannot train on an empty batch")
    params = [(w.copy(), b.copy()) for w, b in params]
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    # overflow/invalid here surface as the divergence error, not warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                batch_loss, grads = loss_and_grads(params, x[idx], y[idx])
                epoch_loss += batch_loss
                scale = lr / idx.size
                params = [
                    (w - scale * gw, b - scale * gb)
                    for (w, b), (gw, gb) in zip(params, grads)
                ]
            if not np.isfinite(epoch_loss):
                raise TrainingDivergedError(epoch, epoch_loss)
    return params
