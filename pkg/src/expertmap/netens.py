"""Shallow sigmoid-net ensembles trained to propagate the expert function.

Each net is input -> sigmoid(h1) -> sigmoid(h2) -> sigmoid scalar, pretrained
layerwise as a denoising autoencoder and then trained by plain full-batch
gradient descent on squared error plus an L2 weight penalty.  The ensemble's
concatenated first-layer activations define the learned metric.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit as sigmoid

from .errors import TrainingDiverged, ValidationError


@dataclass(frozen=True)
class NetHyper:
    h1: int
    h2: int
    seed: int
    dropout_rate: float = 0.0
    weight_decay: float = 1e-4
    learning_rate: float = 0.5
    epochs: int = 200


@dataclass(frozen=True)
class Net:
    W1: np.ndarray   # (h1, m)
    b1: np.ndarray   # (h1,)
    W2: np.ndarray   # (h2, h1)
    b2: np.ndarray   # (h2,)
    V: np.ndarray    # (1, h2)
    b3: np.ndarray   # (1,)
    hyper: NetHyper

    @property
    def n_inputs(self) -> int:
        return self.W1.shape[1]


@dataclass(frozen=True)
class TrainReport:
    final_cost: float          # squared-error term only, no weight penalty
    trajectory: np.ndarray     # full loss per epoch
    epochs_run: int


@dataclass(frozen=True)
class NetEnsemble:
    nets: tuple[Net, ...]
    master_seed: int
    failed: tuple[int, ...] = ()

    @property
    def k(self) -> int:
        return len(self.nets)

    @property
    def representation_dim(self) -> int:
        return sum(net.W1.shape[0] for net in self.nets)


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    r = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-r, r, size=(rows, cols))


def init_net(m: int, hyper: NetHyper, rng: np.random.Generator) -> Net:
    return Net(W1=_glorot(rng, hyper.h1, m), b1=np.zeros(hyper.h1),
               W2=_glorot(rng, hyper.h2, hyper.h1), b2=np.zeros(hyper.h2),
               V=_glorot(rng, 1, hyper.h2), b3=np.zeros(1), hyper=hyper)


def forward_batch(net: Net, X: np.ndarray):
    """Activations for a batch: (H1, H2, f) with f in (0, 1)."""
    X = np.atleast_2d(X)
    if X.shape[1] != net.n_inputs:
        raise ValidationError(f"input width {X.shape[1]} != net input {net.n_inputs}")
    H1 = sigmoid(X @ net.W1.T + net.b1)
    H2 = sigmoid(H1 @ net.W2.T + net.b2)
    f = sigmoid(H2 @ net.V.T + net.b3).ravel()
    return H1, H2, f


def net_forward(net: Net, x: np.ndarray):
    """Single-vector forward pass: (h1, h2, f scalar)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("input vector has non-finite entries")
    H1, H2, f = forward_batch(net, x[None, :])
    return H1[0], H2[0], float(f[0])


def loss_and_gradients(net: Net, X: np.ndarray, g: np.ndarray, mu: float):
    """Full-batch loss C + mu*sum(W^2) and gradients for every parameter."""
    n = X.shape[0]
    H1, H2, f = forward_batch(net, X)
    err = f - g
    cost = float(np.mean(err ** 2))
    penalty = mu * (np.sum(net.W1 ** 2) + np.sum(net.W2 ** 2) + np.sum(net.V ** 2))
    loss = cost + float(penalty)

    dz3 = (2.0 / n) * err * f * (1.0 - f)            # (n,)
    dV = dz3[None, :] @ H2 + 2.0 * mu * net.V
    db3 = np.array([dz3.sum()])
    dH2 = dz3[:, None] @ net.V                       # (n, h2)
    dZ2 = dH2 * H2 * (1.0 - H2)
    dW2 = dZ2.T @ H1 + 2.0 * mu * net.W2
    db2 = dZ2.sum(axis=0)
    dH1 = dZ2 @ net.W2
    dZ1 = dH1 * H1 * (1.0 - H1)
    dW1 = dZ1.T @ X + 2.0 * mu * net.W1
    db1 = dZ1.sum(axis=0)

    grads = {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2, "V": dV, "b3": db3}
    return loss, cost, grads


def train_backprop(net: Net, X: np.ndarray, g01: np.ndarray,
                   epochs: int | None = None,
                   learning_rate: float | None = None) -> tuple[Net, TrainReport]:
    """Gradient descent on the combined loss; raises on non-finite loss."""
    g01 = np.asarray(g01, dtype=float)
    if g01.min() < 0.0 or g01.max() > 1.0:
        raise ValidationError("labels must be rescaled into [0, 1] before training")
    if X.shape[0] != len(g01):
        raise ValidationError("row count of data and labels differ")
    epochs = net.hyper.epochs if epochs is None else epochs
    lr = net.hyper.learning_rate if learning_rate is None else learning_rate
    mu = net.hyper.weight_decay

    params = {"W1": net.W1.copy(), "b1": net.b1.copy(), "W2": net.W2.copy(),
              "b2": net.b2.copy(), "V": net.V.copy(), "b3": net.b3.copy()}
    trajectory = np.empty(epochs)
    current = replace(net, **params)
    for epoch in range(epochs):
        loss, _, grads = loss_and_gradients(current, X, g01, mu)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at epoch {epoch} "
                                   f"(learning rate {lr})", epoch=epoch, learning_rate=lr)
        trajectory[epoch] = loss
        for name in params:
            params[name] = params[name] - lr * grads[name]
        current = replace(net, **params)

    final_cost = float(np.mean((forward_batch(current, X)[2] - g01) ** 2))
    if not np.isfinite(final_cost):
        raise TrainingDiverged(f"cost non-finite after {epochs} epochs "
                               f"(learning rate {lr})", epoch=epochs, learning_rate=lr)
    return current, TrainReport(final_cost=final_cost, trajectory=trajectory,
                                epochs_run=epochs)


def _train_dae_layer(inputs: np.ndarray, W: np.ndarray, b: np.ndarray,
                     dropout_rate: float, epochs: int, lr: float,
                     rng: np.random.Generator):
    """One denoising layer: corrupt, encode with sigmoid, decode linearly."""
    n, width = inputs.shape
    h = W.shape[0]
    D = _glorot(rng, width, h)
    c = np.zeros(width)
    W, b = W.copy(), b.copy()
    for epoch in range(epochs):
        corrupted = inputs.copy()
        if dropout_rate > 0:
            corrupted[rng.random(inputs.shape) < dropout_rate] = 0.0
        H = sigmoid(corrupted @ W.T + b)
        recon = H @ D.T + c
        diff = (2.0 / (n * width)) * (recon - inputs)
        if not np.all(np.isfinite(recon)):
            raise TrainingDiverged("autoencoder reconstruction non-finite",
                                   epoch=epoch, learning_rate=lr)
        dD = diff.T @ H
        dc = diff.sum(axis=0)
        dH = diff @ D
        dZ = dH * H * (1.0 - H)
        dW = dZ.T @ corrupted
        db = dZ.sum(axis=0)
        W -= lr * dW
        b -= lr * db
        D -= lr * dD
        c -= lr * dc
    return W, b


def pretrain_autoencoder(net: Net, X: np.ndarray, epochs: int,
                         rng: np.random.Generator,
                         learning_rate: float | None = None) -> Net:
    """Layerwise denoising pretraining; 0 epochs is an exact no-op."""
    if X.shape[0] == 0:
        raise ValidationError("empty training set")
    if epochs == 0:
        return net
    lr = net.hyper.learning_rate if learning_rate is None else learning_rate
    W1, b1 = _train_dae_layer(X, net.W1, net.b1, net.hyper.dropout_rate,
                              epochs, lr, rng)
    H1 = sigmoid(X @ W1.T + b1)
    W2, b2 = _train_dae_layer(H1, net.W2, net.b2, net.hyper.dropout_rate,
                              epochs, lr, rng)
    return replace(net, W1=W1, b1=b1, W2=W2, b2=b2)


def reconstruction_mse(net: Net, X: np.ndarray, rng: np.random.Generator,
                       epochs: int, learning_rate: float) -> np.ndarray:
    """Layer-1 clean-input reconstruction MSE per epoch (diagnostic loop)."""
    n, width = X.shape
    W, b = net.W1.copy(), net.b1.copy()
    D = _glorot(rng, width, W.shape[0])
    c = np.zeros(width)
    losses = np.empty(epochs)
    for e in range(epochs):
        H = sigmoid(X @ W.T + b)
        recon = H @ D.T + c
        losses[e] = np.mean((recon - X) ** 2)
        diff = (2.0 / (n * width)) * (recon - X)
        dD = diff.T @ H
        dc = diff.sum(axis=0)
        dH = diff @ D
        dZ = dH * H * (1.0 - H)
        W -= learning_rate * dZ.T @ X
        b -= learning_rate * dZ.sum(axis=0)
        D -= learning_rate * dD
        c -= learning_rate * dc
    return losses


@dataclass(frozen=True)
class HyperRanges:
    """Per-net sampling intervals; h1 centered at width 50 by default."""

    h1: tuple[int, int] = (30, 70)
    h2: tuple[int, int] = (15, 35)
    dropout: tuple[float, float] = (0.0, 0.3)
    weight_decay: tuple[float, float] = (1e-5, 1e-2)   # log-uniform


def sample_hyper(ranges: HyperRanges, index: int, rng: np.random.Generator,
                 learning_rate: float, epochs: int) -> NetHyper:
    h1 = int(rng.integers(ranges.h1[0], ranges.h1[1] + 1))
    h2 = int(rng.integers(ranges.h2[0], ranges.h2[1] + 1))
    dropout = float(rng.uniform(*ranges.dropout))
    mu = float(np.exp(rng.uniform(math.log(ranges.weight_decay[0]),
                                  math.log(ranges.weight_decay[1]))))
    return NetHyper(h1=h1, h2=h2, seed=index, dropout_rate=dropout,
                    weight_decay=mu, learning_rate=learning_rate, epochs=epochs)


def train_ensemble(X: np.ndarray, g01: np.ndarray, K: int,
                   hyper_ranges: HyperRanges | None = None,
                   master_seed: int = 0,
                   epochs: int = 200, learning_rate: float = 0.5,
                   pretrain_epochs: int = 60,
                   train_rows: np.ndarray | None = None,
                   backprop: bool = True) -> NetEnsemble:
    """K independently seeded nets; deterministic given (data, config, seed).

    ``train_rows`` restricts which rows are used for fitting (rows carrying
    imputed entries are normally excluded); representation later runs on
    everything.  A net whose loss diverges is retried once at half the
    learning rate; the ensemble fails if more than 10% of nets do.
    """
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    ranges = hyper_ranges or HyperRanges()
    if train_rows is None:
        Xt, gt = X, np.asarray(g01, dtype=float)
    else:
        Xt, gt = X[train_rows], np.asarray(g01, dtype=float)[train_rows]
    if Xt.shape[0] == 0:
        raise ValidationError("empty training set after excluding imputed rows")

    nets: list[Net] = []
    failed: list[int] = []
    for i in range(K):
        def attempt(lr_scale: float) -> Net:
            rng = np.random.default_rng([master_seed, i])
            hyper = sample_hyper(ranges, i, rng, learning_rate * lr_scale, epochs)
            net = init_net(X.shape[1], hyper, rng)
            net = pretrain_autoencoder(net, Xt, pretrain_epochs, rng)
            if backprop:
                net, _ = train_backprop(net, Xt, gt)
            return net

        try:
            nets.append(attempt(1.0))
        except TrainingDiverged:
            try:
                nets.append(attempt(0.5))
            except TrainingDiverged:
                failed.append(i)

    if len(failed) > 0.1 * K:
        raise ValidationError(f"{len(failed)} of {K} nets diverged: {failed}")
    return NetEnsemble(nets=tuple(nets), master_seed=master_seed, failed=tuple(failed))


def representation(e: NetEnsemble, X: np.ndarray) -> np.ndarray:
    """Concatenated first-layer activations, fixed net order."""
    X = np.atleast_2d(X)
    return np.concatenate([forward_batch(net, X)[0] for net in e.nets], axis=1)


def ensemble_rank(e: NetEnsemble, X: np.ndarray) -> np.ndarray:
    """Mean of the per-net outputs, still on the [0, 1] training scale."""
    X = np.atleast_2d(X)
    return np.mean([forward_batch(net, X)[2] for net in e.nets], axis=0)


def dnn_distance(e: NetEnsemble, x: np.ndarray, y: np.ndarray) -> float:
    rx = representation(e, np.asarray(x, dtype=float)[None, :])
    ry = representation(e, np.asarray(y, dtype=float)[None, :])
    return float(np.linalg.norm(rx - ry))


def spectral_norm(a: np.ndarray, tol: float = 1e-8, max_iter: int = 10000) -> float:
    """Operator 2-norm by power iteration on A^T A."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    rng = np.random.default_rng(0)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    last = 0.0
    for _ in range(max_iter):
        v_new = a.T @ (a @ v)
        norm = np.linalg.norm(v_new)
        if norm == 0.0:
            return 0.0
        v = v_new / norm
        sigma = float(np.linalg.norm(a @ v))
        if abs(sigma - last) <= tol * max(sigma, 1.0):
            return sigma
        last = sigma
    return float(last)


def lipschitz_bound(net: Net) -> tuple[float, float]:
    """(metric bound ||W1||/4, output bound ||V|| ||W2|| ||W1|| / 64)."""
    w1 = spectral_norm(net.W1)
    w2 = spectral_norm(net.W2)
    v = spectral_norm(net.V)
    return w1 / 4.0, v * w2 * w1 / 64.0


def layer_norm_product(net: Net) -> float:
    """Product of the non-input layer operator norms (||W2|| * ||V||)."""
    return spectral_norm(net.W2) * spectral_norm(net.V)


def _net_to_json(net: Net) -> dict:
    return {"W1": net.W1.tolist(), "b1": net.b1.tolist(),
            "W2": net.W2.tolist(), "b2": net.b2.tolist(),
            "V": net.V.tolist(), "b3": net.b3.tolist(),
            "hyper": {"h1": net.hyper.h1, "h2": net.hyper.h2,
                      "seed": net.hyper.seed,
                      "dropout_rate": net.hyper.dropout_rate,
                      "weight_decay": net.hyper.weight_decay,
                      "learning_rate": net.hyper.learning_rate,
                      "epochs": net.hyper.epochs}}


def _net_from_json(obj: dict) -> Net:
    hyper = NetHyper(**obj["hyper"])
    return Net(W1=np.asarray(obj["W1"]), b1=np.asarray(obj["b1"]),
               W2=np.asarray(obj["W2"]), b2=np.asarray(obj["b2"]),
               V=np.asarray(obj["V"]), b3=np.asarray(obj["b3"]), hyper=hyper)


def ensemble_to_json(e: NetEnsemble) -> dict:
    return {"schema_version": 1, "master_seed": e.master_seed,
            "failed": list(e.failed), "nets": [_net_to_json(n) for n in e.nets]}


def ensemble_from_json(obj: dict) -> NetEnsemble:
    return NetEnsemble(nets=tuple(_net_from_json(n) for n in obj["nets"]),
                       master_seed=obj["master_seed"], failed=tuple(obj["failed"]))


def save_ensemble(e: NetEnsemble, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ensemble_to_json(e), fh, sort_keys=True)


def load_ensemble(path) -> NetEnsemble:
    with open(path, "r", encoding="utf-8") as fh:
        return ensemble_from_json(json.load(fh))
