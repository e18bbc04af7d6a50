"""A small feed-forward network engine with exact backprop and Adam.

Layers are ``Linear -> [BatchNorm] -> activation -> [Dropout]``; batch norm and
dropout are never applied to the output layer. Everything works on row batches
of shape ``(n, in_dim)``.
"""

from __future__ import annotations

import io
import json
import os
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NumericalError

ACTIVATIONS = ("relu", "tanh", "identity")
BN_EPS = 1e-5
CHECKPOINT_VERSION = 1


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, out):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - out**2
    return np.ones_like(z)


class Mlp:
    """Multilayer perceptron with optional per-layer batch norm and dropout.

    ``layer_dims`` lists ``[in, hidden..., out]``. ``activations`` has one entry
    per linear layer; by default hidden layers use ``hidden_activation`` and the
    output layer is linear. ``batch_norm`` is a bool (all hidden layers) or a
    per-layer list. ``last_layer_scale`` shrinks the output layer's initial
    weights, which keeps fresh policy heads and discriminators near neutral.
    """

    def __init__(
        self,
        layer_dims,
        activations=None,
        hidden_activation="relu",
        dropout_rate=0.0,
        batch_norm=False,
        bn_momentum=0.9,
        last_layer_scale=1.0,
        rng=None,
    ):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
            raise InvalidInputError(f"layer_dims must be >= 2 positive ints, got {layer_dims}")
        n_layers = len(layer_dims) - 1
        if activations is None:
            activations = [hidden_activation] * (n_layers - 1) + ["identity"]
        activations = [a.lower() for a in activations]
        if len(activations) != n_layers or any(a not in ACTIVATIONS for a in activations):
            raise InvalidInputError(f"bad activations {activations} for {n_layers} layers")
        if not 0.0 <= dropout_rate < 1.0:
            raise InvalidInputError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
        if isinstance(batch_norm, (bool, np.bool_)):
            batch_norm = [bool(batch_norm)] * (n_layers - 1) + [False]
        batch_norm = [bool(b) for b in batch_norm]
        if len(batch_norm) != n_layers or batch_norm[-1]:
            raise InvalidInputError("batch_norm needs one flag per layer and none on the output layer")

        self.layer_dims = layer_dims
        self.activations = activations
        self.dropout_rate = float(dropout_rate)
        self.batch_norm = batch_norm
        self.bn_momentum = float(bn_momentum)

        rng = np.random.default_rng(0) if rng is None else rng
        self.weights, self.biases = [], []
        self.gammas, self.betas = {}, {}
        self.running_mean, self.running_var = {}, {}
        for k in range(n_layers):
            fan_in, fan_out = layer_dims[k], layer_dims[k + 1]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
            if k == n_layers - 1:
                w *= last_layer_scale
                b *= last_layer_scale
            self.weights.append(w)
            self.biases.append(b)
            if batch_norm[k]:
                self.gammas[k] = np.ones(fan_out)
                self.betas[k] = np.zeros(fan_out)
                self.running_mean[k] = np.zeros(fan_out)
                self.running_var[k] = np.ones(fan_out)

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def parameters(self):
        """Trainable arrays in a fixed order: W, b, then gamma, beta when batch-normed."""
        params = []
        for k in range(self.n_layers):
            params += [self.weights[k], self.biases[k]]
            if self.batch_norm[k]:
                params += [self.gammas[k], self.betas[k]]
        return params

    def forward(self, x, train=False, rng=None, update_stats=True):
        """Run the network on a ``(n, in_dim)`` batch; returns ``(y, cache)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise InvalidInputError(f"expected input of shape (n, {self.in_dim}), got {x.shape}")
        use_dropout = train and self.dropout_rate > 0.0
        if use_dropout and rng is None:
            raise InvalidInputError("train-mode dropout needs an rng")
        cache = []
        h = x
        last = self.n_layers - 1
        for k in range(self.n_layers):
            entry = {"input": h}
            z = h @ self.weights[k].T + self.biases[k]
            if self.batch_norm[k]:
                if train:
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                    if update_stats:
                        m = self.bn_momentum
                        self.running_mean[k] = m * self.running_mean[k] + (1 - m) * mu
                        self.running_var[k] = m * self.running_var[k] + (1 - m) * var
                else:
                    mu, var = self.running_mean[k], self.running_var[k]
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                zhat = (z - mu) * inv_std
                entry.update(zhat=zhat, inv_std=inv_std, bn_train=train)
                z = self.gammas[k] * zhat + self.betas[k]
            out = _act(self.activations[k], z)
            entry.update(z=z, out=out)
            if use_dropout and k < last:
                mask = (rng.random(out.shape) >= self.dropout_rate) / (1.0 - self.dropout_rate)
                entry["mask"] = mask
                out = out * mask
            cache.append(entry)
            h = out
        return h, cache

    def backward(self, cache, grad_out):
        """Backpropagate ``dL/dy``; returns ``(grads, dL/dx)`` with grads ordered as ``parameters()``."""
        g = np.asarray(grad_out, dtype=float)
        per_layer = [None] * self.n_layers
        for k in reversed(range(self.n_layers)):
            entry = cache[k]
            if "mask" in entry:
                g = g * entry["mask"]
            g = g * _act_grad(self.activations[k], entry["z"], entry["out"])
            bn_grads = ()
            if self.batch_norm[k]:
                zhat = entry["zhat"]
                dgamma = (g * zhat).sum(axis=0)
                dbeta = g.sum(axis=0)
                dzhat = g * self.gammas[k]
                if entry["bn_train"]:
                    n = g.shape[0]
                    g = (entry["inv_std"] / n) * (
                        n * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0)
                    )
                else:
                    g = dzhat * entry["inv_std"]
                bn_grads = (dgamma, dbeta)
            dw = g.T @ entry["input"]
            db = g.sum(axis=0)
            per_layer[k] = (dw, db) + bn_grads
            g = g @ self.weights[k]
        grads = [arr for layer in per_layer for arr in layer]
        return grads, g

    def __call__(self, x, mode="eval", rng=None):
        return mlp_apply(self, x, mode=mode, rng=rng)

    def copy(self):
        clone = object.__new__(Mlp)
        clone.__dict__.update(self.__dict__)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        for name in ("gammas", "betas", "running_mean", "running_var"):
            setattr(clone, name, {k: v.copy() for k, v in getattr(self, name).items()})
        return clone

    def state_dict(self):
        config = {
            "layer_dims": self.layer_dims,
            "activations": self.activations,
            "dropout_rate": self.dropout_rate,
            "batch_norm": self.batch_norm,
            "bn_momentum": self.bn_momentum,
        }
        arrays = {}
        for k in range(self.n_layers):
            arrays[f"W{k}"] = self.weights[k]
            arrays[f"b{k}"] = self.biases[k]
            if self.batch_norm[k]:
                arrays[f"gamma{k}"] = self.gammas[k]
                arrays[f"beta{k}"] = self.betas[k]
                arrays[f"rmean{k}"] = self.running_mean[k]
                arrays[f"rvar{k}"] = self.running_var[k]
        return config, arrays

    @classmethod
    def from_state_dict(cls, config, arrays):
        net = cls(
            config["layer_dims"],
            activations=config["activations"],
            dropout_rate=config["dropout_rate"],
            batch_norm=config["batch_norm"],
            bn_momentum=config["bn_momentum"],
        )
        for k in range(net.n_layers):
            net.weights[k] = np.array(arrays[f"W{k}"], dtype=float)
            net.biases[k] = np.array(arrays[f"b{k}"], dtype=float)
            if net.batch_norm[k]:
                net.gammas[k] = np.array(arrays[f"gamma{k}"], dtype=float)
                net.betas[k] = np.array(arrays[f"beta{k}"], dtype=float)
                net.running_mean[k] = np.array(arrays[f"rmean{k}"], dtype=float)
                net.running_var[k] = np.array(arrays[f"rvar{k}"], dtype=float)
        return net


def mlp_apply(net, x, mode="eval", rng=None):
    """Evaluate ``net`` on a single vector or a row batch.

    ``mode="eval"`` is deterministic: dropout is off and batch norm uses the
    running statistics. Train mode does not touch the running statistics here.
    """
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != net.in_dim:
        raise InvalidInputError(f"input dim {x.shape[-1]} != network in-dim {net.in_dim}")
    y, _ = net.forward(x, train=(mode == "train"), rng=rng, update_stats=False)
    return y[0] if single else y


def mlp_gradient(net, loss_fn, batch, mode="eval", rng=None, update_stats=False):
    """Mean batch loss and its exact gradient with respect to every parameter.

    ``loss_fn(y)`` receives the ``(n, out_dim)`` network output and returns the
    per-row losses ``(n,)`` together with their gradients ``(n, out_dim)``.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise InvalidInputError("batch must be non-empty")
    y, cache = net.forward(batch, train=(mode == "train"), rng=rng, update_stats=update_stats)
    losses, dy = loss_fn(y)
    losses = np.asarray(losses, dtype=float)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NumericalError(f"non-finite loss at batch index {bad[0]}", index=int(bad[0]), where="batch")
    n = batch.shape[0]
    grads, _ = net.backward(cache, np.asarray(dy, dtype=float) / n)
    return float(losses.mean()), grads


class Adam:
    """Adam optimizer whose moment buffers mirror a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise InvalidInputError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """Update ``params`` in place and return them."""
        if len(params) != len(self.m) or len(grads) != len(params):
            raise InvalidInputError("params/grads do not match the optimizer state")
        for p, g, m in zip(params, grads, self.m):
            if p.shape != g.shape or p.shape != m.shape:
                raise InvalidInputError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(p)):
                raise NumericalError(f"non-finite parameter after step {self.t}", index=self.t, where="step")
        return params

    def state_dict(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def optimizer_step(opt, params, grads):
    return opt.step(params, grads)


def save_checkpoint(path, nets, meta):
    """Write named networks plus JSON metadata to one ``.npz`` container."""
    arrays = {}
    net_configs = {}
    for name, net in nets.items():
        config, net_arrays = net.state_dict()
        net_configs[name] = config
        for key, value in net_arrays.items():
            arrays[f"{name}/{key}"] = value
    header = {"version": CHECKPOINT_VERSION, "nets": net_configs, "meta": meta}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(nets, meta)``."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {header.get('version')}")
        nets = {}
        for name, config in header["nets"].items():
            prefix = f"{name}/"
            arrays = {k[len(prefix):]: data[k] for k in data.files if k.startswith(prefix)}
            nets[name] = Mlp.from_state_dict(config, arrays)
    return nets, header["meta"]
