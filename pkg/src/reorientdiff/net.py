"""Small fully-connected networks with hand-written reverse-mode gradients.

Everything runs in float64 numpy.  A network is a stack of affine layers
with an elementwise activation between them and either a linear or a
sigmoid output head.  forward() can return a cache that backward() consumes
to produce exact gradients with respect to every parameter and the input
batch; exactness against central finite differences is part of the test
suite, so the activations here are chosen to be smooth (silu, the default,
behaves like a smoothed relu).
"""

from __future__ import annotations

import numpy as np

SIGMOID_CLAMP = 36.0
SIGMOID_OUT_EPS = 1e-12


def _sigmoid(z: np.ndarray) -> np.ndarray:
    zc = np.clip(z, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-zc))


def _act_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "silu":
        return z * _sigmoid(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    raise ValueError(f"unknown activation: {name!r}")


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "silu":
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "softplus":
        return _sigmoid(z)
    raise ValueError(f"unknown activation: {name!r}")


class FeedForwardNet:
    """MLP with layer sizes [d_in, h1, ..., d_out].

    head "linear" leaves the last affine output untouched; head "sigmoid"
    squashes it through a numerically clamped logistic (pre-activations
    clipped to +-36, outputs to [1e-12, 1 - 1e-12]).
    """

    ACTIVATIONS = ("silu", "relu", "tanh", "softplus")
    HEADS = ("linear", "sigmoid")

    def __init__(
        self,
        layer_sizes: list[int],
        activation: str = "silu",
        head: str = "linear",
        rng: np.random.Generator | None = None,
    ):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"unknown activation: {activation!r}")
        if head not in self.HEADS:
            raise ValueError(f"unknown head: {head!r}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.activation = activation
        self.head = head
        self.params: dict[str, np.ndarray] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            # He-style init keeps activation variance stable for relu-like units
            self.params[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.params[f"b{i}"] = np.zeros(fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Run the batch (N, d_in) through the net.

        Returns (N, d_out), or (output, cache) when want_cache is set.
        """
        a = np.asarray(x, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (N, {self.in_dim}), got {a.shape}")
        acts = [a]
        pre = []
        for i in range(self.n_layers):
            z = a @ self.params[f"W{i}"] + self.params[f"b{i}"]
            pre.append(z)
            if i < self.n_layers - 1:
                a = _act_forward(self.activation, z)
            else:
                a = _sigmoid(z) if self.head == "sigmoid" else z
            acts.append(a)
        out = acts[-1]
        if self.head == "sigmoid":
            out = np.clip(out, SIGMOID_OUT_EPS, 1.0 - SIGMOID_OUT_EPS)
        if want_cache:
            return out, {"acts": acts, "pre": pre}
        return out

    def backward(self, cache: dict, grad_out: np.ndarray):
        """Backpropagate d(loss)/d(output) through the cached forward pass.

        Returns (grads, grad_input) where grads maps every parameter name to
        an array of matching shape and grad_input has the input batch shape.
        """
        acts, pre = cache["acts"], cache["pre"]
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != acts[-1].shape:
            raise ValueError("grad_out shape mismatch")
        grads: dict[str, np.ndarray] = {}
        for i in reversed(range(self.n_layers)):
            z = pre[i]
            if i < self.n_layers - 1:
                g = g * _act_grad(self.activation, z)
            elif self.head == "sigmoid":
                s = _sigmoid(z)
                # clamp saturates: zero gradient outside the clamp window
                dz = np.where(np.abs(z) < SIGMOID_CLAMP, s * (1.0 - s), 0.0)
                g = g * dz
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = np.sum(g, axis=0)
            g = g @ self.params[f"W{i}"].T
        return grads, g

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "FeedForwardNet":
        dup = FeedForwardNet(self.layer_sizes, self.activation, self.head)
        dup.params = {k: v.copy() for k, v in self.params.items()}
        return dup


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))
