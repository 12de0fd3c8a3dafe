"""Small fully-connected ReLU networks with hand-written backward passes."""

from __future__ import annotations

import numpy as np


class MLP:
    """``in -> hidden... -> out`` with ReLU between layers and a linear output.

    The output layer is zero-initialised so a fresh network predicts zeros.
    """

    def __init__(self, widths, rng: np.random.Generator, zero_last: bool = True):
        self.widths = tuple(int(w) for w in widths)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            last = i == len(self.widths) - 2
            bound = 1.0 / np.sqrt(fan_in)
            if last and zero_last:
                W = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                W = rng.uniform(-bound, bound, (fan_in, fan_out))
                b = rng.uniform(-bound, bound, fan_out)
            self.weights.append(W)
            self.biases.append(b)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = W
            out[f"{prefix}.b{i}"] = b
        return out

    def load_params(self, prefix: str, params: dict[str, np.ndarray]) -> None:
        for i in range(self.num_layers):
            self.weights[i] = params[f"{prefix}.W{i}"]
            self.biases[i] = params[f"{prefix}.b{i}"]

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < self.num_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, dy: np.ndarray, acts, prefix: str):
        """Returns ``(dx, grads)`` where ``grads`` is keyed like :meth:`params`."""
        grads = {}
        g = dy
        for i in range(self.num_layers - 1, -1, -1):
            if i < self.num_layers - 1:
                g = g * (acts[i + 1] > 0.0)
            grads[f"{prefix}.W{i}"] = acts[i].T @ g
            grads[f"{prefix}.b{i}"] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return g, grads
