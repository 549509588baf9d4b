"""Dense-layer MLP with explicit forward/backward passes.

Serves the subsurface residual network: hidden layers use ReLU, the output
layer softplus so the residual radiance is non-negative. No computational
graph; the forward pass records a tape of pre-activations that backward
consumes.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, StaleTape

HIDDEN_WIDTH = 64
DEPTH = 4  # number of linear layers


def softplus(x):
    # log(1+exp(x)) computed without overflow for large |x|
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class SssMlp:
    """in_dim -> 64 -> 64 -> 64 -> out_dim, ReLU hidden, softplus output."""

    def __init__(self, in_dim: int, out_dim: int = 3, hidden: int = HIDDEN_WIDTH,
                 depth: int = DEPTH, seed: int = 0):
        self.in_dim = in_dim
        self.out_dim = out_dim
        dims = [in_dim] + [hidden] * (depth - 1) + [out_dim]
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for k in range(depth):
            fan_in = dims[k]
            if k == depth - 1:
                # Zero-initialized final layer: the residual starts as the
                # small constant softplus(0) and does not perturb early
                # surface-term optimization.
                w = np.zeros((dims[k + 1], fan_in))
            else:
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(dims[k + 1], fan_in))
            self.weights.append(w)
            self.biases.append(np.zeros(dims[k + 1]))
        self._tape_serial = 0

    @property
    def layer_dims(self):
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x: np.ndarray):
        """Evaluate the network; x is (in_dim,) or (n, in_dim).

        Returns (y, tape). The tape holds the inputs of every layer and is
        required by backward.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.shape[1] != self.in_dim:
            raise DimensionMismatch(f"expected {self.in_dim} inputs, got {xb.shape[1]}")
        inputs = []
        pre = None
        h = xb
        pres = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            pre = h @ w.T + b
            pres.append(pre)
            if k < len(self.weights) - 1:
                h = np.maximum(pre, 0.0)
            else:
                h = softplus(pre)
        self._tape_serial += 1
        tape = {"inputs": inputs, "pres": pres, "single": single,
                "serial": self._tape_serial, "mlp": id(self)}
        y = h[0] if single else h
        return y, tape

    def backward(self, tape, dy: np.ndarray):
        """Reverse-mode gradients for a matching forward tape.

        Returns (dx, grads) where grads is a list of (dW, db) per layer.
        """
        if tape.get("mlp") != id(self):
            raise StaleTape("tape was produced by a different network")
        dy = np.asarray(dy, dtype=np.float64)
        single = tape["single"]
        g = dy[None, :] if single else dy
        grads = []
        # output layer: softplus'(z) = sigmoid(z)
        for k in reversed(range(len(self.weights))):
            pre = tape["pres"][k]
            if k == len(self.weights) - 1:
                g = g * sigmoid(pre)
            else:
                g = g * (pre > 0.0)
            w = self.weights[k]
            x_in = tape["inputs"][k]
            dw = g.T @ x_in
            db = g.sum(axis=0)
            grads.append((dw, db))
            g = g @ w
        grads.reverse()
        dx = g[0] if single else g
        return dx, grads

    # --- flat parameter views (used by the optimizer and FD suites) ---

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for pair in zip(self.weights, self.biases) for a in pair])

    def unflatten(self, flat: np.ndarray):
        off = 0
        for k in range(len(self.weights)):
            n = self.weights[k].size
            self.weights[k] = flat[off:off + n].reshape(self.weights[k].shape).copy()
            off += n
            n = self.biases[k].size
            self.biases[k] = flat[off:off + n].reshape(self.biases[k].shape).copy()
            off += n
        if off != len(flat):
            raise DimensionMismatch("flat parameter vector has wrong length")

    @staticmethod
    def flatten_grads(grads) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for pair in grads for a in pair])

    def state_arrays(self):
        """Name -> array mapping for serialization."""
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{k}"] = w
            out[f"b{k}"] = b
        return out
