"""AdamW with decoupled weight decay over kernel Parameters."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter

__all__ = ["AdamW", "OptimizerError"]


class OptimizerError(RuntimeError):
    pass


class AdamW:
    """Decoupled weight-decay Adam.

    Defaults are desk-scale (lr 1e-3, weight decay 0.01); the large-model
    values lr=3e-5 / wd=0.1 remain reachable through the constructor for
    configs that want them.
    """

    def __init__(self, params, lr: float = 1e-3, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params: list[Parameter] = [p for p in params if p.trainable]
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.step_count = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self):
        """Apply one update from accumulated gradients, then zero them."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            key = id(p)
            if key not in self._m:
                raise OptimizerError(f"parameter {p.name!r} has no moment buffers")
            g = p.grad
            m = self._m[key]
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)
            p.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    # -- checkpoint participation ------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params:
            out[f"m:{p.name}"] = self._m[id(p)]
            out[f"v:{p.name}"] = self._v[id(p)]
        return out

    def state_scalars(self) -> dict:
        return {
            "step_count": self.step_count,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
        }

    def load_state(self, scalars: dict, arrays: dict[str, np.ndarray]):
        self.step_count = int(scalars["step_count"])
        self.lr = float(scalars["lr"])
        self.weight_decay = float(scalars["weight_decay"])
        self.beta1, self.beta2 = (float(b) for b in scalars["betas"])
        self.eps = float(scalars["eps"])
        for p in self.params:
            mk, vk = f"m:{p.name}", f"v:{p.name}"
            if mk not in arrays or vk not in arrays:
                raise OptimizerError(f"checkpoint is missing moment buffers for {p.name!r}")
            if arrays[mk].shape != p.data.shape:
                raise OptimizerError(
                    f"moment shape {arrays[mk].shape} != parameter shape {p.data.shape} for {p.name!r}")
            self._m[id(p)] = arrays[mk].copy()
            self._v[id(p)] = arrays[vk].copy()
