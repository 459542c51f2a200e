"""Adam with bias correction, kept functional for reproducibility."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

Array = np.ndarray


@dataclass
class AdamState:
    """Per-parameter optimizer state; moments are shaped like the parameter."""

    lr: float
    first_moment: Array
    second_moment: Array
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    name: str = ""

    @staticmethod
    def for_shape(shape, lr: float, name: str = "") -> "AdamState":
        return AdamState(lr=lr, first_moment=np.zeros(shape),
                         second_moment=np.zeros(shape), name=name)

    def resize(self, keep: Array, n_new: int) -> "AdamState":
        """Carry moments for surviving rows, zeros for appended ones."""
        m = self.first_moment[keep]
        v = self.second_moment[keep]
        pad = (n_new,) + m.shape[1:]
        return AdamState(
            lr=self.lr,
            first_moment=np.concatenate([m, np.zeros(pad)], axis=0),
            second_moment=np.concatenate([v, np.zeros(pad)], axis=0),
            step=self.step, beta1=self.beta1, beta2=self.beta2,
            eps=self.eps, name=self.name,
        )


def adam_step(values: Array, grad: Array, state: AdamState) -> Array:
    """One bias-corrected Adam update; returns the new parameter values.

    A NaN gradient aborts the run rather than silently corrupting moments.
    """
    if not np.all(np.isfinite(grad)):
        raise RuntimeError(f"diverged: non-finite gradient for parameter '{state.name}'")
    state.step += 1
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1 ** state.step)
    v_hat = state.second_moment / (1.0 - state.beta2 ** state.step)
    return values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def apply_adam(param: Tensor, state: AdamState):
    """Update a tape parameter in place from its accumulated gradient."""
    grad = param.grad if param.grad is not None else np.zeros_like(param.values)
    param.values = adam_step(param.values, grad, state)
    param.zero_grad()
