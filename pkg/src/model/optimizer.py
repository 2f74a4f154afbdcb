"""
Adaptive-moment optimizer with global-norm gradient clipping over a flat
parameter vector.
"""

from typing import Optional

import numpy as np

from exceptions import InvalidArgumentError


def clip_by_global_norm(gradient: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale ``gradient`` so its Euclidean norm is at most ``clip_norm``."""
    norm = float(np.sqrt(np.dot(gradient, gradient)))
    if clip_norm > 0 and norm > clip_norm:
        return gradient * (clip_norm / norm)
    return gradient


class Adam:
    """
    Adam update on a flat float64 parameter vector, in place.

    ``step_scale`` multiplies the learning rate per coordinate; it lets a
    block whose values live on a larger scale move proportionally faster.
    """

    def __init__(self, size, learning_rate=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=10.0,
                 step_scale: Optional[np.ndarray] = None):
        self.learning_rate = learning_rate
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_scale = np.ones(size) if step_scale is None else np.asarray(step_scale, dtype=np.float64)
        if self.step_scale.shape != (size,) or np.any(self.step_scale <= 0):
            raise InvalidArgumentError("step scale needs one positive entry per parameter", "step_scale")
        self.velocities = np.zeros(size)
        self.mean_squares = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, gradient: np.ndarray) -> None:
        gradient = clip_by_global_norm(gradient, self.clip_norm)
        beta1, beta2 = self.betas
        self.t += 1

        self.velocities = beta1 * self.velocities + (1 - beta1) * gradient
        self.mean_squares = beta2 * self.mean_squares + (1 - beta2) * gradient ** 2

        # bias correction
        velocities = self.velocities / (1 - beta1 ** self.t)
        mean_squares = self.mean_squares / (1 - beta2 ** self.t)

        params -= self.learning_rate * self.step_scale * velocities / (np.sqrt(mean_squares) + self.eps)
