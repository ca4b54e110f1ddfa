"""Adaptive-moment gradient descent over a node's flat parameter buffer."""
from typing import Dict, Iterable, Optional

import numpy as np

from ssta.errors import CheckpointError, ShapeMismatchError
from ssta.tensor_core import ParameterSet


class Adam:
    """Bias-corrected adaptive moments, one state per parameter buffer.

    ``frozen`` names slices whose entries are never moved (their gradient is
    treated as zero before the moments are updated).
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, frozen: Iterable[str] = ()):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.frozen = tuple(frozen)
        self.num_updates = 0
        self.exp_avg: Optional[np.ndarray] = None
        self.exp_avg_sq: Optional[np.ndarray] = None

    def _mask(self, params: ParameterSet) -> np.ndarray:
        keep = {name: np.ones(shape) for name, shape in params.shapes.items() if name not in self.frozen}
        return params.flatten(keep)

    def step(self, params: ParameterSet, grads: Dict[str, np.ndarray]) -> ParameterSet:
        """Return the updated parameter set (version + 1); `params` is left untouched."""
        g = params.flatten(grads) * self._mask(params)
        if self.exp_avg is None:
            self.exp_avg = np.zeros_like(params.flat)
            self.exp_avg_sq = np.zeros_like(params.flat)
        elif self.exp_avg.shape != g.shape:
            raise ShapeMismatchError(
                f"optimizer state holds {self.exp_avg.size} scalars, parameters have {g.size}"
            )
        self.num_updates += 1
        self.exp_avg = self.beta1 * self.exp_avg + (1.0 - self.beta1) * g
        self.exp_avg_sq = self.beta2 * self.exp_avg_sq + (1.0 - self.beta2) * g * g
        bias_correction1 = 1.0 - self.beta1 ** self.num_updates
        bias_correction2 = 1.0 - self.beta2 ** self.num_updates
        m_hat = self.exp_avg / bias_correction1
        v_hat = self.exp_avg_sq / bias_correction2
        update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params.with_flat(params.flat - update)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        if self.exp_avg is None:
            return {}
        return {"adam.exp_avg": self.exp_avg, "adam.exp_avg_sq": self.exp_avg_sq}

    def load_state(self, arrays: Dict[str, np.ndarray], num_updates: int) -> None:
        if not arrays:
            self.exp_avg = self.exp_avg_sq = None
            self.num_updates = num_updates
            return
        try:
            self.exp_avg = np.array(arrays["adam.exp_avg"])
            self.exp_avg_sq = np.array(arrays["adam.exp_avg_sq"])
        except KeyError as e:
            raise CheckpointError(f"optimizer state is missing {e}") from e
        self.num_updates = num_updates
