"""
Learning-rate schedules and the AdamW optimizer used by both training stages.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import ParamBlock


logger = logging.getLogger(__name__)


def lr_at(step: int, total: int, start: float, end: float) -> float:
    """Exponential decay from `start` at step 0 to `end` at step `total`."""
    if step <= 0 or total <= 0:
        return start
    if step >= total:
        return end
    return start * (end / start) ** (step / total)


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    moments: Tuple[np.ndarray, np.ndarray],
    step: int,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.99),
    weight_decay: float = 0.0,
    eps: float = 1e-15,
) -> np.ndarray:
    """
    One decoupled-weight-decay Adam update, applied in place.

    Parameters:
        params (np.ndarray): Values to update.
        grads (np.ndarray): Gradients of the same shape.
        moments (tuple): First and second moment buffers, updated in place.
        step (int): 1-based step count used for bias correction.
        lr (float): Learning rate.
        betas (tuple): Moment decay rates.
        weight_decay (float): Decoupled decay coefficient.
        eps (float): Denominator stabilizer.

    Returns:
        np.ndarray: The updated params array.
    """
    if params.shape != grads.shape:
        raise ValueError(f"Parameter shape {params.shape} and gradient shape {grads.shape} differ")
    m, v = moments
    beta1, beta2 = betas
    if weight_decay:
        params -= lr * weight_decay * params
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


class AdamW:
    """
    AdamW over a fixed list of ParamBlocks.

    Parameters:
        params (Sequence[ParamBlock]): Blocks to optimize; names must be unique.
        name (str): Optimizer name used in checkpoints.
        betas (tuple): Moment decay rates.
        weight_decay (float): Decoupled decay coefficient.
        eps (float): Denominator stabilizer.
    """

    def __init__(
        self,
        params: Sequence[ParamBlock],
        name: str,
        betas: Tuple[float, float] = (0.9, 0.99),
        weight_decay: float = 0.0,
        eps: float = 1e-15,
    ):
        self.params: List[ParamBlock] = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError(f"Optimizer '{name}' received duplicate parameter names")
        self.name = name
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.values) for p in self.params}
        self.v: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.values) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        """Apply one update to every block from its accumulated gradient."""
        self.step_count += 1
        for p in self.params:
            adamw_step(
                p.values,
                p.grad,
                (self.m[p.name], self.v[p.name]),
                self.step_count,
                lr,
                self.betas,
                self.weight_decay,
                self.eps,
            )

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Moment buffers keyed as adam_m/<opt>/<param> and adam_v/<opt>/<param>."""
        arrays = {}
        for p in self.params:
            arrays[f"adam_m/{self.name}/{p.name}"] = self.m[p.name]
            arrays[f"adam_v/{self.name}/{p.name}"] = self.v[p.name]
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step_count: int):
        """Restore moments and the step counter saved by state_arrays."""
        for p in self.params:
            self.m[p.name] = np.array(arrays[f"adam_m/{self.name}/{p.name}"], dtype=np.float64)
            self.v[p.name] = np.array(arrays[f"adam_v/{self.name}/{p.name}"], dtype=np.float64)
        self.step_count = int(step_count)


class RowAdamW:
    """
    AdamW over the rows of one (n, d) block, touching only the listed rows.

    Each row keeps a single second moment, the mean of its squared gradient
    components, so a row moves along its gradient direction instead of the
    per-coordinate sign pattern. Rows left out of a step keep their values
    and moments, and bias correction counts the steps each row took part in.

    Parameters:
        block (ParamBlock): Two-dimensional block, e.g. per-vertex offsets.
        name (str): Optimizer name used in log messages.
        betas (tuple): Moment decay rates.
        weight_decay (float): Decoupled decay coefficient.
        eps (float): Denominator stabilizer.
    """

    def __init__(
        self,
        block: ParamBlock,
        name: str,
        betas: Tuple[float, float] = (0.9, 0.99),
        weight_decay: float = 0.0,
        eps: float = 1e-15,
    ):
        if block.values.ndim != 2:
            raise ValueError(f"Optimizer '{name}' needs a 2-D block, got shape {block.values.shape}")
        self.block = block
        self.name = name
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.m = np.zeros_like(block.values)
        self.v = np.zeros(len(block.values))
        self.counts = np.zeros(len(block.values), dtype=np.int64)

    def zero_grad(self):
        self.block.zero_grad()

    def step(self, lr: float, rows: Optional[np.ndarray] = None):
        """Update the given rows (all rows when None) from the accumulated gradient."""
        if rows is None:
            rows = np.arange(len(self.block.values))
        rows = np.unique(np.asarray(rows, dtype=np.int64))
        if len(rows) == 0:
            return
        beta1, beta2 = self.betas
        grads = self.block.grad[rows]
        values = self.block.values
        self.counts[rows] += 1
        count = self.counts[rows]
        if self.weight_decay:
            values[rows] -= lr * self.weight_decay * values[rows]
        self.m[rows] = beta1 * self.m[rows] + (1.0 - beta1) * grads
        self.v[rows] = beta2 * self.v[rows] + (1.0 - beta2) * np.mean(grads * grads, axis=1)
        m_hat = self.m[rows] / (1.0 - beta1 ** count)[:, None]
        v_hat = self.v[rows] / (1.0 - beta2 ** count)
        values[rows] -= lr * m_hat / (np.sqrt(v_hat)[:, None] + self.eps)
