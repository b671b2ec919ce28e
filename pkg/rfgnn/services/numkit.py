"""
Numerical core: dense/sparse products, forward/backward primitive pairs,
softmax and cross-entropy, inverted dropout, AdamW and a finite-difference
gradient checker.

Dense matrices are float64 numpy arrays; sparse adjacency is a canonical
scipy CSR matrix. Randomness always comes from an explicit numpy Generator.
"""
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import log_softmax, softmax

from rfgnn.config import ADAMW_BETA1, ADAMW_BETA2, ADAMW_EPS


class NumkitError(Exception):
    """Custom exception for numerical core errors"""
    pass


class DimensionError(NumkitError):
    pass


class ParameterError(NumkitError):
    pass


class EmptySupervisionError(NumkitError):
    pass


class NonFiniteGradientError(NumkitError):
    pass


# Stream tags for per-branch random streams
SAMPLING = 0
INIT = 1
DROPOUT = 2
NOISE = 3


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    """
    Counter-based random stream keyed by (master_seed, *path).

    Streams with different paths are independent, so branches can draw
    in any order and still reproduce the same numbers.
    """
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(master_seed: int, *path: int) -> int:
    """Integer seed (63-bit) derived from (master_seed, *path)"""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(p) for p in path))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class ParamTensor:
    """Learnable matrix with its gradient accumulator"""
    name: str
    value: np.ndarray
    grad: Optional[np.ndarray] = None
    version: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.value.ndim != 2:
            raise DimensionError(f"{self.name}: parameters are 2-d, got shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(
                f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_param(cls, param: ParamTensor) -> "AdamWState":
        return cls(m=np.zeros_like(param.value), v=np.zeros_like(param.value), t=0)


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator, name: str) -> ParamTensor:
    """Weight drawn uniformly from +-sqrt(6 / (fan_in + fan_out))"""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ParamTensor(name, rng.uniform(-limit, limit, size=(fan_in, fan_out)))


def zeros_param(shape: Tuple[int, int], name: str) -> ParamTensor:
    return ParamTensor(name, np.zeros(shape, dtype=np.float64))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def spmm(a: sp.csr_matrix, x: np.ndarray) -> np.ndarray:
    """Neighbourhood aggregation y[i] = sum_j a[i, j] * x[j]"""
    if a.shape[1] != x.shape[0]:
        raise DimensionError(f"spmm: adjacency {a.shape} does not match features {x.shape}")
    return np.asarray(a @ x)


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(mask: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if mask.shape != upstream.shape:
        raise DimensionError(f"relu_backward: mask {mask.shape} vs upstream {upstream.shape}")
    return np.where(mask, upstream, 0.0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_rows: need a matrix with >= 1 column, got {x.shape}")
    # scipy subtracts the row max before exponentiating
    return softmax(x, axis=1)


def cross_entropy(
    logits: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray,
) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy over the masked rows.

    Args:
        logits: N x C scores
        labels: class index per node
        mask: indices of supervised nodes

    Returns:
        (loss, gradient w.r.t. logits); rows outside the mask get zero gradient

    Raises:
        EmptySupervisionError: If mask is empty
    """
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise EmptySupervisionError("empty supervision set")
    if mask.max() >= logits.shape[0]:
        raise DimensionError(f"cross_entropy: mask index {mask.max()} out of range for {logits.shape}")

    targets = np.asarray(labels, dtype=np.int64)[mask]
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ParameterError("cross_entropy: masked node without a valid label")

    log_probs = log_softmax(logits[mask], axis=1)
    count = mask.size
    loss = -float(log_probs[np.arange(count), targets].sum()) / count

    grad_rows = np.exp(log_probs)
    grad_rows[np.arange(count), targets] -= 1.0
    grad = np.zeros_like(logits)
    grad[mask] = grad_rows / count
    return loss, grad


def dropout_mask(shape: Tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout mask: 0 with probability rate, else 1 / (1 - rate)"""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def adamw_step(
    param: ParamTensor,
    state: AdamWState,
    lr: float,
    beta1: float = ADAMW_BETA1,
    beta2: float = ADAMW_BETA2,
    eps: float = ADAMW_EPS,
    weight_decay: float = 0.0,
):
    """
    One AdamW update with decoupled weight decay, in place.

        m <- b1 m + (1 - b1) g
        v <- b2 v + (1 - b2) g^2
        value <- value - lr (m_hat / (sqrt(v_hat) + eps) + wd value)
    """
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise DimensionError(f"{param.name}: optimizer state does not match shape {param.shape}")
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(f"non-finite gradient in parameter '{param.name}'")

    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * g
    state.v *= beta2
    state.v += (1.0 - beta2) * (g * g)
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)

    param.value -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param.value)
    param.version += 1


class AdamW:
    """AdamW over an ordered name -> ParamTensor mapping"""

    def __init__(
        self,
        params: Dict[str, ParamTensor],
        lr: float,
        beta1: float = ADAMW_BETA1,
        beta2: float = ADAMW_BETA2,
        eps: float = ADAMW_EPS,
        weight_decay: float = 0.0,
    ):
        if lr <= 0.0:
            raise ParameterError(f"Invalid learning rate: {lr}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ParameterError(f"Invalid betas: ({beta1}, {beta2})")
        if weight_decay < 0.0:
            raise ParameterError(f"Invalid weight decay: {weight_decay}")

        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: Dict[str, AdamWState] = {
            name: AdamWState.for_param(p) for name, p in params.items()
        }

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            adamw_step(
                p, self.state[name], self.lr,
                beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                weight_decay=self.weight_decay,
            )


def finite_diff_check(
    forward: Callable[[], float],
    params: Sequence[ParamTensor],
    epsilon: float = 1e-5,
) -> float:
    """
    Compare analytic gradients against central differences.

    `forward` must zero the gradients, run the forward and backward pass
    (dropout disabled) and return the scalar loss. It is called once for the
    analytic gradients and twice per coordinate afterwards.

    Returns:
        max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    forward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        for idx in np.ndindex(*p.shape):
            original = p.value[idx]
            p.value[idx] = original + epsilon
            plus = forward()
            p.value[idx] = original - epsilon
            minus = forward()
            p.value[idx] = original

            numeric = (plus - minus) / (2.0 * epsilon)
            a = grad[idx]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)

    # leave the analytic gradients in place for the caller
    forward()
    return worst
