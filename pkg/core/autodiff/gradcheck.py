from typing import Callable, Sequence

import numpy as np

from core.autodiff.tensor import Tensor


def grad_check(f: Callable[..., Tensor], point: np.ndarray | Sequence[np.ndarray], step: float = 1e-5,
               floor: float = 1e-3) -> float:
    """Worst relative error between autodiff and central finite differences.

    `f` takes one Tensor per array in `point` and returns a scalar Tensor. Arrays are
    promoted to float64. Entries whose gradients are both below `floor` are judged
    on absolute error.
    """
    arrays = [point] if isinstance(point, np.ndarray) else list(point)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    f(*tensors).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in tensors]

    def evaluate(values):
        return float(f(*[Tensor(v) for v in values]).values)

    worst = 0.0
    for index, array in enumerate(arrays):
        flat = array.reshape(-1)
        grad = analytic[index].reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + step
            upper = evaluate(arrays)
            flat[k] = original - step
            lower = evaluate(arrays)
            flat[k] = original
            numeric = (upper - lower) / (2 * step)
            denominator = max(abs(numeric), abs(grad[k]), floor)
            worst = max(worst, abs(numeric - grad[k]) / denominator)
    return worst
