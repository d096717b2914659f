import numpy as np

from bvlab.mlp import MlpParams, loss_and_gradients


def finite_difference_gradients(
    params: MlpParams, inputs: np.ndarray, onehot: np.ndarray, step: float = 1e-5
) -> MlpParams:
    """Central finite differences of the batch loss over every parameter."""
    grads = []
    for slot, array in enumerate(params.arrays()):
        grad = np.zeros_like(array)
        flat = array.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up, _ = loss_and_gradients(params, inputs, onehot)
            flat[i] = original - step
            down, _ = loss_and_gradients(params, inputs, onehot)
            flat[i] = original
            grad_flat[i] = (up - down) / (2.0 * step)
        grads.append(grad)
    return MlpParams(*grads)


def relative_gradient_error(analytic: MlpParams, numeric: MlpParams) -> float:
    a = np.concatenate([g.reshape(-1) for g in analytic.arrays()])
    n = np.concatenate([g.reshape(-1) for g in numeric.arrays()])
    return float(np.linalg.norm(a - n) / (np.linalg.norm(n) + 1e-300))
