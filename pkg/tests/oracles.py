"""Independent reference computations used as test oracles."""

import numpy as np
import torch


def central_difference(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """d fn(x) / dx by central differences, one coordinate at a time (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        with torch.no_grad():
            up = float(fn(x))
            flat[i] = orig - eps
            down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm-wise relative error, robust to near-zero components."""
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, pad: int) -> np.ndarray:
    """Straight-line cross-correlation: x (C, H, W), w (O, C, k, k) -> (O, H', W')."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for r in range(ho):
            for col in range(wo):
                out[oc, r, col] = np.sum(xp[:, r : r + k, col : col + k] * w[oc])
        if b is not None:
            out[oc] += b[oc]
    return out


def batchnorm_eval_reference(x: np.ndarray, mean, var, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    return (x - mean[:, None, None]) / np.sqrt(var[:, None, None] + eps) * gamma[:, None, None] + beta[:, None, None]


def softmax_reference(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def spatial_ce_reference(student: np.ndarray, teacher: np.ndarray, axis: str) -> float:
    """Sum of -p log q over every column (axis='height') or row (axis='width') of one map."""
    total = 0.0
    if axis == "height":
        slices = [(teacher[:, c], student[:, c]) for c in range(teacher.shape[1])]
    else:
        slices = [(teacher[r, :], student[r, :]) for r in range(teacher.shape[0])]
    for t, s in slices:
        total += -np.sum(softmax_reference(t) * np.log(softmax_reference(s)))
    return total


def brute_average_transfer(a: dict, t: int, sign: float) -> float:
    diffs = []
    for j in range(t):
        diffs.append(sign * (a[(t, j)] - a[(j, j)]))
    return sum(diffs) / len(diffs)


def brute_maximal_transfer(current: dict, initial: dict, sign: float) -> float:
    best = None
    for k in sorted(initial):
        change = sign * (current[k] - initial[k])
        if best is None or change > best:
            best = change
    return best
