"""Double-precision numeric primitives shared by the attention and CTC math.

Everything in this package runs in float64 on CPU. Tensors are plain
``torch.Tensor`` objects; reverse-mode gradients are available on any value
reachable from a training loss, and ``grad_check`` verifies them against
central finite differences.
"""

import torch
import torch.nn.functional as F

DTYPE = torch.float64

# Probabilities entering products or ratios are clamped into this range first;
# the alignment recurrence divides by cumulative products of (1 - p).
PROB_EPS = 1e-10


def clamp_prob(p):
    """Clamp probabilities into [PROB_EPS, 1 - PROB_EPS]."""
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def exclusive_cumprod(x, dim=-1):
    """Exclusive cumulative product: out[j] = prod(x[..., :j]), so out[..., 0] = 1.

    Args:
        x: tensor with the product axis at ``dim``.
    Returns:
        Tensor of the same shape. Empty inputs are returned unchanged.
    """
    n = x.size(dim)
    if n == 0:
        return x.clone()
    one = torch.ones_like(x.narrow(dim, 0, 1))
    shifted = torch.cat([one, x.narrow(dim, 0, n - 1)], dim=dim)
    return torch.cumprod(shifted, dim=dim)


def moving_sum(x, back, forward):
    """Windowed sum along the last axis with zero contribution outside the range.

    out[..., j] = sum_{k=j-back}^{j+forward} x[..., k]

    Args:
        x: ``[..., T]`` tensor.
        back: window extent to the left (>= 0).
        forward: window extent to the right (>= 0).
    """
    if back < 0 or forward < 0:
        raise ValueError("moving_sum window extents must be non-negative")
    n = x.size(-1)
    if n == 0:
        return x.clone()
    flat = x.reshape(-1, 1, n)
    kernel = torch.ones(1, 1, back + forward + 1, dtype=x.dtype)
    out = F.conv1d(F.pad(flat, (back, forward)), kernel)
    return out.reshape(x.shape)


def logsumexp(x, dim=-1):
    """Stable log-sum-exp reduction (max subtraction).

    -inf acts as the additive identity; the reduction is -inf iff every input
    is -inf. An empty reduction axis is an error.
    """
    if x.numel() == 0 or x.size(dim) == 0:
        raise ValueError("logsumexp over an empty input")
    return torch.logsumexp(x, dim=dim)


def grad_check(f, params, eps=1e-5):
    """Compare reverse-mode gradients of a scalar function with central differences.

    The relative error is measured per parameter tensor in the Euclidean norm,
    ||analytic - fd|| / max(||analytic||, 1e-8), and the max over parameters is
    returned. ``f`` takes no arguments and must rebuild its value from the
    current parameter contents on every call.

    Args:
        f: callable returning a scalar tensor.
        params: iterable of parameter tensors to probe.
        eps: central-difference step.
    Returns:
        Maximum relative error over ``params``.
    """
    params = [p for p in params]
    loss = f()
    if not torch.isfinite(loss):
        raise ValueError(f"grad_check: non-finite objective {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    worst = 0.0
    for p, g in zip(params, grads):
        analytic = torch.zeros_like(p) if g is None else g.detach()
        fd = torch.zeros_like(p)
        flat = p.data.view(-1)
        fd_flat = fd.view(-1)
        with torch.no_grad():
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                hi = float(f())
                flat[k] = orig - eps
                lo = float(f())
                flat[k] = orig
                fd_flat[k] = (hi - lo) / (2.0 * eps)
        num = (analytic - fd).norm().item()
        den = max(analytic.norm().item(), 1e-8)
        worst = max(worst, num / den)
    return worst
