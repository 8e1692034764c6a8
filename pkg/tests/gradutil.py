"""Central finite differences against autograd, in float64."""
import numpy as np
import torch


def relative_gradient_error(loss_fn, params, n_coords=30, h=1e-6, seed=0):
    """Norm-wise relative error of the sampled gradient vector.

    ``loss_fn()`` must return a scalar tensor built from ``params``.
    Up to ``n_coords`` randomly chosen entries per tensor are perturbed
    and the error is taken over all of them jointly, so tensors whose
    true gradient is zero (e.g. attention key biases) do not divide
    finite-difference noise by zero.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss_fn().backward()
    a, fd = [], []
    for p in params:
        analytic = p.grad.detach().reshape(-1).clone()
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        for i in picks:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
            fd.append((up - down) / (2 * h))
            a.append(analytic[i].item())
    a, fd = np.array(a), np.array(fd)
    return float(np.linalg.norm(a - fd) / max(np.linalg.norm(fd), 1e-300))
