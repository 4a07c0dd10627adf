"""Central finite-difference gradient check over module parameters."""
from __future__ import annotations

import torch


def max_relative_error(module: torch.nn.Module, loss_fn, eps: float = 1e-6) -> dict[str, float]:
    """Per-parameter ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||, 1e-12).

    ``loss_fn()`` must be a deterministic scalar function of the module
    parameters (double precision).
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = {n: p.grad.detach().clone() for n, p in params}
    errors = {}
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                fd[i] = (up - down) / (2 * eps)
            g = analytic[name].view(-1)
            scale = max(g.norm().item(), fd.norm().item(), 1e-12)
            errors[name] = (g - fd).norm().item() / scale
    return errors
