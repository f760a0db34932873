"""Central finite-difference check over every element of a parameter list."""

import torch


def fd_relative_errors(loss_fn, params, step=1e-4, floor=1e-7):
    """Return the worst relative error between autograd and central differences."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = loss_fn().item()
                flat[i] = old - step
                down = loss_fn().item()
                flat[i] = old
                fd = (up - down) / (2 * step)
                an = gflat[i].item()
                err = abs(an - fd) / max(abs(an), abs(fd), floor)
                if abs(an - fd) > floor:
                    worst = max(worst, err)
    return worst
