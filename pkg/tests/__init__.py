import os

import torch

# slow training pilots only run when OODCAL_LONG_TESTS=1
LONG_TESTS = os.environ.get("OODCAL_LONG_TESTS") == "1"


def central_difference_check(test, net, loss_fn, eps=1e-6, tolerance=1e-3):
    """compare autograd with central differences over every trainable parameter"""
    params = [p for p in net.parameters() if p.requires_grad]
    net.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).clone()
    numeric = torch.zeros_like(analytic)
    offset = 0
    with torch.no_grad():
        for p in params:
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                upper = loss_fn().item()
                flat[i] = original - eps
                lower = loss_fn().item()
                flat[i] = original
                numeric[offset + i] = (upper - lower) / (2 * eps)
            offset += flat.numel()
    error = (analytic - numeric).norm() / max(numeric.norm().item(), 1e-12)
    test.assertLessEqual(error.item(), tolerance)
