"""Shared test fixtures that need package objects (the oracles module stays package-free)."""
import numpy as np

from affuse.layers import BatchNorm2d

from oracles import bottleneck_pixel, sigmoid_scalar


def randomize_bn(module, rng):
    """Random BN affine terms and running statistics, then eval mode so every sample is independent."""
    for _, m in module.modules():
        if isinstance(m, BatchNorm2d):
            c = m.gamma.value.size
            m.gamma.value[:] = rng.uniform(0.5, 1.5, c)
            m.beta.value[:] = rng.normal(0, 0.3, c)
            m.running_mean[:] = rng.normal(0, 0.3, c)
            m.running_var[:] = rng.uniform(0.5, 1.5, c)
    return module.eval()


def branch_oracle(branch, v):
    """Scalar-loop evaluation of one context branch on a channel vector."""
    w1 = branch.pw1.weight.value[:, :, 0, 0]
    w2 = branch.pw2.weight.value[:, :, 0, 0]
    bn = [(b.gamma.value, b.beta.value, b.running_mean, b.running_var) for b in (branch.bn1, branch.bn2)]
    return bottleneck_pixel(v, w1, w2, *bn)


def mscam_oracle(cam, x):
    """Attention map of a global+local MS-CAM computed pixel by pixel."""
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for b in range(n):
        g = branch_oracle(cam.branch("global"), [x[b, k].mean() for k in range(c)])
        for i in range(h):
            for j in range(w):
                loc = branch_oracle(cam.branch("local"), x[b, :, i, j])
                out[b, :, i, j] = [sigmoid_scalar(p + q) for p, q in zip(loc, g)]
    return out
