"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
All inputs are 2-D float64 arrays (rows are independent) unless noted.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_backward(dy, xhat, rstd, gain):
    d = xhat.shape[1]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    g = dy * gain
    dx = (g - g.mean(axis=1, keepdims=True)
          - xhat * (g * xhat).sum(axis=1, keepdims=True) / d) * rstd[:, None]
    return dx, dgain, dbias


def softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def gelu_forward(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def gelu_backward(x, dy):
    u = GELU_C * (x + GELU_A * x ** 3)
    th = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def umeyama2d_batch(src, dst):
    """Closed-form 2-D similarity fit for a batch of frames.

    ``src`` and ``dst`` are (F, L, 2). Returns ``(scale, angle, trans, resid)``
    where ``resid`` is the summed squared residual per frame and ``scale`` is 0
    for frames whose source points have zero spread.
    """
    mu_s = src.mean(axis=1)
    mu_d = dst.mean(axis=1)
    ps = src - mu_s[:, None, :]
    qd = dst - mu_d[:, None, :]
    a = (ps[..., 0] * qd[..., 0] + ps[..., 1] * qd[..., 1]).sum(axis=1)
    b = (ps[..., 0] * qd[..., 1] - ps[..., 1] * qd[..., 0]).sum(axis=1)
    sp = (ps * ps).sum(axis=(1, 2))
    sq = (qd * qd).sum(axis=(1, 2))
    angle = np.arctan2(b, a)
    norm = np.hypot(a, b)
    ok = sp > 0.0
    scale = np.where(ok, norm / np.where(ok, sp, 1.0), 0.0)
    c, s = np.cos(angle), np.sin(angle)
    rx = c * mu_s[:, 0] - s * mu_s[:, 1]
    ry = s * mu_s[:, 0] + c * mu_s[:, 1]
    trans = np.stack([mu_d[:, 0] - scale * rx, mu_d[:, 1] - scale * ry], axis=1)
    resid = np.where(ok, np.maximum(sq - norm * scale, 0.0), sq)
    return scale, angle, trans, resid
