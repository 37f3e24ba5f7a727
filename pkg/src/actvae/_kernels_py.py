"""Pure numpy LSTM kernels; reference semantics for the Cython extension.

Gate layout along the 4H axis is (input, forget, candidate, output).
``xh`` is the concatenation ``[x, h_prev]`` so that one weight matrix
``W`` of shape (4H, I+H) serves both the input and recurrent projections.
"""
import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(W, b, xh, c_prev):
    """Batched cell update.  Returns ``(h, c, act)``; ``act`` caches gates."""
    H = c_prev.shape[1]
    act = xh @ W.T
    act += b
    act[:, : 2 * H] = _sigmoid(act[:, : 2 * H])
    act[:, 2 * H : 3 * H] = np.tanh(act[:, 2 * H : 3 * H])
    act[:, 3 * H :] = _sigmoid(act[:, 3 * H :])
    i, f, g, o = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, act


def lstm_backward(W, xh, c_prev, c, act, dh, dc, dW, db):
    """Backprop through :func:`lstm_forward`.

    ``dW`` and ``db`` are accumulated in place.  Returns ``(dxh, dc_prev)``.
    """
    H = c_prev.shape[1]
    i, f, g, o = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
    tc = np.tanh(c)
    dc_tot = dc + dh * o * (1.0 - tc * tc)
    da = np.empty_like(act)
    da[:, :H] = dc_tot * g * i * (1.0 - i)
    da[:, H : 2 * H] = dc_tot * c_prev * f * (1.0 - f)
    da[:, 2 * H : 3 * H] = dc_tot * i * (1.0 - g * g)
    da[:, 3 * H :] = dh * tc * o * (1.0 - o)
    dW += da.T @ xh
    db += da.sum(axis=0)
    dxh = da @ W
    return dxh, dc_tot * f
