"""3-D convolutional LSTM cell shared by the registration and segmentation encoders.

One step computes, in order,

    f = sigma(W_xf * x + W_hf * h + b_f)
    i = sigma(W_xi * x + W_hi * h + b_i)
    c~ = tanh(W_xc * x + W_hc * h + b_c)
    o = sigma(W_xo * x + W_ho * h + b_o)
    c' = f (*) c + i (*) c~
    h' = o (*) tanh(c')

with * a 3-D convolution and (*) the Hadamard product. The eight gate
kernels are kept as separate parameters; each step stacks them into one
convolution over concat(x, h) so the four gate pre-activations come out
of a single kernel pass (gate order f, i, c~, o along the output channels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

_GATES = ("f", "i", "c", "o")


@dataclass
class ClstmState:
    """Hidden and cell state; h stays in (-1, 1), shapes always match."""

    h: Tensor
    c: Tensor

    def detached(self) -> "ClstmState":
        return ClstmState(T.detach(self.h), T.detach(self.c))


def init_state(hidden_channels: int, spatial) -> ClstmState:
    """Zero state (both h^0 and c^0) for the given spatial dims."""
    spatial = tuple(int(s) for s in spatial)
    if hidden_channels < 1 or any(s < 1 for s in spatial):
        raise ValueError(f"init_state: bad dims hidden={hidden_channels}, spatial={spatial}")
    shape = (hidden_channels,) + spatial
    return ClstmState(Tensor.zeros(shape), Tensor.zeros(shape))


class ClstmCell:
    """Parameters of one convolutional LSTM cell (kernel 3, pad 1, stride 1)."""

    KERNEL = 3
    PAD = 1

    def __init__(self, in_channels: int, hidden_channels: int, rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        k = self.KERNEL
        h = hidden_channels

        def w(shape, fan_in):
            if rng is None:
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
            return Tensor(data, requires_grad=True)

        fan_x = in_channels * k ** 3
        fan_h = h * k ** 3
        for gate in _GATES:
            setattr(self, f"W_x{gate}", w((h, in_channels, k, k, k), fan_x))
            setattr(self, f"W_h{gate}", w((h, h, k, k, k), fan_h))
            setattr(self, f"b_{gate}", Tensor.zeros((h,), requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for gate in _GATES:
            out[f"W_x{gate}"] = getattr(self, f"W_x{gate}")
            out[f"W_h{gate}"] = getattr(self, f"W_h{gate}")
            out[f"b_{gate}"] = getattr(self, f"b_{gate}")
        return out


def clstm_step(cell: ClstmCell, x: Tensor, state: ClstmState) -> tuple[Tensor, ClstmState]:
    """Advance the cell by one step; returns (h', new state) with h' is state.h."""
    if x.ndim != 4 or x.shape[0] != cell.in_channels:
        raise ValueError(
            f"clstm_step: input {x.shape} does not match in_channels={cell.in_channels}"
        )
    if state.h.shape[1:] != x.shape[1:]:
        raise ValueError(f"clstm_step: state {state.h.shape} vs input {x.shape} spatial mismatch")
    h = cell.hidden_channels

    wx = T.concat([getattr(cell, f"W_x{g}") for g in _GATES], axis=0)
    wh = T.concat([getattr(cell, f"W_h{g}") for g in _GATES], axis=0)
    w = T.concat([wx, wh], axis=1)
    b = T.concat([getattr(cell, f"b_{g}") for g in _GATES], axis=0)

    pre = T.conv3d(T.concat_channels([x, state.h]), w, b, stride=1, pad=cell.PAD)
    f = T.sigmoid(T.narrow(pre, 0, 0, h))
    i = T.sigmoid(T.narrow(pre, 0, h, h))
    c_tilde = T.tanh(T.narrow(pre, 0, 2 * h, h))
    o = T.sigmoid(T.narrow(pre, 0, 3 * h, h))
    c_new = T.add(T.hadamard(f, state.c), T.hadamard(i, c_tilde))
    h_new = T.hadamard(o, T.tanh(c_new))
    return h_new, ClstmState(h_new, c_new)
