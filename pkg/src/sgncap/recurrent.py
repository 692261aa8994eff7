"""The two LSTM cells of the captioner.

The decoder cell is non-standard in two ways: its gates also read the
previous attention vector (a third recurrent input), and in the default
"paper-literal" mode its candidate activation is a sigmoid rather than the
usual tanh. ``candidate_tanh=True`` switches the candidate to tanh. The
guiding cell is a plain LSTM with a tanh candidate.

Dropout here follows the output-wrapper convention: the dropped vector is
what downstream consumers see, while the raw cell output is carried as the
recurrent state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor

GATES = ("i", "f", "o", "g")


@dataclass
class LstmDParams:
    """Decoder-cell parameters, one (w_x, w_h, w_t, b) set per gate.

    w_x maps the step input, w_h the previous hidden state, w_t the previous
    attention vector; all gates share the same output dimension H.
    """

    w_x: dict  # gate -> H x D_x
    w_h: dict  # gate -> H x H
    w_t: dict  # gate -> H x H
    b: dict    # gate -> H


@dataclass
class LstmDState:
    h: Tensor
    m: Tensor
    h_tilde: Tensor


@dataclass
class LstmGParams:
    """Standard LSTM parameters over the guiding input."""

    w_x: dict  # gate -> D_g x D_z
    w_h: dict  # gate -> D_g x D_g
    b: dict    # gate -> D_g


@dataclass
class LstmGState:
    hidden: Tensor
    memory: Tensor


def zero_lstm_d_state(h_dim: int) -> LstmDState:
    return LstmDState(nm.zeros(h_dim), nm.zeros(h_dim), nm.zeros(h_dim))


def zero_lstm_g_state(g_dim: int) -> LstmGState:
    return LstmGState(nm.zeros(g_dim), nm.zeros(g_dim))


def lstm_d_step(x: Tensor, prev: LstmDState, params: LstmDParams,
                candidate_tanh: bool = False):
    """One decoder-cell update; returns (h, m).

    Gate preactivations combine the step input, previous hidden state and
    previous attention vector. The candidate gate uses sigmoid unless
    ``candidate_tanh`` is set.
    """
    if x.data.ndim != 1 or params.w_x["i"].data.shape[1] != x.data.shape[0]:
        raise ShapeError(
            f"lstm_d_step: input {x.data.shape} vs w_x {params.w_x['i'].data.shape}")
    acts = {}
    for z in GATES:
        pre = nm.affine(
            [(params.w_x[z], x), (params.w_h[z], prev.h), (params.w_t[z], prev.h_tilde)],
            params.b[z])
        if z == "g" and candidate_tanh:
            acts[z] = nm.tanh(pre)
        else:
            acts[z] = nm.sigmoid(pre)
    m = nm.add(nm.hadamard(acts["f"], prev.m), nm.hadamard(acts["i"], acts["g"]))
    h = nm.hadamard(acts["o"], nm.tanh(m))
    return h, m


def lstm_g_step(z: Tensor, prev: LstmGState, params: LstmGParams) -> LstmGState:
    """One standard LSTM update over the guiding input; hidden is the guide."""
    if z.data.ndim != 1 or params.w_x["i"].data.shape[1] != z.data.shape[0]:
        raise ShapeError(
            f"lstm_g_step: input {z.data.shape} vs w_x {params.w_x['i'].data.shape}")
    acts = {}
    for g in GATES:
        pre = nm.affine([(params.w_x[g], z), (params.w_h[g], prev.hidden)], params.b[g])
        acts[g] = nm.tanh(pre) if g == "g" else nm.sigmoid(pre)
    memory = nm.add(nm.hadamard(acts["f"], prev.memory), nm.hadamard(acts["i"], acts["g"]))
    hidden = nm.hadamard(acts["o"], nm.tanh(memory))
    return LstmGState(hidden, memory)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout on a cell output; identity when rate is zero."""
    if rate <= 0.0:
        return x
    if not 0.0 < rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep).astype(np.float64) / keep
    return nm.elem_scale(x, mask)
