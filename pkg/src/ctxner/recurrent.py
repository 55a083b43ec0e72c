"""Elman RNN, GRU and LSTM cells, stacked bidirectional runner, context encoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor, add, concat, matmul, mul, sigmoid, stack, sub, tanh

CELL_BLOCKS = {"rnn": 1, "gru": 3, "lstm": 4}


@dataclass
class CellParams:
    """One recurrent cell.

    ``weight`` is (input_dim + hidden_dim) x (blocks * hidden_dim): rows
    are [input; hidden], column blocks are ordered input, forget, cell,
    output for the LSTM and update, reset, candidate for the GRU.
    """

    kind: str
    input_dim: int
    hidden_dim: int
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.kind not in CELL_BLOCKS:
            raise ValueError(f"unknown cell kind {self.kind!r}")
        width = CELL_BLOCKS[self.kind] * self.hidden_dim
        if self.weight.shape != (self.input_dim + self.hidden_dim, width):
            raise DimensionError(
                f"{self.kind} weight shape {self.weight.shape}, expected "
                f"{(self.input_dim + self.hidden_dim, width)}"
            )
        if self.bias.shape != (width,):
            raise DimensionError(f"{self.kind} bias shape {self.bias.shape}, expected {(width,)}")

    @classmethod
    def init(cls, kind: str, input_dim: int, hidden_dim: int,
             rng: np.random.Generator, name: str = "cell") -> "CellParams":
        if kind not in CELL_BLOCKS:
            raise ValueError(f"unknown cell kind {kind!r}")
        n_blocks = CELL_BLOCKS[kind]
        # Glorot bounds per gate block
        bound = np.sqrt(6.0 / (input_dim + hidden_dim + hidden_dim))
        w = rng.uniform(-bound, bound, size=(input_dim + hidden_dim, n_blocks * hidden_dim))
        b = np.zeros(n_blocks * hidden_dim)
        if kind == "lstm":
            b[hidden_dim:2 * hidden_dim] = 1.0
        return cls(
            kind, input_dim, hidden_dim,
            Tensor(w, requires_grad=True, name=f"{name}.weight"),
            Tensor(b, requires_grad=True, name=f"{name}.bias"),
        )

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor | None = None

    @classmethod
    def zeros(cls, kind: str, hidden_dim: int) -> "RecurrentState":
        c = Tensor.zeros(hidden_dim) if kind == "lstm" else None
        return cls(Tensor.zeros(hidden_dim), c)


def _check_state(params: CellParams, state: RecurrentState) -> None:
    if state.h.shape != (params.hidden_dim,):
        raise DimensionError(f"state h shape {state.h.shape}, expected ({params.hidden_dim},)")
    if params.kind == "lstm" and (state.c is None or state.c.shape != (params.hidden_dim,)):
        raise DimensionError(f"lstm state needs c of shape ({params.hidden_dim},)")


def cell_step(params: CellParams, x: Tensor, state: RecurrentState) -> RecurrentState:
    """Advance one time step."""
    if x.shape != (params.input_dim,):
        raise DimensionError(f"cell input shape {x.shape}, expected ({params.input_dim},)")
    _check_state(params, state)
    H = params.hidden_dim
    h = state.h
    if params.kind == "gru":
        zr = sigmoid(add(matmul(concat([x, h]), params.weight[:, :2 * H]), params.bias[:2 * H]))
        z, r = zr[:H], zr[H:]
        cand_in = concat([x, mul(r, h)])
        cand = tanh(add(matmul(cand_in, params.weight[:, 2 * H:]), params.bias[2 * H:]))
        # h' = (1 - z) * h + z * cand
        return RecurrentState(add(h, mul(z, sub(cand, h))))

    pre = add(matmul(concat([x, h]), params.weight), params.bias)
    if params.kind == "rnn":
        return RecurrentState(tanh(pre))
    i = sigmoid(pre[:H])
    f = sigmoid(pre[H:2 * H])
    g = tanh(pre[2 * H:3 * H])
    o = sigmoid(pre[3 * H:])
    c = add(mul(f, state.c), mul(i, g))
    return RecurrentState(mul(o, tanh(c)), c)


def run_cell(params: CellParams, inputs: list[Tensor], init: RecurrentState | None = None) -> tuple[list[Tensor], RecurrentState]:
    """Unroll over ``inputs``; returns per-step hidden outputs and the final state."""
    state = init if init is not None else RecurrentState.zeros(params.kind, params.hidden_dim)
    outputs = []
    for x in inputs:
        state = cell_step(params, x, state)
        outputs.append(state.h)
    return outputs, state


@dataclass
class StackedBiConfig:
    layers: int = 2
    hidden_dim: int = 64
    cell: str = "lstm"

    def __post_init__(self):
        if self.layers < 1 or self.hidden_dim < 1:
            raise ValueError("layers and hidden_dim must be >= 1")
        if self.cell not in CELL_BLOCKS:
            raise ValueError(f"unknown cell kind {self.cell!r}")


@dataclass
class StackedBiParams:
    config: StackedBiConfig
    forward: list[CellParams] = field(default_factory=list)
    backward: list[CellParams] = field(default_factory=list)

    @classmethod
    def init(cls, config: StackedBiConfig, input_dim: int, rng: np.random.Generator) -> "StackedBiParams":
        fwd, bwd = [], []
        dim = input_dim
        for layer in range(config.layers):
            fwd.append(CellParams.init(config.cell, dim, config.hidden_dim, rng, f"bilstm.l{layer}.fwd"))
            bwd.append(CellParams.init(config.cell, dim, config.hidden_dim, rng, f"bilstm.l{layer}.bwd"))
            dim = 2 * config.hidden_dim
        return cls(config, fwd, bwd)

    @property
    def output_dim(self) -> int:
        return 2 * self.config.hidden_dim

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer, (f, b) in enumerate(zip(self.forward, self.backward)):
            out.update(f.tensors(f"bilstm.l{layer}.fwd"))
            out.update(b.tensors(f"bilstm.l{layer}.bwd"))
        return out


def run_bidirectional(
    params: StackedBiParams,
    inputs: Tensor,
    init_forward: RecurrentState | None = None,
    init_all_layers: bool = False,
) -> Tensor:
    """T x (2 * hidden_dim) top-layer outputs, [forward_h; backward_h] per step.

    ``init_forward`` seeds the forward direction of layer 1 only (or of
    every layer with ``init_all_layers``); all other runs start at zero.
    """
    T = inputs.shape[0]
    if inputs.data.ndim != 2 or T < 1:
        raise DimensionError(f"run_bidirectional needs a non-empty T x D matrix, got {inputs.shape}")
    H = params.config.hidden_dim
    if init_forward is not None:
        if init_forward.h.shape != (H,):
            raise DimensionError(f"init_forward hidden size {init_forward.h.shape[0]} != hidden_dim {H}")
        _check_state(params.forward[0], init_forward)
    rows = [inputs[t] for t in range(T)]
    layer_out = inputs
    for layer, (fcell, bcell) in enumerate(zip(params.forward, params.backward)):
        seed = init_forward if (layer == 0 or init_all_layers) else None
        f_out, _ = run_cell(fcell, rows, seed)
        b_out, _ = run_cell(bcell, rows[::-1])
        b_out = b_out[::-1]
        rows = [concat([f, b]) for f, b in zip(f_out, b_out)]
        layer_out = stack(rows)
    return layer_out


def encode_context(params: CellParams, embedded: Tensor | None) -> RecurrentState:
    """Final (h, c) of a unidirectional LSTM over the system utterance.

    An empty utterance (``None`` or zero rows) yields the zero state.
    """
    if params.kind != "lstm":
        raise ValueError("the context encoder is an LSTM")
    zero = RecurrentState.zeros("lstm", params.hidden_dim)
    if embedded is None or embedded.shape[0] == 0:
        return zero
    if embedded.data.ndim != 2 or embedded.shape[1] != params.input_dim:
        raise DimensionError(
            f"context embedding width {embedded.shape[-1]} != encoder input_dim {params.input_dim}"
        )
    _, state = run_cell(params, [embedded[t] for t in range(embedded.shape[0])], zero)
    return state
