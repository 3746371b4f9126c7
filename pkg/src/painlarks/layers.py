"""Recurrent, graph and temporal layers built on the tensor core."""
from __future__ import annotations

from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LSTM_VARIANTS = ("plain", "bi", "attention", "stacked")


class Module:
    """Parameter container; attributes holding trainable tensors are parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}{i}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {list(p.shape)}, got {list(arr.shape)}")
            p.data[...] = arr


def uniform_param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class LstmState(NamedTuple):
    h: Tensor
    c: Tensor


def _gate_update(z: Tensor, c: Tensor | None, H: int) -> LstmState:
    hc = T.lstm_cell(z, c)
    return LstmState(hc[..., :H], hc[..., H:])


class LSTM(Module):
    """Single LSTM layer. Gate weights are stored fused as ``[D, 4H]``/``[H, 4H]``."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        D, H = input_size, hidden_size
        self.input_size, self.hidden_size = D, H
        self.W = uniform_param(rng, (D, 4 * H), D)
        self.U = uniform_param(rng, (H, 4 * H), H)
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(W, U, b)`` views for gate ``i``, ``f``, ``o`` or ``c``."""
        k = "ifoc".index(name)
        H = self.hidden_size
        sl = slice(k * H, (k + 1) * H)
        return self.W.data[:, sl], self.U.data[:, sl], self.b.data[sl]

    def initial_state(self, batch_shape=()) -> LstmState:
        zeros = Tensor(np.zeros(tuple(batch_shape) + (self.hidden_size,)))
        return LstmState(zeros, zeros)

    def step(self, x: Tensor, state: LstmState) -> LstmState:
        if x.shape[-1] != self.input_size or state.h.shape[-1] != self.hidden_size:
            raise ShapeError(f"lstm step: input {list(x.shape)} / hidden {list(state.h.shape)} "
                             f"do not match D={self.input_size}, H={self.hidden_size}")
        z = T.add_bias(T.linear(x, self.W) + T.linear(state.h, self.U), self.b)
        return _gate_update(z, state.c, self.hidden_size)

    def run(self, seq: Tensor, return_sequence: bool = False) -> Tensor:
        """Roll over ``seq[..., T, D]`` from a zero state."""
        if seq.ndim < 2 or seq.shape[-1] != self.input_size:
            raise ShapeError(f"lstm: expected [..., T, {self.input_size}], got {list(seq.shape)}")
        steps = seq.shape[-2]
        xw = T.add_bias(T.linear(seq, self.W), self.b)
        h = c = None
        hs = []
        for t in range(steps):
            z = xw[..., t, :]
            if h is not None:
                z = z + T.linear(h, self.U)
            h, c = _gate_update(z, c, self.hidden_size)
            hs.append(h)
        return T.stack(hs, axis=-2) if return_sequence else h


def lstm_cell_step(params: LSTM, x: Tensor, state: LstmState) -> LstmState:
    return params.step(x, state)


class SequenceEncoder(Module):
    """Sequence-to-vector LSTM head in one of four variants.

    ``plain`` returns the final hidden state; ``bi`` concatenates the forward
    final state with the backward pass's state at the first timestep;
    ``attention`` pools all hidden states with additive attention; ``stacked``
    feeds the first layer's hidden sequence to a second layer.
    """

    def __init__(self, variant: str, input_size: int, hidden_size: int,
                 rng: np.random.Generator, attention_size: int | None = None):
        if variant not in LSTM_VARIANTS:
            raise ValueError(f"unknown LSTM variant {variant!r}; expected one of {LSTM_VARIANTS}")
        self.variant = variant
        self.lstm = LSTM(input_size, hidden_size, rng)
        if variant == "bi":
            self.lstm_reverse = LSTM(input_size, hidden_size, rng)
        elif variant == "stacked":
            self.lstm2 = LSTM(hidden_size, hidden_size, rng)
        elif variant == "attention":
            A = attention_size or hidden_size
            self.attn_W = uniform_param(rng, (hidden_size, A), hidden_size)
            self.attn_v = uniform_param(rng, (A, 1), A)
        self._last_attention = None

    @property
    def output_size(self) -> int:
        return 2 * self.lstm.hidden_size if self.variant == "bi" else self.lstm.hidden_size

    @property
    def last_attention(self) -> np.ndarray | None:
        return self._last_attention

    def __call__(self, seq: Tensor) -> Tensor:
        if seq.ndim < 2 or seq.shape[-2] == 0:
            raise ShapeError("sequence must have at least one timestep")
        unbatched = seq.ndim == 2
        if unbatched:
            seq = seq.reshape((1,) + seq.shape)
        out = getattr(self, f"_{self.variant}")(seq)
        return out.reshape(out.shape[1:]) if unbatched else out

    def _plain(self, seq):
        return self.lstm.run(seq)

    def _bi(self, seq):
        return T.concat([self.lstm.run(seq), self.lstm_reverse.run(seq[:, ::-1])], axis=-1)

    def _stacked(self, seq):
        return self.lstm2.run(self.lstm.run(seq, return_sequence=True))

    def _attention(self, seq):
        hs = self.lstm.run(seq, return_sequence=True)
        B, steps, H = hs.shape
        scores = T.linear(T.tanh(T.linear(hs, self.attn_W)), self.attn_v).reshape(B, steps)
        alpha = T.softmax(scores)
        self._last_attention = alpha.data
        return T.bmm(alpha.reshape(B, 1, steps), hs).reshape(B, H)


def run_sequence_lstm(encoder: SequenceEncoder, seq: Tensor) -> Tensor:
    return encoder(seq)


def stacked_lstm_param_count(input_size: int, hidden_size: int) -> int:
    D, H = input_size, hidden_size
    return 4 * (H * D + H * H + H) + 4 * (H * H + H * H + H)


class ConvLSTM(Module):
    """LSTM over node feature maps whose input and hidden transforms are
    graph convolutions: gates see ``(A_hat X) W`` and ``(A_hat h) U``."""

    def __init__(self, in_channels: int, hidden: int, rng: np.random.Generator):
        self.in_channels, self.hidden = in_channels, hidden
        self.W = uniform_param(rng, (in_channels, 4 * hidden), in_channels)
        self.U = uniform_param(rng, (hidden, 4 * hidden), hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def step(self, A_hat: Tensor, x: Tensor, state: LstmState) -> LstmState:
        if x.shape[-2] != A_hat.shape[0] or state.h.shape[-2] != A_hat.shape[0]:
            raise ShapeError(f"convlstm: {x.shape[-2]} nodes in input, graph has {A_hat.shape[0]}")
        z = T.linear(T.mix(A_hat, x), self.W) + T.linear(T.mix(A_hat, state.h), self.U)
        return _gate_update(T.add_bias(z, self.b), state.c, self.hidden)

    def run(self, A_hat: Tensor, X: Tensor) -> Tensor:
        """``X[..., T, V, C]`` -> hidden sequence ``[..., T, V, hidden]``."""
        if X.shape[-2] != A_hat.shape[0]:
            raise ShapeError(f"convlstm: {X.shape[-2]} nodes in input, graph has {A_hat.shape[0]}")
        xw = T.add_bias(T.linear(T.mix(A_hat, X), self.W), self.b)
        h = c = None
        hs = []
        for t in range(X.shape[-3]):
            z = xw[..., t, :, :]
            if h is not None:
                z = z + T.linear(T.mix(A_hat, h), self.U)
            h, c = _gate_update(z, c, self.hidden)
            hs.append(h)
        return T.stack(hs, axis=-3)


def convlstm_cell_step(params: ConvLSTM, A_hat: Tensor, x: Tensor, state: LstmState) -> LstmState:
    return params.step(A_hat, x, state)


def graph_convolution(A_hat: Tensor, X: Tensor, W: Tensor) -> Tensor:
    """``A_hat @ X @ W`` per frame; no activation."""
    return T.linear(T.mix(A_hat, X), W)


def temporal_convolution(X: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded convolution along time of ``X[..., T, V, C_in]`` for every node."""
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"temporal kernel must be odd for same padding, got {k}")
    if X.ndim < 3:
        raise ShapeError(f"temporal_convolution expects [..., T, V, C], got {list(X.shape)}")
    return T.conv1d_temporal(X, kernel, bias, pad=(k - 1) // 2, axis=-3)


class Dense(Module):
    """Position-wise affine map over the last axis (a 1x1 convolution)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        self.W = uniform_param(rng, (in_features, out_features), in_features)
        self.b = zeros_param(out_features) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.linear(x, self.W)
        return y if self.b is None else T.add_bias(y, self.b)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        self.gamma = ones_param(channels)
        self.beta = zeros_param(channels)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class TemporalConv(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator):
        if kernel_size % 2 == 0:
            raise ValueError(f"temporal kernel must be odd, got {kernel_size}")
        self.kernel = uniform_param(rng, (out_channels, in_channels, kernel_size),
                                    in_channels * kernel_size)
        self.bias = zeros_param(out_channels)

    def __call__(self, X: Tensor) -> Tensor:
        return temporal_convolution(X, self.kernel, self.bias)
