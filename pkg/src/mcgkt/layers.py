"""Composite layers: the 3-conv block, level transitions, the two-step
backward ConvLSTM fusion unit and the squeeze-and-excitation gate."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

GATES = ("i", "f", "o", "g")


def _param(shape, dtype=np.float32, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def zeros(cls, cin: int, cout: int, k: int = 3, dtype=np.float32):
        return cls(_param((cout, cin, k, k), dtype), _param((cout,), dtype))

    def tensors(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class ConvBlockParams:
    conv1: ConvParams
    conv2: ConvParams
    conv3: ConvParams

    @classmethod
    def zeros(cls, cin: int, cout: int, dtype=np.float32):
        return cls(ConvParams.zeros(cin, cout, dtype=dtype),
                   ConvParams.zeros(cout, cout, dtype=dtype),
                   ConvParams.zeros(cout, cout, dtype=dtype))

    @property
    def in_channels(self) -> int:
        return self.conv1.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv1.weight.shape[0]

    def tensors(self) -> dict:
        out = {}
        for f in fields(self):
            for k, v in getattr(self, f.name).tensors().items():
                out[f"{f.name}.{k}"] = v
        return out


@dataclass
class ConvLSTMParams:
    """Gate kernels for the input path (``wx_*``) and hidden path (``wh_*``)."""

    wx_i: Tensor
    wx_f: Tensor
    wx_o: Tensor
    wx_g: Tensor
    wh_i: Tensor
    wh_f: Tensor
    wh_o: Tensor
    wh_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @classmethod
    def zeros(cls, channels: int, dtype=np.float32):
        kw = {}
        for g in GATES:
            kw[f"wx_{g}"] = _param((channels, channels, 3, 3), dtype)
            kw[f"wh_{g}"] = _param((channels, channels, 3, 3), dtype)
            kw[f"b_{g}"] = _param((channels,), dtype)
        return cls(**kw)

    @property
    def channels(self) -> int:
        return self.wx_i.shape[0]

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class SEParams:
    fc1: ConvParams  # weight [C/r, C]
    fc2: ConvParams  # weight [C, C/r]
    ratio: int

    @staticmethod
    def reduced(channels: int, ratio: int) -> int:
        return max(channels // ratio, 1)

    @classmethod
    def zeros(cls, channels: int, ratio: int, dtype=np.float32):
        red = cls.reduced(channels, ratio)
        return cls(ConvParams(_param((red, channels), dtype), _param((red,), dtype)),
                   ConvParams(_param((channels, red), dtype), _param((channels,), dtype)),
                   ratio)

    def tensors(self) -> dict:
        return {f"fc1.{k}": v for k, v in self.fc1.tensors().items()} | {
            f"fc2.{k}": v for k, v in self.fc2.tensors().items()}


def conv_relu(x: Tensor, p: ConvParams) -> Tensor:
    return T.relu(T.conv2d(x, p.weight, p.bias, padding="same"))


def conv_block(x: Tensor, params: ConvBlockParams) -> Tensor:
    """Three 3x3 same-padded convolutions, each followed by ReLU."""
    if x.shape[1] != params.in_channels:
        raise ShapeError(f"conv_block: input has {x.shape[1]} channels, block expects {params.in_channels}")
    x = conv_relu(x, params.conv1)
    x = conv_relu(x, params.conv2)
    return conv_relu(x, params.conv3)


def down_transition(x: Tensor) -> Tensor:
    return T.maxpool2x2(x)


def up_transition(x: Tensor, params: ConvParams) -> Tensor:
    """Nearest 2x upsampling followed by a channel-halving 3x3 conv + ReLU."""
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"up_transition needs an even channel count, got {c}")
    if params.weight.shape[:2] != (c // 2, c):
        raise ShapeError(f"up_transition: weight {params.weight.shape} does not map {c} -> {c // 2}")
    return conv_relu(T.upsample_nearest2x(x), params)


def _stacked(params: ConvLSTMParams, prefix: str) -> Tensor:
    return T.concat([getattr(params, f"{prefix}_{g}") for g in GATES], axis=0)


def ikt_fuse(e_out: Tensor, d_in: Tensor, params: ConvLSTMParams) -> Tensor:
    """Two-step ConvLSTM: the decoder input first, then the encoder output.

    States start at zero; the hidden state after the second step is returned.
    The four gate kernels of each path are stacked so one convolution serves
    all gates.
    """
    if e_out.shape != d_in.shape:
        raise ShapeError(f"ikt_fuse: encoder output {e_out.shape} and decoder input {d_in.shape} differ")
    if e_out.shape[1] != params.channels:
        raise ShapeError(f"ikt_fuse: {e_out.shape[1]} channels, unit built for {params.channels}")
    wx = _stacked(params, "wx")
    wh = _stacked(params, "wh")
    b = _stacked(params, "b")
    zero_bias = Tensor(np.zeros(b.shape, dtype=b.dtype))

    h = c = None
    for x in (d_in, e_out):
        pre = T.conv2d(x, wx, b)
        if h is not None:
            # h == 0 at the first step, so its convolution is skipped there
            pre = T.add(pre, T.conv2d(h, wh, zero_bias))
        zi, zf, zo, zg = T.split_channels(pre, 4)
        i, f, o, g = T.sigmoid(zi), T.sigmoid(zf), T.sigmoid(zo), T.tanh(zg)
        c = T.mul(i, g) if c is None else T.add(T.mul(f, c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
    return h


def se_gate(x: Tensor, params: SEParams) -> Tensor:
    """Squeeze (global average pool), excite (FC-ReLU-FC-sigmoid), rescale channels."""
    if x.ndim != 4 or x.shape[1] != params.fc1.weight.shape[1]:
        raise ShapeError(f"se_gate: input {x.shape} does not match gate for {params.fc1.weight.shape[1]} channels")
    s = T.global_avg_pool(x)
    z = T.sigmoid(T.dense(T.relu(T.dense(s, params.fc1.weight, params.fc1.bias)),
                          params.fc2.weight, params.fc2.bias))
    return T.channel_scale(x, z)
