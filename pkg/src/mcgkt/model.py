"""The multi-level encoder/decoder deraining network.

Wiring for ``levels = L`` (default 4)::

    E_o^1 = block(rainy)          E_o^j = block(maxpool(E_o^{j-1}))
    D_in^L  = gate(E_o^L)         D_o^L = block(D_in^L)
    D_i^j   = up(D_o^{j+1})                        j = L-1 .. 1
    Dhat^j  = convlstm([D_i^j, E_o^j])  (or skip fusion when IKT is off)
    D_o^j   = block(gate(Dhat^j))
    output  = head(D_o^1)   (+ rainy in residual mode)

``gate`` is the SE context gate when MLCG is on and the identity otherwise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np

from . import tensor as T
from .archive import WeightArchive
from .errors import ConfigError, FormatError, MappingError, ShapeError
from .layers import (ConvBlockParams, ConvLSTMParams, ConvParams, SEParams, conv_block,
                     down_transition, ikt_fuse, se_gate, up_transition)
from .tensor import Tensor

ARCHIVE_KIND = "mcgkt-model"
ARCHIVE_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 64
    levels: int = 4
    se_ratio: int = 16
    enable_ikt: bool = True
    enable_mlcg: bool = True
    skip_fusion: str = "sum"      # fusion when IKT is off: "sum" | "concat"
    output_mode: str = "residual"  # "residual" (rainy + head) | "direct" clean prediction
    input_channels: int = 3
    output_channels: int = 3

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small configuration used for CPU experiments."""
        return cls(**{"base_channels": 8, "se_ratio": 4, **overrides})

    def __post_init__(self):
        if self.base_channels < 2:
            raise ConfigError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.se_ratio < 1:
            raise ConfigError(f"se_ratio must be >= 1, got {self.se_ratio}")
        if self.skip_fusion not in ("sum", "concat"):
            raise ConfigError(f"skip_fusion must be 'sum' or 'concat', got {self.skip_fusion!r}")
        if self.output_mode not in ("direct", "residual"):
            raise ConfigError(f"output_mode must be 'direct' or 'residual', got {self.output_mode!r}")
        if self.output_mode == "residual" and self.input_channels != self.output_channels:
            raise ConfigError("residual output needs equal input and output channel counts")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ConfigError("channel counts must be positive")

    def channels(self, level: int) -> int:
        """Feature channels at encoder/decoder level ``level`` (1-based)."""
        return self.base_channels * 2 ** (level - 1)

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def decoder_in_channels(self, level: int) -> int:
        c = self.channels(level)
        if level < self.levels and not self.enable_ikt and self.skip_fusion == "concat":
            return 2 * c
        return c

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _conv_count(cin: int, cout: int, k: int = 3) -> int:
    return cout * cin * k * k + cout


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for ``config``."""
    L = config.levels
    total = 0
    prev = config.input_channels
    for j in range(1, L + 1):
        c = config.channels(j)
        total += _conv_count(prev, c) + 2 * _conv_count(c, c)
        prev = c
    for j in range(1, L + 1):
        c = config.channels(j)
        total += _conv_count(config.decoder_in_channels(j), c) + 2 * _conv_count(c, c)
    for j in range(1, L):
        total += _conv_count(config.channels(j + 1), config.channels(j))
    if config.enable_ikt:
        for j in range(1, L):
            c = config.channels(j)
            total += 8 * c * c * 9 + 4 * c
    if config.enable_mlcg:
        for j in range(1, L + 1):
            c = config.decoder_in_channels(j)
            r = SEParams.reduced(c, config.se_ratio)
            total += (r * c + r) + (c * r + c)
    total += _conv_count(config.base_channels, config.output_channels)
    return total


@dataclass
class ImportReport:
    copied: list = field(default_factory=list)        # (archive name, parameter name)
    skipped_by_shape: list = field(default_factory=list)  # (archive name, parameter name, src, dst)
    unmapped: list = field(default_factory=list)      # encoder conv slots left random

    def summary(self) -> str:
        lines = [f"copied: {len(self.copied)}  skipped_by_shape: {len(self.skipped_by_shape)}  "
                 f"unmapped: {len(self.unmapped)}"]
        lines += [f"  copied   {src} -> {dst}" for src, dst in self.copied]
        lines += [f"  skipped  {src} -> {dst} ({list(a)} vs {list(b)})"
                  for src, dst, a, b in self.skipped_by_shape]
        lines += [f"  unmapped {slot}" for slot in self.unmapped]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "copied": [list(x) for x in self.copied],
            "skipped_by_shape": [[s, d, list(a), list(b)] for s, d, a, b in self.skipped_by_shape],
            "unmapped": list(self.unmapped),
        }


class MCGKTModel:
    """Parameters of the network, grouped per level, with a flat name view."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        L = config.levels
        self.encoder = []
        prev = config.input_channels
        for j in range(1, L + 1):
            self.encoder.append(ConvBlockParams.zeros(prev, config.channels(j), dtype))
            prev = config.channels(j)
        self.decoder = [ConvBlockParams.zeros(config.decoder_in_channels(j), config.channels(j), dtype)
                        for j in range(1, L + 1)]
        # up[j-1] maps level j+1 features to level j
        self.up = [ConvParams.zeros(config.channels(j + 1), config.channels(j), dtype=dtype)
                   for j in range(1, L)]
        self.ikt = ([ConvLSTMParams.zeros(config.channels(j), dtype) for j in range(1, L)]
                    if config.enable_ikt else [])
        self.se = ([SEParams.zeros(config.decoder_in_channels(j), config.se_ratio, dtype)
                    for j in range(1, L + 1)] if config.enable_mlcg else [])
        self.head = ConvParams.zeros(config.base_channels, config.output_channels, dtype=dtype)

    # -- parameter access -------------------------------------------------

    def named_parameters(self) -> Iterator[tuple]:
        for j, blk in enumerate(self.encoder, 1):
            for k, t in blk.tensors().items():
                yield f"enc{j}.{k}", t
        for j, blk in enumerate(self.decoder, 1):
            for k, t in blk.tensors().items():
                yield f"dec{j}.{k}", t
        for j, p in enumerate(self.up, 1):
            for k, t in p.tensors().items():
                yield f"up{j}.{k}", t
        for j, p in enumerate(self.ikt, 1):
            for k, t in p.tensors().items():
                yield f"ikt{j}.{k}", t
        for j, p in enumerate(self.se, 1):
            for k, t in p.tensors().items():
                yield f"se{j}.{k}", t
        for k, t in self.head.tensors().items():
            yield f"head.{k}", t

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise FormatError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, arr in state.items():
            if arr.shape != params[name].shape:
                raise FormatError(f"{name}: shape {arr.shape} != expected {params[name].shape}")
        for name, arr in state.items():
            params[name].data = np.array(arr, dtype=params[name].dtype)

    def astype(self, dtype) -> "MCGKTModel":
        out = MCGKTModel(self.config, dtype=dtype)
        out.load_state_dict(self.state_dict())
        return out

    @property
    def dtype(self):
        return self.head.weight.dtype

    # -- computation ------------------------------------------------------

    def check_input(self, rainy: Tensor):
        cfg = self.config
        if rainy.ndim != 4 or rainy.shape[1] != cfg.input_channels:
            raise ShapeError(f"expected [N,{cfg.input_channels},H,W] input, got {rainy.shape}")
        h, w = rainy.shape[2:]
        m = cfg.size_multiple
        if h % m or w % m or h == 0 or w == 0:
            raise ShapeError(f"input size {h}x{w} must be a positive multiple of {m}")

    def features(self, rainy: Tensor) -> dict:
        """Forward pass returning every intermediate level tensor by name."""
        cfg = self.config
        self.check_input(rainy)
        feats = {}
        x = rainy
        enc_out = []
        for j, blk in enumerate(self.encoder, 1):
            if j > 1:
                x = down_transition(x)
            x = conv_block(x, blk)
            enc_out.append(x)
            feats[f"E_o{j}"] = x

        L = cfg.levels
        d = None
        for j in range(L, 0, -1):
            if j == L:
                fused = enc_out[-1]
            else:
                d_in = up_transition(d, self.up[j - 1])
                feats[f"D_i{j}"] = d_in
                e = enc_out[j - 1]
                if cfg.enable_ikt:
                    fused = ikt_fuse(e, d_in, self.ikt[j - 1])
                elif cfg.skip_fusion == "sum":
                    fused = T.add(e, d_in)
                else:
                    fused = T.concat_channels(d_in, e)
            feats[f"Dhat{j}"] = fused
            gated = se_gate(fused, self.se[j - 1]) if cfg.enable_mlcg else fused
            d = conv_block(gated, self.decoder[j - 1])
            feats[f"D_o{j}"] = d

        out = T.conv2d(d, self.head.weight, self.head.bias)
        if cfg.output_mode == "residual":
            out = T.add(out, rainy)
        feats["output"] = out
        return feats

    def forward(self, rainy) -> Tensor:
        """Unclamped prediction with the same shape as ``rainy``."""
        return self.features(T.as_tensor(rainy))["output"]

    __call__ = forward

    def derain(self, rainy: np.ndarray, batch_size: int = 4) -> np.ndarray:
        """Inference on ``[N,3,H,W]`` or ``[3,H,W]`` arrays; output clamped to [0, 1]."""
        single = rainy.ndim == 3
        x = rainy[None] if single else rainy
        outs = []
        with T.no_grad():
            for i in range(0, x.shape[0], batch_size):
                batch = Tensor(np.asarray(x[i:i + batch_size], dtype=self.dtype))
                outs.append(np.clip(self.forward(batch).data, 0.0, 1.0))
        out = np.concatenate(outs, axis=0)
        return out[0] if single else out


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> MCGKTModel:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, seeded."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_model needs a ModelConfig")
    model = MCGKTModel(config, dtype=dtype)
    rng = np.random.default_rng(seed)
    for name, t in model.named_parameters():
        if t.ndim >= 2:
            fan_in = int(np.prod(t.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            t.data = rng.uniform(-bound, bound, size=t.shape).astype(dtype)
        else:
            t.data = np.zeros(t.shape, dtype=dtype)
    return model


# ---------------------------------------------------------------- EKT import

# Converter contract: archives name VGG convolutions ``stage{s}.conv{k}.weight``
# and ``stage{s}.conv{k}.bias`` (1-based). Torchvision feature indices map as below.
TORCHVISION_VGG_CONVS = {
    "vgg16": [[0, 2], [5, 7], [10, 12, 14], [17, 19, 21], [24, 26, 28]],
    "vgg19": [[0, 2], [5, 7], [10, 12, 14, 16], [19, 21, 23, 25], [28, 30, 32, 34]],
}
EKT_BLOCKS = 3
CONVS_PER_BLOCK = 3


def torchvision_vgg_names(variant: str = "vgg16") -> dict:
    """Map torchvision ``features.<i>.{weight,bias}`` keys to archive stage names."""
    try:
        stages = TORCHVISION_VGG_CONVS[variant]
    except KeyError:
        raise MappingError(f"unknown VGG variant {variant!r}") from None
    out = {}
    for s, idxs in enumerate(stages, 1):
        for k, i in enumerate(idxs, 1):
            for kind in ("weight", "bias"):
                out[f"features.{i}.{kind}"] = f"stage{s}.conv{k}.{kind}"
    return out


def default_ekt_mapping(archive: WeightArchive) -> dict:
    """Stage ``s`` conv ``k`` -> encoder block ``s`` conv ``k`` for s <= 3, k <= 3."""
    mapping = {}
    for s in range(1, EKT_BLOCKS + 1):
        for k in range(1, CONVS_PER_BLOCK + 1):
            for kind in ("weight", "bias"):
                src = f"stage{s}.conv{k}.{kind}"
                if src in archive:
                    mapping[src] = f"enc{s}.conv{k}.{kind}"
    return mapping


def import_ekt(model: MCGKTModel, archive: WeightArchive, mapping: Optional[Mapping[str, str]] = None) -> ImportReport:
    """Copy pretrained encoder convolutions from ``archive`` into ``model`` in place.

    Tensors whose shape differs from the target slot are skipped and reported,
    not raised: configurations with ``base_channels != 64`` legitimately
    mismatch VGG widths.
    """
    if mapping is None:
        mapping = default_ekt_mapping(archive)
    params = model.parameters()
    report = ImportReport()
    for src, dst in mapping.items():
        if src not in archive:
            raise MappingError(f"archive has no tensor named {src!r}")
        if dst not in params:
            raise MappingError(f"model has no parameter named {dst!r}")
    for src, dst in mapping.items():
        arr, slot = archive[src], params[dst]
        if arr.shape != slot.shape:
            report.skipped_by_shape.append((src, dst, tuple(arr.shape), tuple(slot.shape)))
            continue
        slot.data = np.array(arr, dtype=slot.dtype)
        report.copied.append((src, dst))
    targeted = {dst.rsplit(".", 1)[0] for dst in mapping.values()}
    for j in range(1, min(EKT_BLOCKS, model.config.levels) + 1):
        for k in range(1, CONVS_PER_BLOCK + 1):
            slot = f"enc{j}.conv{k}"
            if slot not in targeted:
                report.unmapped.append(slot)
    return report


# ---------------------------------------------------------------- persistence

def model_to_archive(model: MCGKTModel, extra_header: Optional[Mapping] = None) -> WeightArchive:
    header = {"format": {"kind": ARCHIVE_KIND, "version": ARCHIVE_VERSION},
              "config": model.config.to_dict()}
    header.update(extra_header or {})
    return WeightArchive(model.state_dict(), header)


def model_from_archive(archive: WeightArchive) -> MCGKTModel:
    fmt = archive.header.get("format")
    if not isinstance(fmt, dict) or fmt.get("kind") != ARCHIVE_KIND:
        raise FormatError("archive is not a saved model (missing format header)")
    if fmt.get("version") != ARCHIVE_VERSION:
        raise FormatError(f"unsupported model archive version {fmt.get('version')!r}")
    try:
        config = ModelConfig.from_dict(archive.header["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"bad model config in archive header: {exc}") from None
    model = MCGKTModel(config)
    state = {name: archive[name] for name in archive.names() if not name.startswith("adam.")}
    model.load_state_dict(state)
    return model


def save_model(model: MCGKTModel, path, extra_header: Optional[Mapping] = None) -> Path:
    return model_to_archive(model, extra_header).save(path)


def load_model(path) -> MCGKTModel:
    return model_from_archive(WeightArchive.load(path))


def describe(config: ModelConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
