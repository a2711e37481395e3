"""Model assembly and checkpoint serialization.

The network is a stack of conv blocks (conv 3x3 -> batch norm -> ReLU ->
max pool 2x2) followed by flatten, a hidden fully-connected layer with
ReLU and dropout, and a linear classifier head producing logits.

Checkpoints are a little-endian binary format:

    magic b"BCDN" | u32 version | u32 blob_len | UTF-8 JSON blob
    | tensor records | u32 CRC32

where each record is u16 name_len | name | u8 rank | u32 dims... |
float32 row-major data, and the CRC32 covers every byte before it.
The JSON blob holds the model config, the build seed, and optionally the
optimizer scalars, serialized canonically (sorted keys, no spaces) so
identical state always produces identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadConfig,
    BadMagic,
    ChecksumMismatch,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)
from .nn import BatchNorm2d, Conv2d, Dropout, Flatten, Linear, MaxPool2d, ReLU

MAGIC = b"BCDN"
VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults give the full-size network."""

    in_channels: int = 3
    input_hw: int = 224
    blocks: list = field(default_factory=lambda: [32, 64, 128, 256, 256])
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    pool_window: int = 2
    pool_stride: int = 2
    fc_hidden: int = 512
    dropout_rate: float = 0.5
    num_classes: int = 2

    def validate(self):
        if self.in_channels < 1:
            raise BadConfig(f"in_channels must be >= 1, got {self.in_channels}")
        if self.input_hw < 1:
            raise BadConfig(f"input_hw must be >= 1, got {self.input_hw}")
        if not self.blocks or any(c < 1 for c in self.blocks):
            raise BadConfig(f"blocks must be a non-empty list of positive "
                            f"channel counts, got {self.blocks}")
        if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
            raise BadConfig("kernel_size/stride must be >= 1 and padding >= 0")
        if self.pool_window < 1 or self.pool_stride < 1:
            raise BadConfig("pool_window and pool_stride must be >= 1")
        if self.fc_hidden < 1:
            raise BadConfig(f"fc_hidden must be >= 1, got {self.fc_hidden}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise BadConfig(f"dropout_rate must be in [0, 1), got "
                            f"{self.dropout_rate}")
        if self.num_classes < 2:
            raise BadConfig(f"num_classes must be >= 2, got {self.num_classes}")
        hw = self.input_hw
        for i, _ in enumerate(self.blocks):
            hw = (hw + 2 * self.padding - self.kernel_size) // self.stride + 1
            if hw < self.pool_window:
                raise BadConfig(f"input collapses below the pool window at "
                                f"block {i + 1}")
            hw = (hw - self.pool_window) // self.pool_stride + 1
        if hw < 1:
            raise BadConfig("input collapses to zero spatial extent")
        return self

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "input_hw": self.input_hw,
            "blocks": list(self.blocks),
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "pool_window": self.pool_window,
            "pool_stride": self.pool_stride,
            "fc_hidden": self.fc_hidden,
            "dropout_rate": self.dropout_rate,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise BadConfig(f"unknown model config keys: {sorted(extra)}")
        return cls(**known).validate()


def micro_config():
    """Desk-scale preset: two blocks on 64x64 inputs, small FC head."""
    return ModelConfig(input_hw=64, blocks=[8, 16], fc_hidden=64,
                       dropout_rate=0.25)


class Model:
    """The conv-block classifier. Construction is deterministic in the seed."""

    def __init__(self, config, seed=0, dtype="single"):
        config.validate()
        self.config = config
        self.seed = seed
        self.dtype = dtype
        ss = np.random.SeedSequence(seed)
        init_ss, drop_ss = ss.spawn(2)
        rng = np.random.default_rng(init_ss)

        self.blocks = []
        in_ch = config.in_channels
        hw = config.input_hw
        for i, out_ch in enumerate(config.blocks):
            conv = Conv2d(in_ch, out_ch, config.kernel_size, config.stride,
                          config.padding, dtype=dtype, rng=rng,
                          name=f"block{i + 1}.conv")
            bn = BatchNorm2d(out_ch, dtype=dtype, name=f"block{i + 1}.bn")
            pool = MaxPool2d(config.pool_window, config.pool_stride)
            self.blocks.append((conv, bn, ReLU(), pool))
            hw = conv.out_hw(hw, hw)[0]
            hw = pool.out_hw(hw, hw)[0]
            in_ch = out_ch
        self.feature_hw = hw
        self.flat_features = in_ch * hw * hw
        self.flatten = Flatten()
        self.fc1 = Linear(self.flat_features, config.fc_hidden, dtype=dtype,
                          rng=rng, name="fc1")
        self.relu_fc = ReLU()
        self.dropout = Dropout(config.dropout_rate, seed=drop_ss)
        self.fc2 = Linear(config.fc_hidden, config.num_classes, dtype=dtype,
                          rng=rng, name="fc2")
        self.training = True

    def layers(self):
        out = []
        for conv, bn, relu, pool in self.blocks:
            out.extend([conv, bn, relu, pool])
        out.extend([self.flatten, self.fc1, self.relu_fc, self.dropout,
                    self.fc2])
        return out

    def train(self):
        self.training = True
        for layer in self.layers():
            layer.train()
        return self

    def eval(self):
        self.training = False
        for layer in self.layers():
            layer.eval()
        return self

    def parameters(self):
        params = []
        for layer in self.layers():
            params.extend(layer.parameters())
        return params

    def named_buffers(self):
        out = []
        for layer in self.layers():
            for suffix, tensor in layer.buffers():
                out.append((f"{_bn_prefix(layer)}.{suffix}", tensor))
        return out

    def forward(self, x, tape=None):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels \
                or x.shape[2] != self.config.input_hw \
                or x.shape[3] != self.config.input_hw:
            raise ShapeMismatch(
                f"model expects [N, {self.config.in_channels}, "
                f"{self.config.input_hw}, {self.config.input_hw}], "
                f"got {x.shape}")
        h = x
        for conv, bn, relu, pool in self.blocks:
            h = conv.forward(tape, h)
            h = bn.forward(tape, h)
            h = relu.forward(tape, h)
            h = pool.forward(tape, h)
        h = self.flatten.forward(tape, h)
        h = self.fc1.forward(tape, h)
        h = self.relu_fc.forward(tape, h)
        h = self.dropout.forward(tape, h)
        return self.fc2.forward(tape, h)

    def param_count(self):
        return sum(p.value.size for p in self.parameters())

    def describe(self):
        """Shape trace through the network plus the parameter total."""
        cfg = self.config
        lines = []
        hw = cfg.input_hw
        ch = cfg.in_channels
        lines.append(f"input            [N, {ch}, {hw}, {hw}]")
        for i, (conv, bn, relu, pool) in enumerate(self.blocks):
            hw = conv.out_hw(hw, hw)[0]
            ch = conv.out_channels
            n_p = sum(p.value.size for p in conv.parameters())
            lines.append(f"block{i + 1}.conv     [N, {ch}, {hw}, {hw}]"
                         f"  params={n_p}")
            n_b = sum(p.value.size for p in bn.parameters())
            lines.append(f"block{i + 1}.bn       [N, {ch}, {hw}, {hw}]"
                         f"  params={n_b}")
            lines.append(f"block{i + 1}.relu     [N, {ch}, {hw}, {hw}]")
            hw = pool.out_hw(hw, hw)[0]
            lines.append(f"block{i + 1}.pool     [N, {ch}, {hw}, {hw}]")
        lines.append(f"flatten          [N, {self.flat_features}]")
        n_p = sum(p.value.size for p in self.fc1.parameters())
        lines.append(f"fc1              [N, {cfg.fc_hidden}]  params={n_p}")
        lines.append(f"relu             [N, {cfg.fc_hidden}]")
        lines.append(f"dropout(p={cfg.dropout_rate})")
        n_p = sum(p.value.size for p in self.fc2.parameters())
        lines.append(f"fc2              [N, {cfg.num_classes}]  params={n_p}")
        lines.append(f"trainable parameters: {self.param_count()}")
        return "\n".join(lines)


def _bn_prefix(layer):
    # buffer names reuse the prefix baked into the gamma parameter name
    return layer.gamma.name.rsplit(".", 1)[0]


def build_model(config=None, seed=0, dtype="single"):
    return Model(config or ModelConfig(), seed=seed, dtype=dtype)


def _named_tensors(model):
    """All checkpoint records in a stable order: parameters, then buffers."""
    out = [(p.name, p.value) for p in model.parameters()]
    out.extend(model.named_buffers())
    return out


def save_checkpoint(path, model, optimizer_state=None):
    blob_obj = {"model": model.config.to_dict(), "seed": int(model.seed)}
    if optimizer_state is not None:
        blob_obj["optimizer"] = optimizer_state
    blob = json.dumps(blob_obj, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(blob)), blob]
    for name, tensor in _named_tensors(model):
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", tensor.ndim))
        for dim in tensor.shape:
            parts.append(struct.pack("<I", dim))
        parts.append(np.ascontiguousarray(
            tensor.data, dtype=np.float32).tobytes())
    body = b"".join(parts)
    payload = body + struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as fh:
        fh.write(payload)
    return len(payload)


def read_checkpoint(path):
    """Parse a checkpoint; returns (blob_dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is too short for a "
                            f"checkpoint")
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    pos = 8
    (blob_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    end = len(raw) - 4
    if pos + blob_len > end:
        raise TruncatedFile(f"{path}: config blob runs past end of file")
    try:
        blob = json.loads(raw[pos:pos + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadConfig(f"{path}: config blob is not valid JSON: {exc}")
    pos += blob_len
    tensors = {}
    while pos < end:
        if pos + 2 > end:
            raise TruncatedFile(f"{path}: record header runs past end")
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + name_len + 1 > end:
            raise TruncatedFile(f"{path}: record name runs past end")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = raw[pos]
        pos += 1
        if pos + 4 * rank > end:
            raise TruncatedFile(f"{path}: record dims run past end")
        dims = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        count = 1
        for dim in dims:
            count *= dim
        if pos + 4 * count > end:
            raise TruncatedFile(f"{path}: record data runs past end")
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
        tensors[name] = data.reshape(dims).copy()
        pos += 4 * count
    return blob, tensors


def load_checkpoint(path, model):
    """Restore tensors into an existing model; configs must match exactly.

    Returns the blob dict (config, seed, optimizer scalars if present).
    """
    blob, tensors = read_checkpoint(path)
    if blob.get("model") != model.config.to_dict():
        raise BadConfig(f"{path}: checkpoint config does not match the model")
    expected = _named_tensors(model)
    if set(tensors) != {name for name, _ in expected}:
        missing = {name for name, _ in expected} - set(tensors)
        extra = set(tensors) - {name for name, _ in expected}
        raise BadConfig(f"{path}: tensor names do not match the model "
                        f"(missing {sorted(missing)}, extra {sorted(extra)})")
    for name, tensor in expected:
        arr = tensors[name]
        if arr.shape != tensor.shape:
            raise BadConfig(f"{path}: {name} has shape {arr.shape}, model "
                            f"expects {tensor.shape}")
        tensor.data[...] = arr.astype(tensor.data.dtype)
    return blob


def model_from_checkpoint(path, dtype="single"):
    """Build a fresh model from a checkpoint's own config and tensors."""
    blob, _ = read_checkpoint(path)
    if "model" not in blob or "seed" not in blob:
        raise BadConfig(f"{path}: config blob lacks model/seed entries")
    config = ModelConfig.from_dict(blob["model"])
    model = Model(config, seed=blob["seed"], dtype=dtype)
    load_checkpoint(path, model)
    return model, blob
