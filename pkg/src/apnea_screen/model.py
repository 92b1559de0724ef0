"""Residual CNN for 128 x 128 single-channel spectrograms.

Stem: conv 3x3/2 (32) -> BN -> ReLU -> maxpool 2x2. Four stages of residual
blocks (Conv-BN-ReLU-Conv-BN, add shortcut, ReLU); the first block of every
stage after the first downsamples with a stride-2 conv and a 1x1 stride-2
projection shortcut. Head: global average pooling -> dense 256 + ReLU ->
dropout -> dense 1 -> sigmoid.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor


class ModelConfigError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


WEIGHT_MAGIC = b"APNW"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class ResNetConfig:
    stem_filters: int = 32
    stage_filters: tuple[int, ...] = (32, 64, 128, 256)
    stage_blocks: tuple[int, ...] = (2, 2, 3, 3)
    head_units: int = 256
    dropout_rate: float = 0.5
    input_shape: tuple[int, int, int] = (128, 128, 1)

    def __post_init__(self):
        object.__setattr__(self, "stage_filters", tuple(int(v) for v in self.stage_filters))
        object.__setattr__(self, "stage_blocks", tuple(int(v) for v in self.stage_blocks))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.stage_filters) != len(self.stage_blocks):
            raise ModelConfigError("stage_filters and stage_blocks must have equal length")
        if not self.stage_filters:
            raise ModelConfigError("at least one stage is required")
        if any(b < 1 for b in self.stage_blocks) or any(f < 1 for f in self.stage_filters):
            raise ModelConfigError("stage sizes must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ModelConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ModelConfigError(f"input_shape must be (H, W, C), got {self.input_shape}")


@dataclass
class _Block:
    prefix: str
    in_ch: int
    out_ch: int
    stride: int

    @property
    def projected(self) -> bool:
        return self.stride != 1 or self.in_ch != self.out_ch


@dataclass
class ResNetModel:
    config: ResNetConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    bn_state: dict[str, BatchNormState] = field(default_factory=dict)
    blocks: list[_Block] = field(default_factory=list)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- construction -----------------------------------------------------

    def _add(self, name: str, values: np.ndarray):
        if name in self.params:
            raise ModelConfigError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(values, requires_grad=True, name=name)

    def _add_conv(self, name, in_ch, out_ch, k, rng, dtype):
        self._add(f"{name}.weight", ag.he_normal((out_ch, in_ch, k, k), in_ch * k * k, rng, dtype))
        self._add(f"{name}.bias", np.zeros(out_ch, dtype))

    def _add_bn(self, name, ch, dtype):
        self._add(f"{name}.gamma", np.ones(ch, dtype))
        self._add(f"{name}.beta", np.zeros(ch, dtype))
        self.bn_state[name] = BatchNormState.fresh(ch, dtype)

    def _add_dense(self, name, d_in, d_out, rng, dtype):
        self._add(f"{name}.weight", ag.he_normal((d_in, d_out), d_in, rng, dtype))
        self._add(f"{name}.bias", np.zeros(d_out, dtype))

    # -- forward ------------------------------------------------------------

    def _conv(self, name, x, stride):
        return ag.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                         stride=stride, padding="same")

    def _bn(self, name, x, training):
        return ag.batchnorm2d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                              self.bn_state[name], training, self.bn_momentum, self.bn_eps)

    def _dense(self, name, x):
        return ag.dense(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def forward(self, batch, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        """Apnea probabilities of shape (N,) for a batch of (N, 1, H, W) or (N, H, W)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        if data.ndim == 3:
            data = data[:, None]
        h, w, c = self.config.input_shape
        if data.ndim != 4 or data.shape[1:] != (c, h, w):
            raise ag.ShapeError(f"expected input (N, {c}, {h}, {w}), got {data.shape}")
        x = Tensor(data.astype(self.dtype, copy=False))

        x = self._conv("stem.conv", x, 2)
        x = ag.relu(self._bn("stem.bn", x, training))
        x = ag.maxpool2d(x)
        for blk in self.blocks:
            shortcut = self._conv(f"{blk.prefix}.proj", x, blk.stride) if blk.projected else x
            y = ag.relu(self._bn(f"{blk.prefix}.bn1", self._conv(f"{blk.prefix}.conv1", x, blk.stride), training))
            y = self._bn(f"{blk.prefix}.bn2", self._conv(f"{blk.prefix}.conv2", y, 1), training)
            x = ag.relu(ag.add(y, shortcut))
        x = ag.global_avg_pool(x)
        x = ag.relu(self._dense("head.fc", x))
        x = ag.dropout(x, self.config.dropout_rate, training, rng)
        x = self._dense("head.out", x)
        return ag.sigmoid(ag.reshape(x, (x.shape[0],)))

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode probabilities for a stack of spectrograms."""
        out = [self.forward(x[i:i + batch_size], "eval").data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=self.dtype)

    # -- introspection ------------------------------------------------------

    def shape_trace(self) -> list[tuple[str, tuple[int, ...]]]:
        """Output shape (H, W, C) of each layer group, computed without data."""
        cfg = self.config
        h, w, _ = cfg.input_shape
        h, w = ag.conv_output_size(h, 3, 2, "same"), ag.conv_output_size(w, 3, 2, "same")
        trace = [("stem.conv", (h, w, cfg.stem_filters))]
        h, w = h // 2, w // 2
        trace.append(("stem.pool", (h, w, cfg.stem_filters)))
        channels = cfg.stem_filters
        for i, blk in enumerate(self.blocks):
            h = ag.conv_output_size(h, 3, blk.stride, "same")
            w = ag.conv_output_size(w, 3, blk.stride, "same")
            channels = blk.out_ch
            trace.append((blk.prefix, (h, w, channels)))
            stage = blk.prefix.split(".")[0]
            if i + 1 == len(self.blocks) or not self.blocks[i + 1].prefix.startswith(stage + "."):
                trace.append((stage, (h, w, channels)))
        trace.append(("gap", (channels,)))
        trace.append(("head.fc", (cfg.head_units,)))
        trace.append(("head.dropout", (cfg.head_units,)))
        trace.append(("head.out", (1,)))
        return trace

    def stage_shapes(self) -> list[tuple[int, ...]]:
        return [shape for name, shape in self.shape_trace()
                if name.startswith("stage") and "." not in name]

    def count_parameters(self) -> tuple[int, dict[str, int]]:
        """Total trainable element count and the per-layer breakdown."""
        per_layer: dict[str, int] = {}
        for name, p in self.params.items():
            layer = name.rsplit(".", 1)[0]
            per_layer[layer] = per_layer.get(layer, 0) + p.size
        return sum(per_layer.values()), per_layer

    # -- state --------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters then batch-norm buffers, in registration order."""
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn_state.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        current = self.state_arrays()
        if set(arrays) != set(current):
            missing = sorted(set(current) - set(arrays))
            extra = sorted(set(arrays) - set(current))
            raise ModelConfigError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, v in arrays.items():
            if v.shape != current[k].shape:
                raise ModelConfigError(f"{k}: shape {v.shape} != {current[k].shape}")
            current[k][...] = v


def build_model(config: ResNetConfig = ResNetConfig(), rng: np.random.Generator | int = 0,
                dtype=np.float32) -> ResNetModel:
    """He-normal kernels, zero biases and betas, unit gammas; fully seed-determined."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    model = ResNetModel(config)
    in_ch = config.input_shape[2]
    model._add_conv("stem.conv", in_ch, config.stem_filters, 3, rng, dtype)
    model._add_bn("stem.bn", config.stem_filters, dtype)

    channels = config.stem_filters
    for s, (filters, n_blocks) in enumerate(zip(config.stage_filters, config.stage_blocks), start=1):
        for b in range(1, n_blocks + 1):
            stride = 2 if (s > 1 and b == 1) else 1
            blk = _Block(f"stage{s}.block{b}", channels, filters, stride)
            model._add_conv(f"{blk.prefix}.conv1", channels, filters, 3, rng, dtype)
            model._add_bn(f"{blk.prefix}.bn1", filters, dtype)
            model._add_conv(f"{blk.prefix}.conv2", filters, filters, 3, rng, dtype)
            model._add_bn(f"{blk.prefix}.bn2", filters, dtype)
            if blk.projected:
                model._add_conv(f"{blk.prefix}.proj", channels, filters, 1, rng, dtype)
            model.blocks.append(blk)
            channels = filters

    model._add_dense("head.fc", channels, config.head_units, rng, dtype)
    model._add_dense("head.out", config.head_units, 1, rng, dtype)
    return model


# --------------------------------------------------------------------------
# Weight file: b"APNW", u32 version, u32 manifest length, UTF-8 JSON manifest
# {"config": ..., "tensors": [{"name", "shape", "offset"}]}, then the float32
# little-endian payload. Offsets count bytes from the start of the payload.
# --------------------------------------------------------------------------


def save_weights(model: ResNetModel, path) -> None:
    """Write parameters and batch-norm running statistics."""
    tensors, chunks, offset = [], [], 0
    for name, arr in model.state_arrays().items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"config": asdict(model.config), "tensors": tensors}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC + struct.pack("<II", WEIGHT_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def _read_weight_file(path) -> tuple[dict, bytes]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFileError(f"{path}: cannot read weights ({exc})") from exc
    if data[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic, not a weight file")
    if len(data) < 12:
        raise WeightFileError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", data, 4)
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: unsupported weight file version {version}")
    try:
        manifest = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"{path}: corrupt manifest ({exc})") from exc
    return manifest, data[12 + n:]


def load_weights(path, model: ResNetModel | None = None) -> ResNetModel:
    """Restore weights into ``model``, or build a float32 model from the stored config."""
    manifest, payload = _read_weight_file(path)
    if model is None:
        try:
            model = build_model(ResNetConfig(**manifest["config"]), rng=0)
        except (KeyError, TypeError, ModelConfigError) as exc:
            raise WeightFileError(f"{path}: bad stored config ({exc})") from exc
    arrays = {}
    for entry in manifest.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start, end = entry["offset"], entry["offset"] + 4 * count
        if end > len(payload):
            raise WeightFileError(f"{path}: payload truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload, "<f4", count, start).reshape(shape)
    try:
        model.restore(arrays)
    except ModelConfigError as exc:
        raise WeightFileError(f"{path}: {exc}") from exc
    return model
