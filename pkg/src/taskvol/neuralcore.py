"""The differentiable model: conv encoder, sequence assembly, transformer,
and the two output heads, plus parameter storage, checkpointing, and a
finite-difference gradient harness.

One forward pass handles one (volume, task) pair: the volume becomes a grid
of vision tokens, the task description becomes text tokens, and the joined
sequence [CLS] tokens [SEP] text runs through bidirectional self-attention.
Row 0 of the output drives the classification head; the vision rows drive
the per-token segmentation head.  Both heads are always computed — the loss
layer decides which one trains on a given item.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import GridShapeError, NumericFault
from .maskpatch import TOKEN_AXIS_ORDER
from .taskbank import PAD_ID

ATTENTION_MASK_VALUE = -1e9


def _truncated_normal(rng, shape, std):
    vals = rng.standard_normal(shape) * std
    return np.clip(vals, -2 * std, 2 * std)


def _encoder_widths(hidden: int, stages: int) -> list[int]:
    """Channel widths per stage, doubling up to the hidden width."""
    return [max(8, hidden >> (stages - 1 - i)) for i in range(stages)]


class ParameterStore:
    """Named parameter tensors with seeded initialization."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        f_h = config.hidden
        stages = int(np.log2(config.downsample))
        widths = _encoder_widths(f_h, stages)
        c_in = 1
        for i, c_out in enumerate(widths):
            fan_in = c_in * 27
            self._add(f"encoder.stage{i}.w",
                      rng.standard_normal((c_out, c_in, 3, 3, 3))
                      * np.sqrt(2.0 / fan_in))
            self._add(f"encoder.stage{i}.b", np.zeros(c_out))
            self._add(f"encoder.stage{i}.norm_gain", np.ones(c_out))
            self._add(f"encoder.stage{i}.norm_bias", np.zeros(c_out))
            c_in = c_out
        self._add("encoder.proj.w", _truncated_normal(rng, (c_in, f_h), 0.02))
        self._add("encoder.proj.b", np.zeros(f_h))
        self._add("embed.tokens",
                  _truncated_normal(rng, (config.vocab_size, f_h), 0.02))
        self._add("embed.positions",
                  _truncated_normal(rng, (config.max_seq_len, f_h), 0.02))
        self._add("embed.cls", _truncated_normal(rng, (1, f_h), 0.02))
        self._add("embed.sep", _truncated_normal(rng, (1, f_h), 0.02))
        for i in range(config.layers):
            p = f"layer{i}."
            for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
                self._add(p + name, _truncated_normal(rng, (f_h, f_h), 0.02))
            for name in ("attn.bq", "attn.bk", "attn.bv", "attn.bo"):
                self._add(p + name, np.zeros(f_h))
            self._add(p + "norm1.gain", np.ones(f_h))
            self._add(p + "norm1.bias", np.zeros(f_h))
            self._add(p + "norm2.gain", np.ones(f_h))
            self._add(p + "norm2.bias", np.zeros(f_h))
            self._add(p + "mlp.w1", _truncated_normal(rng, (f_h, 4 * f_h), 0.02))
            self._add(p + "mlp.b1", np.zeros(4 * f_h))
            self._add(p + "mlp.w2", _truncated_normal(rng, (4 * f_h, f_h), 0.02))
            self._add(p + "mlp.b2", np.zeros(f_h))
        self._add("final_norm.gain", np.ones(f_h))
        self._add("final_norm.bias", np.zeros(f_h))
        self._add("head.cls.w", _truncated_normal(rng, (f_h, 1), 0.02))
        self._add("head.cls.b", np.zeros(1))
        u3 = config.intermediate ** 3
        self._add("head.seg.w", _truncated_normal(rng, (f_h, u3), 0.02))
        self._add("head.seg.b", np.zeros(u3))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = Tensor(np.asarray(value, dtype=self.dtype),
                                    requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self):
        return self.tensors.keys()

    @property
    def total_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(state)
        extra = set(state) - set(self.tensors)
        if missing or extra:
            raise GridShapeError(
                f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, value in state.items():
            target = self.tensors[name]
            value = np.asarray(value, dtype=self.dtype)
            if value.shape != target.data.shape:
                raise GridShapeError(
                    f"{name}: shape {value.shape} != {target.data.shape}")
            target.data = value


def inflate_2d_to_3d(weights2d: np.ndarray, k_d: int) -> np.ndarray:
    """Replicate (c_out, c_in, k, k) filters k_d times along a new depth
    axis, without rescaling."""
    weights2d = np.asarray(weights2d)
    if weights2d.ndim != 4:
        raise GridShapeError(
            f"expected (c_out, c_in, k, k) filters, got {weights2d.shape}")
    if k_d < 1:
        raise GridShapeError(f"depth {k_d} must be >= 1")
    return np.repeat(weights2d[:, :, None, :, :], k_d, axis=2)


def _check_finite(value: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericFault(f"non-finite activations in {where}")


class TaskModel:
    """Forward computation over a ParameterStore."""

    def __init__(self, config: ModelConfig, dtype=np.float32,
                 params: ParameterStore | None = None):
        self.config = config
        self.params = params if params is not None else ParameterStore(config, dtype)
        self.dtype = self.params.dtype

    # -- encoder -------------------------------------------------------------

    def vision_encode(self, volume: np.ndarray) -> Tensor:
        """Map an input volume to (token_count, hidden) vision embeddings."""
        cfg = self.config
        volume = np.asarray(volume)
        if volume.shape != tuple(cfg.input_shape):
            raise GridShapeError(
                f"input shape {volume.shape} != configured {tuple(cfg.input_shape)}")
        x = Tensor(volume.astype(self.dtype, copy=False).reshape(
            (1,) + tuple(cfg.input_shape)))
        stages = int(np.log2(cfg.downsample))
        for i in range(stages):
            p = self.params
            x = ad.conv3d(x, p[f"encoder.stage{i}.w"], p[f"encoder.stage{i}.b"],
                          stride=2, pad=1)
            c = x.shape[0]
            flat = x.reshape(c, -1).transpose(1, 0)
            flat = ad.layer_norm(flat, p[f"encoder.stage{i}.norm_gain"],
                                 p[f"encoder.stage{i}.norm_bias"])
            x = flat.transpose(1, 0).reshape(*x.shape).gelu()
            _check_finite(x.data, f"encoder stage {i}")
        gx, gy, gz = self.config.token_grid
        # flatten the feature grid in the canonical token order shared with
        # the mask patch layout (TOKEN_AXIS_ORDER: z slowest, x fastest)
        grid = x.transpose(1, 2, 3, 0).transpose(*TOKEN_AXIS_ORDER, 3)
        rows = grid.reshape(gx * gy * gz, x.shape[0])
        e_v = rows @ self.params["encoder.proj.w"] + self.params["encoder.proj.b"]
        _check_finite(e_v.data, "encoder projection")
        return e_v

    # -- sequence ------------------------------------------------------------

    def assemble_sequence(self, e_v: Tensor, token_ids) -> tuple[Tensor, np.ndarray]:
        """Build Z = [CLS] + vision rows + [SEP] + text rows, add positional
        embeddings, and return it with the additive attention mask."""
        cfg = self.config
        ids = np.asarray(list(token_ids)[:cfg.max_text_len], dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise GridShapeError("token id outside vocabulary")
        p = self.params
        parts = [p["embed.cls"], e_v, p["embed.sep"]]
        if ids.size:
            parts.append(ad.embedding(p["embed.tokens"], ids))
        z = ad.concat(parts, axis=0)
        length = z.shape[0]
        z = z + p["embed.positions"][:length]
        mask = np.zeros(length, dtype=self.dtype)
        text_start = 2 + cfg.token_count
        mask[text_start:][ids == PAD_ID] = ATTENTION_MASK_VALUE
        return z, mask

    def _transformer_layer(self, x: Tensor, mask: np.ndarray, idx: int) -> Tensor:
        p = self.params
        cfg = self.config
        heads = cfg.heads
        f_h = cfg.hidden
        dk = f_h // heads
        length = x.shape[0]
        pre = f"layer{idx}."
        h = ad.layer_norm(x, p[pre + "norm1.gain"], p[pre + "norm1.bias"])
        q = (h @ p[pre + "attn.wq"] + p[pre + "attn.bq"]) \
            .reshape(length, heads, dk).transpose(1, 0, 2)
        k = (h @ p[pre + "attn.wk"] + p[pre + "attn.bk"]) \
            .reshape(length, heads, dk).transpose(1, 0, 2)
        v = (h @ p[pre + "attn.wv"] + p[pre + "attn.bv"]) \
            .reshape(length, heads, dk).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dk))
        scores = scores + mask[None, None, :]
        att = ad.softmax(scores, axis=-1)
        mixed = (att @ v).transpose(1, 0, 2).reshape(length, f_h)
        x = x + (mixed @ p[pre + "attn.wo"] + p[pre + "attn.bo"])
        h = ad.layer_norm(x, p[pre + "norm2.gain"], p[pre + "norm2.bias"])
        h = (h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]).gelu()
        x = x + (h @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"])
        _check_finite(x.data, f"transformer layer {idx}")
        return x

    def forward(self, volume: np.ndarray, token_ids) -> tuple[Tensor, Tensor]:
        """Run the full model; returns (cls_logit, seg_logits)."""
        e_v = self.vision_encode(volume)
        z, mask = self.assemble_sequence(e_v, token_ids)
        x = z
        for i in range(self.config.layers):
            x = self._transformer_layer(x, mask, i)
        x = ad.layer_norm(x, self.params["final_norm.gain"],
                          self.params["final_norm.bias"])
        r = self.config.token_count
        cls_logit = (x[0] @ self.params["head.cls.w"]
                     + self.params["head.cls.b"]).reshape(())
        seg_logits = x[1:1 + r] @ self.params["head.seg.w"] \
            + self.params["head.seg.b"]
        _check_finite(cls_logit.data, "classification head")
        _check_finite(seg_logits.data, "segmentation head")
        return cls_logit, seg_logits


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params: dict[str, Tensor], epsilon: float = 1e-4,
               sample: int = 8, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    loss_fn must rebuild the forward pass from current parameter values and
    return a scalar Tensor.  For each parameter, up to ``sample`` coordinates
    are probed.  Returns the maximum relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
    """
    rng = np.random.default_rng(seed)
    for t in params.values():
        t.grad = None
    loss_fn().backward()
    analytic = {}
    for name, t in params.items():
        analytic[name] = (np.zeros_like(t.data) if t.grad is None
                          else t.grad.copy())
    worst = 0.0
    for name, t in params.items():
        size = t.data.size
        picks = (np.arange(size) if size <= sample
                 else rng.choice(size, size=sample, replace=False))
        flat = t.data.reshape(-1)
        for j in picks:
            original = flat[j]
            flat[j] = original + epsilon
            up = float(loss_fn().data)
            flat[j] = original - epsilon
            down = float(loss_fn().data)
            flat[j] = original
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic[name].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, store: ParameterStore, step: int,
                    val_metric: float | None = None,
                    config_dict: dict | None = None) -> None:
    """Single-file format: uint32 header length, JSON header, then the
    concatenated little-endian float32 tensor payload."""
    entries = []
    offset = 0
    blobs = []
    for name in sorted(store.names()):
        data = np.ascontiguousarray(store[name].data, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape),
                        "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {"tensors": entries, "step": int(step),
              "val_metric": None if val_metric is None else float(val_metric),
              "config": config_dict or {}}
    header_bytes = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(4)
        if len(raw) < 4:
            raise GridShapeError(f"{path}: truncated checkpoint")
        (header_len,) = struct.unpack("<I", raw)
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        chunk = payload[start:start + 4 * count]
        if len(chunk) < 4 * count:
            raise GridShapeError(f"{path}: truncated tensor {entry['name']}")
        state[entry["name"]] = np.frombuffer(chunk, dtype="<f4") \
            .reshape(shape).copy()
    return state, header
