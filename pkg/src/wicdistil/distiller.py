"""Meaning and context distillers and their checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import nncore
from .nncore import ConfigurationError, EncoderConfig, ParamStore, Tensor

CKPT_MAGIC = b"DCK1"


@dataclass(frozen=True)
class DistillerConfig:
    dim: int
    num_input_layers: int  # l - k + 1
    heads: int = 8
    ffn_mult: int = 4
    dropout: float = 0.1
    seed: int = 0

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(dim=self.dim, num_heads=self.heads, ffn_mult=self.ffn_mult, dropout=self.dropout)

    @classmethod
    def for_mode(cls, mode: str, dim: int, num_input_layers: int, **kw) -> "DistillerConfig":
        kw.setdefault("ffn_mult", 6 if mode == "crosslingual" else 4)
        return cls(dim=dim, num_input_layers=num_input_layers, **kw)


@dataclass
class DistilledPair:
    meaning: Tensor
    context: Tensor


class DistillerModel:
    """Two independent encoder layers sharing a layer-position table."""

    def __init__(self, config: DistillerConfig, dtype=np.float32):
        self.config = config
        enc = config.encoder()  # validates head divisibility
        rng = np.random.default_rng(config.seed)
        self.params = ParamStore()
        nncore.init_encoder_params(self.params, "meaning", enc, rng, dtype)
        nncore.init_encoder_params(self.params, "context", enc, rng, dtype)
        self.params.add("layer_pos", (rng.normal(0.0, 0.02, size=(config.num_input_layers, config.dim))).astype(dtype))

    @property
    def dtype(self):
        return self.params["layer_pos"].data.dtype

    def encoder_params(self, which: str) -> dict[str, Tensor]:
        return self.params.group(which)

    def distil(self, top_layers, training: bool = False, rng: np.random.Generator | None = None) -> DistilledPair:
        """Encode top-layer rows (..., L, d) into meaning and context vectors (..., d)."""
        x = nncore.as_tensor(top_layers)
        cfg = self.config
        if x.shape[-2] != cfg.num_input_layers or x.shape[-1] != cfg.dim:
            raise ConfigurationError(
                f"expected input rows of shape ({cfg.num_input_layers}, {cfg.dim}), got {x.shape[-2:]}"
            )
        if x.data.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        x = nncore.add(x, self.params["layer_pos"])
        enc = cfg.encoder()
        out = []
        for which in ("meaning", "context"):
            h = nncore.transformer_encoder_layer(x, self.encoder_params(which), enc, training, rng)
            out.append(nncore.mean_pool(h))
        return DistilledPair(*out)

    def represent(self, top_layers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Inference-mode (meaning, context) as plain arrays."""
        pair = self.distil(top_layers, training=False)
        return pair.meaning.data.astype(np.float64), pair.context.data.astype(np.float64)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            if state[n].shape != t.data.shape:
                raise ConfigurationError(f"parameter {n}: shape {state[n].shape} != {t.data.shape}")
            t.data = state[n].astype(t.data.dtype).copy()


def reconstruction_target(top_layers) -> np.ndarray:
    """Column mean of the selected layers (the pooled original representation)."""
    top_layers = np.asarray(top_layers)
    if top_layers.shape[-2] < 1:
        raise ValueError("reconstruction target needs at least one layer")
    return top_layers.mean(axis=-2)


def reconstruct(meaning, context) -> Tensor:
    """Elementwise mean of a meaning and a context vector."""
    return nncore.scale(nncore.add(meaning, context), 0.5)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _checkpoint_bytes(model: DistillerModel, extra: dict | None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in model.params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.data.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"config": asdict(model.config), "params": entries, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs)


def save_checkpoint(path, model: DistillerModel, extra: dict | None = None) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, _checkpoint_bytes(model, extra))


def load_checkpoint(path) -> tuple[DistillerModel, dict]:
    data = open(path, "rb").read()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a distiller checkpoint")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    body = data[8 + hlen:]
    model = DistillerModel(DistillerConfig(**header["config"]))
    state = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + 4 * count > len(body):
            raise ValueError(f"{path}: truncated parameter {e['name']}")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    model.load_state(state)
    return model, header.get("extra", {})
