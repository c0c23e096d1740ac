"""Embedding + stacked LSTM + tied projection language model."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from typing import BinaryIO

import numpy as np

from . import tensor as T
from .masks import DropScheme, MaskError, MaskSet, SitePlan, make_rng
from .tensor import Tensor

Carry = list[tuple[Tensor, Tensor]]

CHECKPOINT_MAGIC = b"FDLM"
CHECKPOINT_VERSION = 1
INIT_STREAM = 0x1A17


class CheckpointError(ValueError):
    pass


@dataclass
class LmConfig:
    vocab_size: int = 50
    embed_dim: int = 32
    hidden_dim: int = 32
    num_layers: int = 1
    tie_embeddings: bool = True
    dropout_embedding: float = 0.1  # whole vocabulary rows ("word dropout")
    dropout_input: float = 0.65
    dropout_hidden: float = 0.25  # between stacked layers
    dropout_output: float = 0.4
    dropout_weight: float = 0.5  # hidden-to-hidden DropConnect
    granularity: str = "per_sequence"  # activation sites: per_sequence | per_step

    def __post_init__(self):
        if self.vocab_size < 1 or self.embed_dim < 1 or self.hidden_dim < 1 or self.num_layers < 1:
            raise ValueError("model dimensions must be positive")
        if self.granularity not in ("per_sequence", "per_step"):
            raise ValueError(f"activation granularity must be per_sequence or per_step, got {self.granularity!r}")
        if self.tie_embeddings and self.num_layers == 1 and self.hidden_dim != self.embed_dim:
            raise ValueError("a tied single-layer model needs hidden_dim == embed_dim")
        for name in ("dropout_embedding", "dropout_input", "dropout_hidden", "dropout_output", "dropout_weight"):
            DropScheme(getattr(self, name))

    def layer_sizes(self) -> list[tuple[int, int]]:
        """(input_dim, hidden_dim) per layer; the last layer feeds the projection."""
        sizes = []
        for layer in range(self.num_layers):
            d_in = self.embed_dim if layer == 0 else self.hidden_dim
            last = layer == self.num_layers - 1
            d_out = self.embed_dim if (last and self.tie_embeddings) else self.hidden_dim
            sizes.append((d_in, d_out))
        return sizes

    @property
    def output_dim(self) -> int:
        return self.layer_sizes()[-1][1]

    def mask_plan(self, batch_size: int) -> dict[tuple[str, int], SitePlan]:
        """Stochastic sites with a nonzero rate, keyed by (site, layer)."""
        act = self.granularity
        plan: dict[tuple[str, int], SitePlan] = {}
        if self.dropout_embedding > 0:
            plan[("embedding", 0)] = SitePlan(DropScheme(self.dropout_embedding, "embedding_row"), (self.vocab_size,))
        if self.dropout_input > 0:
            plan[("input", 0)] = SitePlan(DropScheme(self.dropout_input, act), (batch_size, self.embed_dim))
        sizes = self.layer_sizes()
        for layer, (_, h) in enumerate(sizes):
            if self.dropout_weight > 0:
                plan[("weight", layer)] = SitePlan(DropScheme(self.dropout_weight, "weight_matrix"), (h, 4 * h))
            last = layer == len(sizes) - 1
            rate = self.dropout_output if last else self.dropout_hidden
            if rate > 0:
                plan[("output" if last else "hidden", layer)] = SitePlan(DropScheme(rate, act), (batch_size, h))
        return plan

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LstmParams:
    w_ih: Tensor
    w_hh: Tensor
    bias: Tensor


class LmModel:
    """Parameter container.  Every forward pass, including both siamese
    copies, reads the same Tensor objects."""

    def __init__(self, config: LmConfig, seed: int = 0, init: bool = True):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = make_rng((INIT_STREAM, seed))
        V, E = config.vocab_size, config.embed_dim

        def param(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

        param("embedding", rng.uniform(-0.1, 0.1, (V, E)) if init else np.zeros((V, E)))
        for layer, (d_in, h) in enumerate(config.layer_sizes()):
            bound = 1.0 / np.sqrt(h)
            for name, shape in (("w_ih", (d_in, 4 * h)), ("w_hh", (h, 4 * h)), ("bias", (4 * h,))):
                param(f"lstm{layer}.{name}", rng.uniform(-bound, bound, shape) if init else np.zeros(shape))
        if not config.tie_embeddings:
            param("decoder.weight", rng.uniform(-0.1, 0.1, (config.output_dim, V)) if init else np.zeros((config.output_dim, V)))
        param("decoder.bias", np.zeros(V))

    def layer(self, index: int) -> LstmParams:
        p = self.params
        return LstmParams(p[f"lstm{index}.w_ih"], p[f"lstm{index}.w_hh"], p[f"lstm{index}.bias"])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {v.shape}")
            v.data = arr.copy()

    def init_carry(self, batch_size: int) -> Carry:
        return [(T.constant(np.zeros((batch_size, h))), T.constant(np.zeros((batch_size, h))))
                for _, h in self.config.layer_sizes()]


@dataclass
class StepOutput:
    logits: Tensor  # pre-softmax prediction, (B, m)
    hidden: list[Tensor]  # raw LSTM output per layer, (B, d)
    dropped: Tensor  # final-layer output after its dropout mask


def _cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    n = h.shape[1]
    gates = T.add_bias(T.add(T.matmul(x, w_ih), T.matmul(h, w_hh)), bias)
    i = T.sigmoid(T.cols(gates, 0, n))
    f = T.sigmoid(T.cols(gates, n, 2 * n))
    g = T.tanh(T.cols(gates, 2 * n, 3 * n))
    o = T.sigmoid(T.cols(gates, 3 * n, 4 * n))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


def lstm_step(x: Tensor, state: tuple[Tensor, Tensor], params: LstmParams,
              masks: MaskSet | None = None, layer: int = 0) -> tuple[Tensor, Tensor]:
    """One LSTM step; gate order is input, forget, cell, output.

    When ``masks`` carries a weight mask for ``layer`` it multiplies the
    hidden-to-hidden matrix before use.  The returned ``h`` is the raw
    recurrent state; output-site dropout is applied by :func:`forward`.
    """
    w_hh = params.w_hh
    if masks is not None and ("weight", layer) in masks:
        w_hh = T.mul(w_hh, masks.at("weight", layer, 0))
    h, c = state
    return _cell(x, h, c, params.w_ih, w_hh, params.bias)


def _check_masks(model: LmModel, masks: MaskSet, batch_size: int) -> None:
    for key in model.config.mask_plan(batch_size):
        if key not in masks:
            raise MaskError(f"mask set has no entry for configured site {key[0]!r} layer {key[1]}")


def forward(model: LmModel, inputs, masks: MaskSet | None = None,
            carry: Carry | None = None) -> tuple[list[StepOutput], Carry]:
    """Run a ``(T, B)`` window of token ids through the model.

    ``masks=None`` is the mask-free (expected-mask) pass.  The returned
    carry is detached, so gradients stop at the window boundary.
    """
    ids = np.asarray(inputs, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[:, None]
    steps, batch = ids.shape
    cfg = model.config
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError("token id out of range")
    if masks is not None:
        _check_masks(model, masks, batch)
    if carry is None:
        carry = model.init_carry(batch)
    layers = [model.layer(i) for i in range(cfg.num_layers)]
    w_hh = []
    for i, lp in enumerate(layers):
        if masks is not None and ("weight", i) in masks:
            w_hh.append(T.mul(lp.w_hh, masks.at("weight", i, 0)))
        else:
            w_hh.append(lp.w_hh)
    emb = model.params["embedding"]
    dec_w = T.transpose(emb) if cfg.tie_embeddings else model.params["decoder.weight"]
    dec_b = model.params["decoder.bias"]
    row_scale = None
    if masks is not None and ("embedding", 0) in masks:
        row_scale = masks.at("embedding", 0, 0).data

    state = list(carry)
    outputs = []
    last = cfg.num_layers - 1
    for t in range(steps):
        x = T.embedding(emb, ids[t])
        if row_scale is not None:
            x = T.mul(x, T.constant(np.broadcast_to(row_scale[ids[t]][:, None], x.shape)))
        if masks is not None and ("input", 0) in masks:
            x = T.mul(x, masks.at("input", 0, t))
        hidden = []
        for i, lp in enumerate(layers):
            h, c = _cell(x, state[i][0], state[i][1], lp.w_ih, w_hh[i], lp.bias)
            state[i] = (h, c)
            hidden.append(h)
            site = "output" if i == last else "hidden"
            if masks is not None and (site, i) in masks:
                x = T.mul(h, masks.at(site, i, t))
            else:
                x = h
        logits = T.add_bias(T.matmul(x, dec_w), dec_b)
        outputs.append(StepOutput(logits=logits, hidden=hidden, dropped=x))
    new_carry = [(T.detach(h), T.detach(c)) for h, c in state]
    return outputs, new_carry


def detach_carry(carry: Carry) -> Carry:
    return [(T.detach(h), T.detach(c)) for h, c in carry]


# --- checkpoint file ------------------------------------------------------
#
# little-endian layout:
#   magic "FDLM" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 count
#   count x ( u32 name_len | name | u32 rank | u64 dims[rank] | f64 data )


def save_checkpoint(path, model: LmModel, meta: dict | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> None:
    arrays = model.state_arrays() if arrays is None else arrays
    header = {"lm": asdict(model.config), **(meta or {})}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def _read(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint is truncated")
    return b


def load_checkpoint(path) -> tuple[LmModel, dict]:
    try:
        with open(path, "rb") as fh:
            if _read(fh, 4) != CHECKPOINT_MAGIC:
                raise CheckpointError("not a checkpoint file (bad magic)")
            version, meta_len = struct.unpack("<II", _read(fh, 8))
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            meta = json.loads(_read(fh, meta_len).decode("utf-8"))
            (count,) = struct.unpack("<I", _read(fh, 4))
            arrays = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<I", _read(fh, 4))
                name = _read(fh, nlen).decode("utf-8")
                (rank,) = struct.unpack("<I", _read(fh, 4))
                dims = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank))
                n = int(np.prod(dims)) if rank else 1
                arrays[name] = np.frombuffer(_read(fh, 8 * n), dtype="<f8").reshape(dims).astype(np.float64)
            if fh.read(1):
                raise CheckpointError("trailing bytes after checkpoint payload")
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error) as exc:
        raise CheckpointError(f"corrupted checkpoint: {exc}") from exc
    try:
        config = LmConfig.from_dict(meta.pop("lm"))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from exc
    model = LmModel(config, init=False)
    if set(arrays) != set(model.params):
        raise CheckpointError("checkpoint parameter names do not match the config")
    model.load_arrays(arrays)
    return model, meta
