"""Per-timestep assembly of the captioning model and its three variants.

The decoder is an attention-wrapped LSTM: each step builds an input vector
from the previous word embedding plus (depending on the variant) a guiding
term, runs the decoder cell, attends over the region features with the new
hidden state, and projects the tanh-combined context/hidden pair into
vocabulary logits.

Variants:
  sgn   - the guiding term is the hidden state of a second LSTM that is fed
          the previous attention vector concatenated with the attributes;
  att   - the guiding term is the raw attribute vector through a projection;
  plain - no guiding term at all.

All variants share the image injection step: the attribute vector is
projected into the decoder input space and run through the cell once before
the first word, which also produces the initial attention vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .attention import AnnotationSet, AttentionParams, attend
from .data import EOS_ID, PAD_ID, SOS_ID
from .numerics import ContractError, ShapeError, Tensor
from .recurrent import (
    GATES,
    LstmDParams,
    LstmDState,
    LstmGParams,
    LstmGState,
    dropout,
    lstm_d_step,
    lstm_g_step,
    zero_lstm_d_state,
    zero_lstm_g_state,
)

VARIANTS = ("sgn", "att", "plain")


@dataclass
class ModelConfig:
    """Dimensions and switches for one model instance.

    k/d describe the region feature grid, h the decoder hidden size, d_g the
    guiding hidden size, d_w the word embedding size, d_a the attribute
    vector size, d_x the decoder input size. The guiding cell's input
    dimension is tied to d_g.
    """

    k: int
    d: int
    h: int
    d_g: int
    d_w: int
    d_a: int
    d_x: int
    vocab_size: int
    variant: str = "sgn"
    candidate_tanh: bool = False
    dropout_rate: float = 0.3
    max_decode_len: int = 16

    def validate(self) -> "ModelConfig":
        for name in ("k", "d", "h", "d_g", "d_w", "d_a", "d_x", "vocab_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"config field {name} must be >= 1")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must be in [0, 1)")
        if self.max_decode_len < 1:
            raise ContractError("max_decode_len must be >= 1")
        return self


@dataclass
class ModelParams:
    """Every trainable block of one variant; absent blocks are None."""

    embedding: Tensor           # vocab_size x d_w
    w_ax: Tensor                # d_x x d_a
    w_wx: Tensor                # d_x x d_w
    w_gx: Tensor | None         # d_x x d_g (sgn) or d_x x d_a (att)
    w_z: Tensor | None          # d_g x (h + d_a), sgn only
    w_c: Tensor                 # h x (d + h)
    w_s: Tensor                 # vocab_size x h
    attention: AttentionParams  # w_a: h x d
    lstm_d: LstmDParams
    lstm_g: LstmGParams | None  # sgn only

    def blocks(self) -> dict:
        """Named flat view over every allocated parameter tensor."""
        out = {"embedding": self.embedding, "w_ax": self.w_ax, "w_wx": self.w_wx,
               "w_c": self.w_c, "w_s": self.w_s, "w_a": self.attention.w_a}
        if self.w_gx is not None:
            out["w_gx"] = self.w_gx
        if self.w_z is not None:
            out["w_z"] = self.w_z
        for g in GATES:
            out[f"lstm_d.w_x.{g}"] = self.lstm_d.w_x[g]
            out[f"lstm_d.w_h.{g}"] = self.lstm_d.w_h[g]
            out[f"lstm_d.w_t.{g}"] = self.lstm_d.w_t[g]
            out[f"lstm_d.b.{g}"] = self.lstm_d.b[g]
        if self.lstm_g is not None:
            for g in GATES:
                out[f"lstm_g.w_x.{g}"] = self.lstm_g.w_x[g]
                out[f"lstm_g.w_h.{g}"] = self.lstm_g.w_h[g]
                out[f"lstm_g.b.{g}"] = self.lstm_g.b[g]
        return out

    def tensors(self) -> list:
        return list(self.blocks().values())

    def zero_grad(self) -> None:
        nm.zero_grad(self.tensors())


@dataclass
class StepOutput:
    logits: Tensor
    alpha: Tensor
    state: LstmDState


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Draw every parameter i.i.d. uniform in [-0.1, 0.1] from one seed."""
    config.validate()
    rng = np.random.default_rng(seed)

    def u(*shape):
        return Tensor(rng.uniform(-0.1, 0.1, size=shape))

    c = config
    embedding = u(c.vocab_size, c.d_w)
    w_ax = u(c.d_x, c.d_a)
    w_wx = u(c.d_x, c.d_w)
    w_gx = w_z = lstm_g = None
    if c.variant == "sgn":
        w_gx = u(c.d_x, c.d_g)
        w_z = u(c.d_g, c.h + c.d_a)
    elif c.variant == "att":
        w_gx = u(c.d_x, c.d_a)
    w_c = u(c.h, c.d + c.h)
    w_s = u(c.vocab_size, c.h)
    attention = AttentionParams(u(c.h, c.d))
    lstm_d = LstmDParams(
        w_x={g: u(c.h, c.d_x) for g in GATES},
        w_h={g: u(c.h, c.h) for g in GATES},
        w_t={g: u(c.h, c.h) for g in GATES},
        b={g: u(c.h) for g in GATES},
    )
    if c.variant == "sgn":
        lstm_g = LstmGParams(
            w_x={g: u(c.d_g, c.d_g) for g in GATES},
            w_h={g: u(c.d_g, c.d_g) for g in GATES},
            b={g: u(c.d_g) for g in GATES},
        )
    return ModelParams(embedding, w_ax, w_wx, w_gx, w_z, w_c, w_s,
                       attention, lstm_d, lstm_g)


def _attend_and_combine(annotations, h_used, params):
    context, alpha = attend(annotations, h_used, params.attention)
    h_tilde = nm.tanh(nm.matmul(params.w_c, nm.concat(context, h_used)))
    return h_tilde, alpha


def image_step(annotations: AnnotationSet, attrs: Tensor, params: ModelParams,
               config: ModelConfig, training: bool = False, rng=None):
    """Inject the image before the first word.

    Projects the attribute vector into the decoder input space, runs one
    decoder-cell step from the all-zero state, then computes the initial
    attention vector so the first word step has a previous one to read.
    Returns (state, h_pre): the carried state and the pre-attention hidden
    vector the guiding network consumes at its first step.
    """
    if attrs.data.shape != (config.d_a,):
        raise ShapeError(f"attrs shape {attrs.data.shape}, expected ({config.d_a},)")
    x = nm.matmul(params.w_ax, attrs)
    h, m = lstm_d_step(x, zero_lstm_d_state(config.h), params.lstm_d,
                       config.candidate_tanh)
    h_used = dropout(h, config.dropout_rate, rng) if training else h
    h_tilde, _ = _attend_and_combine(annotations, h_used, params)
    return LstmDState(h, m, h_tilde), h_used


def guider_step(t: int, prev_output: Tensor, attrs: Tensor, state: LstmGState,
                params: ModelParams, config: ModelConfig,
                training: bool = False, rng=None):
    """Advance the guiding LSTM and return (guide vector, new state).

    ``prev_output`` is the pre-attention hidden vector at t=0 and the
    previous attention vector afterwards; both are H-dimensional so one
    projection serves both branches.
    """
    if config.variant != "sgn":
        raise ContractError(f"guider_step is only defined for the sgn variant, not {config.variant}")
    if t < 0:
        raise ContractError("guider_step requires t >= 0")
    z = nm.matmul(params.w_z, nm.concat(prev_output, attrs))
    new_state = lstm_g_step(z, state, params.lstm_g)
    guide = new_state.hidden
    if training:
        guide = dropout(guide, config.dropout_rate, rng)
    return guide, new_state


def decode_step(t: int, word_id: int, guide: Tensor | None, state: LstmDState,
                annotations: AnnotationSet, params: ModelParams,
                config: ModelConfig, training: bool = False, rng=None) -> StepOutput:
    """One word step: build the input, run the cell, attend, project to logits."""
    if not 0 <= word_id < config.vocab_size:
        raise ContractError(f"word id {word_id} outside vocabulary of {config.vocab_size}")
    emb = nm.row(params.embedding, word_id)
    terms = [(params.w_wx, emb)]
    if config.variant != "plain":
        if guide is None:
            raise ContractError(f"variant {config.variant} requires a guide vector")
        terms.append((params.w_gx, guide))
    x = nm.affine(terms)
    h, m = lstm_d_step(x, state, params.lstm_d, config.candidate_tanh)
    h_used = dropout(h, config.dropout_rate, rng) if training else h
    h_tilde, alpha = _attend_and_combine(annotations, h_used, params)
    logits = nm.matmul(params.w_s, h_tilde)
    return StepOutput(logits, alpha, LstmDState(h, m, h_tilde))


def teacher_io(caption_ids: list[int], pad_to: int | None = None):
    """Teacher-forcing input/target id sequences for one caption.

    Inputs start with <sos>; targets end with <eos>; optional padding
    extends both with <pad> up to ``pad_to`` steps.
    """
    if not caption_ids:
        raise ContractError("empty caption")
    inputs = [SOS_ID] + list(caption_ids)
    targets = list(caption_ids) + [EOS_ID]
    if pad_to is not None:
        if pad_to < len(targets):
            raise ContractError(f"pad_to={pad_to} below sequence length {len(targets)}")
        pad = [PAD_ID] * (pad_to - len(targets))
        inputs, targets = inputs + pad, targets + pad
    return inputs, targets


def forward_sequence(annotations: AnnotationSet, attrs: Tensor,
                     caption_ids: list[int], params: ModelParams,
                     config: ModelConfig, training: bool = False, rng=None,
                     pad_to: int | None = None, return_alphas: bool = False):
    """Teacher-forced pass over one caption; returns one logits vector per target.

    ``caption_ids`` holds the caption's word ids without special tokens.
    The logits list aligns with ``teacher_io(caption_ids, pad_to)[1]``.
    """
    inputs, _ = teacher_io(caption_ids, pad_to)
    state, h_pre = image_step(annotations, attrs, params, config, training, rng)
    guide_state = zero_lstm_g_state(config.d_g) if config.variant == "sgn" else None
    attrs_guide = attrs if config.variant == "att" else None
    logits_list, alphas = [], []
    for t, word in enumerate(inputs):
        if config.variant == "sgn":
            prev_out = h_pre if t == 0 else state.h_tilde
            guide, guide_state = guider_step(t, prev_out, attrs, guide_state,
                                             params, config, training, rng)
        else:
            guide = attrs_guide
        out = decode_step(t, word, guide, state, annotations, params, config,
                          training, rng)
        state = out.state
        logits_list.append(out.logits)
        alphas.append(out.alpha)
    if return_alphas:
        return logits_list, alphas
    return logits_list


# ---------------------------------------------------------------------------
# checkpoint format: text header + manifest, then raw little-endian float64

_MAGIC = "SGNCKPT v1"

_CONFIG_FIELDS = ("k", "d", "h", "d_g", "d_w", "d_a", "d_x", "vocab_size",
                  "variant", "candidate_tanh", "dropout_rate", "max_decode_len")


def config_to_text(config: ModelConfig) -> str:
    lines = []
    for name in _CONFIG_FIELDS:
        v = getattr(config, name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{name}={v}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"bad config line: {line!r}")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()
    unknown = set(kv) - set(_CONFIG_FIELDS)
    if unknown:
        raise ContractError(
            f"unknown config keys {sorted(unknown)}; valid keys: {list(_CONFIG_FIELDS)}")
    missing = set(_CONFIG_FIELDS) - set(kv)
    if missing:
        raise ContractError(f"config missing keys {sorted(missing)}")
    def parse(name, raw):
        if name == "variant":
            return raw
        if name == "candidate_tanh":
            return raw == "true"
        if name == "dropout_rate":
            return float(raw)
        return int(raw)
    return ModelConfig(**{n: parse(n, kv[n]) for n in _CONFIG_FIELDS}).validate()


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    """Write ``path`` (binary checkpoint) and ``path + '.cfg'`` (config text)."""
    path = Path(path)
    blocks = params.blocks()
    with open(path, "wb") as f:
        f.write((_MAGIC + "\n").encode())
        for name, t in blocks.items():
            dims = " ".join(str(d) for d in t.data.shape)
            f.write(f"{name} {dims}\n".encode())
        f.write(b"\n")
        for t in blocks.values():
            f.write(struct.pack(f"<{t.data.size}d", *t.data.reshape(-1)))
    Path(str(path) + ".cfg").write_text(config_to_text(config))


def load_checkpoint(path):
    """Read a checkpoint written by ``save_checkpoint``; returns (params, config)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    cfg_path = Path(str(path) + ".cfg")
    if not cfg_path.exists():
        raise FileNotFoundError(f"checkpoint config not found: {cfg_path}")
    config = config_from_text(cfg_path.read_text())
    with open(path, "rb") as f:
        if f.readline().decode().strip() != _MAGIC:
            raise ContractError(f"{path} is not a {_MAGIC} checkpoint")
        manifest = []
        while True:
            line = f.readline().decode()
            if line == "\n":
                break
            if not line:
                raise ContractError("checkpoint manifest not terminated")
            parts = line.split()
            manifest.append((parts[0], tuple(int(d) for d in parts[1:])))
        arrays = {}
        for name, shape in manifest:
            n = int(np.prod(shape))
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise ContractError(f"checkpoint payload truncated at {name}")
            arrays[name] = np.array(struct.unpack(f"<{n}d", raw)).reshape(shape)
    params = init_params(config, seed=0)
    blocks = params.blocks()
    if set(blocks) != set(arrays):
        raise ContractError("checkpoint blocks do not match the config's variant")
    for name, t in blocks.items():
        if t.data.shape != arrays[name].shape:
            raise ContractError(f"checkpoint block {name} has shape "
                                f"{arrays[name].shape}, expected {t.data.shape}")
        t.data[...] = arrays[name]
    return params, config
