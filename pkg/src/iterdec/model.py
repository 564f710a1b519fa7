"""Encoder-decoder transformer with switchable position encodings.

The model follows the original post-layer-norm architecture: residual
sublayers followed by layer normalization, ReLU feedforward blocks, and
one embedding table shared between source, target, and the pre-softmax
projection.  Position information comes either from added sinusoidal
encodings or from learned clipped relative offsets applied to the keys
and values of every self-attention sublayer.  An optional copy decoder
mixes the vocabulary distribution with the encoder attention weights
through a learned gate.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .vocab import BOS_ID, EOI_ID, EOS_ID, PAD_ID, UNK_ID

POSITION_MODES = ("absolute", "relative")


class ModelError(Exception):
    """Raised for invalid configurations, shapes, or checkpoints."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

    vocab_size: int
    layers: int = 6
    d_model: int = 64
    d_ff: int = 256
    heads: int = 4
    radius: int = 8
    position: str = "absolute"
    copy_decoder: bool = False
    dropout: float = 0.1
    label_smoothing: float = 0.1
    max_len: int = 512
    max_decode_len: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if self.vocab_size <= UNK_ID:
            raise ModelError(f"vocab_size must exceed {UNK_ID}, got {self.vocab_size}")
        if self.layers < 1:
            raise ModelError("layers must be at least 1")
        if self.d_model % self.heads != 0:
            raise ModelError(
                f"model width {self.d_model} not divisible by {self.heads} heads")
        if self.position not in POSITION_MODES:
            raise ModelError(f"unknown position mode {self.position!r}")
        if self.position == "relative" and self.radius < 1:
            raise ModelError(f"relative radius must be at least 1, got {self.radius}")
        if self.max_decode_len < 1:
            raise ModelError("max decode length must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_text(self):
        """Serialize as `key = value` lines."""
        lines = []
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{field.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Parse the `key = value` form produced by :meth:`to_text`."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ModelError(f"line {lineno}: expected `key = value`, got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in fields:
                raise ModelError(f"line {lineno}: unknown config key {key!r}")
            kind = fields[key].type
            if kind == "bool":
                if raw not in ("true", "false"):
                    raise ModelError(f"line {lineno}: expected true/false, got {raw!r}")
                values[key] = raw == "true"
            elif kind == "int":
                values[key] = int(raw)
            elif kind == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
        if "vocab_size" not in values:
            raise ModelError("config text is missing vocab_size")
        return cls(**values)

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def relative_label(i, j, r):
    """Clipped relative offset of key position j from query position i."""
    if r < 1:
        raise ModelError(f"radius must be at least 1, got {r}")
    return max(-r, min(r, j - i))


def label_matrix(n_queries, n_keys, r, query_offset=0, key_offset=0):
    """Table indices (offset + r) for every query/key position pair.

    The optional offsets shift the absolute index ranges; labels depend
    only on the difference, so equal offsets leave the matrix unchanged.
    """
    q = np.arange(n_queries)[:, None] + query_offset
    k = np.arange(n_keys)[None, :] + key_offset
    return np.clip(k - q, -r, r) + r


def sinusoidal_encoding(length, d_model, dtype=np.float32):
    """Fixed sine/cosine position table of shape (length, d_model)."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    dims = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, dims / d_model)
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table.astype(dtype)


def attention(queries, keys, values, attend, rel_k=None, rel_v=None, labels=None,
              drop_rate=0.0, rng=None):
    """Scaled dot-product attention over (batch, head, position, depth).

    attend is a boolean array broadcastable to (B, H, Tq, Tk) marking
    attendable key positions.  In relative mode, rel_k and rel_v are
    (2r+1, depth) offset tables indexed by labels, added to keys before
    scaling and to the weighted values afterwards.  Returns the context
    tensor and the attention weights (a distribution per query row).
    """
    b, h, n_queries, depth = queries.shape
    n_keys = keys.shape[2]
    attend = np.broadcast_to(np.asarray(attend, dtype=bool), (b, h, n_queries, n_keys))
    if not attend.any(axis=-1).all():
        raise ModelError("no attendable key for at least one query position")
    scores = ad.matmul(queries, ad.transpose(keys, (0, 1, 3, 2)))
    if rel_k is not None:
        scores = ad.add(scores, ad.relative_scores(queries, rel_k, labels))
    scores = ad.mul(scores, 1.0 / math.sqrt(depth))
    scores = ad.masked_fill(scores, ~attend, -np.inf)
    weights = ad.softmax(scores, axis=-1)
    used = ad.dropout(weights, drop_rate, rng) if drop_rate else weights
    context = ad.matmul(used, values)
    if rel_v is not None:
        context = ad.add(context, ad.relative_values(used, rel_v, labels))
    return context, weights


def copy_mix(p_vocab, src_ids, alpha, gate, src_mask=None):
    """Gated mixture of the vocabulary and copy distributions.

    p(w) = g * p_vocab(w) + (1 - g) * sum of alpha over source positions
    holding w.  p_vocab is (B, T, V), alpha (B, T, Ts), gate (B, T, 1).
    """
    src_ids = np.asarray(src_ids)
    b, n_src = src_ids.shape
    vocab = p_vocab.shape[-1]
    scatter = np.zeros((b, n_src, vocab), dtype=p_vocab.dtype)
    scatter[np.arange(b)[:, None], np.arange(n_src)[None, :], src_ids] = 1.0
    if src_mask is not None:
        scatter *= np.asarray(src_mask, dtype=p_vocab.dtype)[:, :, None]
    p_copy = ad.matmul(alpha, ad.Tensor(scatter))
    return ad.add(ad.mul(gate, p_vocab), ad.mul(1.0 - gate, p_copy))


def greedy_pick(scores_row):
    """Argmax token id; ties resolve to the lowest id."""
    return int(np.argmax(scores_row))


class _Builder:
    """Creates seeded parameters and collects them by name."""

    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params = {}

    def _register(self, name, data):
        if name in self.params:
            raise ModelError(f"duplicate parameter name {name!r}")
        param = ad.Parameter(name, np.asarray(data, dtype=self.dtype))
        self.params[name] = param
        return param

    def xavier(self, name, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return self._register(name, self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def normal(self, name, shape, std):
        return self._register(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name, *shape):
        return self._register(name, np.zeros(shape))

    def ones(self, name, *shape):
        return self._register(name, np.ones(shape))


class _Linear:
    def __init__(self, build, name, d_in, d_out):
        self.w = build.xavier(f"{name}.w", d_in, d_out)
        self.b = build.zeros(f"{name}.b", d_out)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


class _LayerNorm:
    def __init__(self, build, name, d_model):
        self.gain = build.ones(f"{name}.gain", d_model)
        self.bias = build.zeros(f"{name}.bias", d_model)

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class _MultiHeadAttention:
    def __init__(self, build, name, config, relative=True):
        d = config.d_model
        self.heads = config.heads
        self.d_head = d // config.heads
        self.proj_q = _Linear(build, f"{name}.q", d, d)
        self.proj_k = _Linear(build, f"{name}.k", d, d)
        self.proj_v = _Linear(build, f"{name}.v", d, d)
        self.proj_out = _Linear(build, f"{name}.out", d, d)
        if relative and config.position == "relative":
            rows = 2 * config.radius + 1
            std = self.d_head ** -0.5
            self.rel_k = build.normal(f"{name}.rel_k", (rows, self.d_head), std)
            self.rel_v = build.normal(f"{name}.rel_v", (rows, self.d_head), std)
        else:
            self.rel_k = None
            self.rel_v = None

    def _split(self, x, length):
        batch = x.shape[0]
        parts = ad.reshape(x, (batch, length, self.heads, self.d_head))
        return ad.transpose(parts, (0, 2, 1, 3))

    def __call__(self, x_q, x_kv, attend, labels, drop_rate, rng):
        batch, n_queries, d = x_q.shape
        n_keys = x_kv.shape[1]
        q = self._split(self.proj_q(x_q), n_queries)
        k = self._split(self.proj_k(x_kv), n_keys)
        v = self._split(self.proj_v(x_kv), n_keys)
        context, weights = attention(q, k, v, attend, self.rel_k, self.rel_v,
                                     labels, drop_rate, rng)
        merged = ad.reshape(ad.transpose(context, (0, 2, 1, 3)), (batch, n_queries, d))
        return self.proj_out(merged), weights


class _FeedForward:
    def __init__(self, build, name, config):
        self.inner = _Linear(build, f"{name}.inner", config.d_model, config.d_ff)
        self.outer = _Linear(build, f"{name}.outer", config.d_ff, config.d_model)

    def __call__(self, x):
        return self.outer(ad.relu(self.inner(x)))


class _EncoderLayer:
    def __init__(self, build, name, config):
        self.attn = _MultiHeadAttention(build, f"{name}.attn", config)
        self.attn_norm = _LayerNorm(build, f"{name}.attn.norm", config.d_model)
        self.ffn = _FeedForward(build, f"{name}.ffn", config)
        self.ffn_norm = _LayerNorm(build, f"{name}.ffn.norm", config.d_model)

    def __call__(self, x, attend, labels, drop_rate, rng):
        context, _ = self.attn(x, x, attend, labels, drop_rate, rng)
        x = self.attn_norm(ad.add(x, ad.dropout(context, drop_rate, rng)))
        inner = self.ffn(x)
        return self.ffn_norm(ad.add(x, ad.dropout(inner, drop_rate, rng)))


class _DecoderLayer:
    def __init__(self, build, name, config):
        self.self_attn = _MultiHeadAttention(build, f"{name}.self", config)
        self.self_norm = _LayerNorm(build, f"{name}.self.norm", config.d_model)
        # Relative labels are a self-attention device; offsets between
        # decoder and encoder positions carry no meaning, and biasing the
        # cross sublayer with them lets the decoder address source tokens
        # by near-absolute position, which hurts length generalization.
        self.cross_attn = _MultiHeadAttention(build, f"{name}.cross", config,
                                              relative=False)
        self.cross_norm = _LayerNorm(build, f"{name}.cross.norm", config.d_model)
        self.ffn = _FeedForward(build, f"{name}.ffn", config)
        self.ffn_norm = _LayerNorm(build, f"{name}.ffn.norm", config.d_model)

    def __call__(self, x, memory, self_attend, cross_attend, self_labels,
                 cross_labels, drop_rate, rng):
        context, _ = self.self_attn(x, x, self_attend, self_labels, drop_rate, rng)
        x = self.self_norm(ad.add(x, ad.dropout(context, drop_rate, rng)))
        context, cross_weights = self.cross_attn(x, memory, cross_attend,
                                                 cross_labels, drop_rate, rng)
        x = self.cross_norm(ad.add(x, ad.dropout(context, drop_rate, rng)))
        inner = self.ffn(x)
        x = self.ffn_norm(ad.add(x, ad.dropout(inner, drop_rate, rng)))
        return x, cross_weights


@dataclass
class ForwardResult:
    """Teacher-forced forward outputs.

    scores holds logits, or mixed probabilities when the copy decoder is
    active (is_probs tells which).  alpha is the head-averaged attention
    of the last decoder-to-encoder sublayer; gate the copy gate values.
    """

    scores: ad.Tensor
    is_probs: bool
    alpha: ad.Tensor | None = None
    gate: ad.Tensor | None = None


class TransformerModel:
    """Seeded encoder-decoder transformer over a shared vocabulary."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        build = _Builder(rng, config.np_dtype())
        d = config.d_model
        self.embedding = build.normal("embedding", (config.vocab_size, d), d ** -0.5)
        self.encoder = [_EncoderLayer(build, f"enc.{i}", config)
                        for i in range(config.layers)]
        self.decoder = [_DecoderLayer(build, f"dec.{i}", config)
                        for i in range(config.layers)]
        if config.copy_decoder:
            self.copy_w = build.xavier("copy.gate.w", d, 1)
            self.copy_b = build.zeros("copy.gate.b", 1)
        self._params = build.params
        self._pe = None
        if config.position == "absolute":
            self._pe = sinusoidal_encoding(config.max_len, d, config.np_dtype())

    def parameters(self):
        return list(self._params.values())

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())

    def parameter_tensors(self):
        return {name: p.data for name, p in self._params.items()}

    # -- persistence ----------------------------------------------------

    def save(self, path, extra_config=None, extra_tensors=None):
        config = {"model": dataclasses.asdict(self.config)}
        if extra_config:
            config.update(extra_config)
        tensors = dict(self.parameter_tensors())
        if extra_tensors:
            tensors.update(extra_tensors)
        save_checkpoint(path, config, tensors)

    @classmethod
    def load(cls, path):
        """Rebuild a model from a checkpoint; returns (model, config, extras)."""
        config_block, tensors = load_checkpoint(path)
        if "model" not in config_block:
            raise ModelError(f"{path}: checkpoint has no model config block")
        config = ModelConfig(**config_block["model"])
        model = cls(config, seed=0)
        extras = {}
        for name, array in tensors.items():
            if name not in model._params:
                extras[name] = array
                continue
            expected = model._params[name].data.shape
            if array.shape != expected:
                raise ModelError(
                    f"{path}: tensor {name!r} has shape {array.shape}, "
                    f"config implies {expected}")
            model._params[name].data = np.asarray(array, dtype=config.np_dtype())
        missing = set(model._params) - set(tensors)
        if missing:
            raise ModelError(f"{path}: checkpoint is missing tensors {sorted(missing)}")
        return model, config_block, extras

    # -- forward passes -------------------------------------------------

    def _labels(self, n_queries, n_keys):
        if self.config.position != "relative":
            return None
        return label_matrix(n_queries, n_keys, self.config.radius)

    def _check_length(self, what, length):
        if length > self.config.max_len:
            raise ModelError(
                f"{what} length {length} exceeds maximum {self.config.max_len}")

    def _embed(self, ids, drop_rate, rng):
        length = ids.shape[1]
        x = ad.mul(ad.embedding(self.embedding, ids), math.sqrt(self.config.d_model))
        if self._pe is not None:
            x = ad.add(x, ad.Tensor(self._pe[:length]))
        return ad.dropout(x, drop_rate, rng)

    def _encode(self, src_ids, src_mask, drop_rate, rng):
        batch, n_src = src_ids.shape
        self._check_length("source", n_src)
        attend = np.broadcast_to(src_mask[:, None, None, :], (batch, 1, n_src, n_src))
        labels = self._labels(n_src, n_src)
        x = self._embed(src_ids, drop_rate, rng)
        for layer in self.encoder:
            x = layer(x, attend, labels, drop_rate, rng)
        return x

    def _decode_stack(self, memory, src_mask, dec_in, dec_mask, drop_rate, rng):
        batch, n_tgt = dec_in.shape
        n_src = memory.shape[1]
        self._check_length("target", n_tgt)
        causal = np.tril(np.ones((n_tgt, n_tgt), dtype=bool))
        self_attend = causal[None, None, :, :] & dec_mask[:, None, None, :]
        cross_attend = np.broadcast_to(src_mask[:, None, None, :],
                                       (batch, 1, n_tgt, n_src))
        self_labels = self._labels(n_tgt, n_tgt)
        cross_labels = None
        x = self._embed(dec_in, drop_rate, rng)
        cross_weights = None
        for layer in self.decoder:
            x, cross_weights = layer(x, memory, self_attend, cross_attend,
                                     self_labels, cross_labels, drop_rate, rng)
        return x, cross_weights

    def _output_scores(self, state, cross_weights, src_ids, src_mask):
        logits = ad.matmul(state, ad.transpose(self.embedding, (1, 0)))
        if not self.config.copy_decoder:
            return ForwardResult(logits, False)
        alpha = ad.mul(ad.tensor_sum(cross_weights, axis=1), 1.0 / self.config.heads)
        gate = ad.sigmoid(ad.add(ad.matmul(state, self.copy_w), self.copy_b))
        probs = copy_mix(ad.softmax(logits), src_ids, alpha, gate, src_mask)
        return ForwardResult(probs, True, alpha, gate)

    def forward_teacher_forced(self, src_ids, tgt_ids, src_mask=None, tgt_mask=None,
                               train=False, rng=None):
        """Score every target position given its gold prefix.

        tgt_ids is the full gold output; the decoder consumes it shifted
        right behind a leading BOS, so scores[:, t] predicts tgt_ids[:, t].
        """
        src_ids = np.asarray(src_ids)
        tgt_ids = np.asarray(tgt_ids)
        if src_ids.ndim != 2 or tgt_ids.ndim != 2:
            raise ModelError("expected batched (B, T) id matrices")
        batch = src_ids.shape[0]
        src_mask = (np.ones(src_ids.shape, dtype=bool) if src_mask is None
                    else np.asarray(src_mask, dtype=bool))
        tgt_mask = (np.ones(tgt_ids.shape, dtype=bool) if tgt_mask is None
                    else np.asarray(tgt_mask, dtype=bool))
        drop_rate = self.config.dropout if train else 0.0
        if drop_rate and rng is None:
            raise ModelError("training-mode forward with dropout requires an rng")
        dec_in = np.concatenate(
            [np.full((batch, 1), BOS_ID, dtype=tgt_ids.dtype), tgt_ids[:, :-1]], axis=1)
        dec_mask = np.concatenate(
            [np.ones((batch, 1), dtype=bool), tgt_mask[:, :-1]], axis=1)
        memory = self._encode(src_ids, src_mask, drop_rate, rng)
        state, cross_weights = self._decode_stack(memory, src_mask, dec_in, dec_mask,
                                                  drop_rate, rng)
        return self._output_scores(state, cross_weights, src_ids, src_mask)

    # -- greedy decoding ------------------------------------------------

    def _decode_step_scores(self, memory, src_ids, src_mask, dec_in, dec_mask):
        """Scores over the vocabulary for the next token of each row."""
        state, cross_weights = self._decode_stack(memory, src_mask, dec_in, dec_mask,
                                                  0.0, None)
        result = self._output_scores(state, cross_weights, src_ids, src_mask)
        return result.scores.data[:, -1, :]

    def decode_greedy_batch(self, sources, max_len=None):
        """Greedy decode a list of id sequences in lockstep.

        Each output stops at EOS (dropped) or EOI (kept), or is cut off
        at the decode-length cap.
        """
        limit = self.config.max_decode_len if max_len is None else max_len
        if limit < 1:
            raise ModelError("max decode length must be at least 1")
        batch = len(sources)
        if batch == 0:
            return []
        n_src = max(len(s) for s in sources)
        src_ids = np.full((batch, n_src), PAD_ID, dtype=np.int64)
        src_mask = np.zeros((batch, n_src), dtype=bool)
        for row, seq in enumerate(sources):
            if not seq:
                raise ModelError("cannot decode from an empty source")
            src_ids[row, : len(seq)] = seq
            src_mask[row, : len(seq)] = True
        outputs = [[] for _ in range(batch)]
        finished = [False] * batch
        with ad.no_grad():
            memory = self._encode(src_ids, src_mask, 0.0, None)
            dec_rows = [[BOS_ID] for _ in range(batch)]
            prefix_len = [1] * batch
            for _ in range(limit):
                dec_in = np.asarray(dec_rows, dtype=np.int64)
                dec_mask = np.arange(dec_in.shape[1])[None, :] < np.asarray(prefix_len)[:, None]
                scores = self._decode_step_scores(memory, src_ids, src_mask,
                                                  dec_in, dec_mask)
                for row in range(batch):
                    if finished[row]:
                        dec_rows[row].append(PAD_ID)
                        continue
                    token = greedy_pick(scores[row])
                    dec_rows[row].append(token)
                    prefix_len[row] += 1
                    if token == EOS_ID:
                        finished[row] = True
                    elif token == EOI_ID:
                        outputs[row].append(token)
                        finished[row] = True
                    else:
                        outputs[row].append(token)
                if all(finished):
                    break
        return outputs

    def decode_greedy(self, source, max_len=None):
        """Greedy decode one id sequence."""
        return self.decode_greedy_batch([list(source)], max_len)[0]
