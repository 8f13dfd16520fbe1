"""Frozen toy decoder-only language backbone, modality context encoders and the head.

The backbone stands in for a pretrained LLM: its weights are drawn once from
a fixed seed and frozen.  Prompt rows for a layer are prepended as extra
key/value context (visible to every text query, never masked causally) and
are not carried to the next layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Parameter
from .tensor import DEFAULT_DTYPE, RngState, ShapeError, Tensor, digest_arrays

ENCODER_INITS = ("random", "identity", "zeros")
ENCODER_KINDS = ("transformer", "recurrent-gated", "recurrent-lstm", "convolution")


@dataclass
class BackboneConfig:
    n_layers: int = 6
    d_t: int = 64
    n_heads: int = 4
    vocab: int = 256
    max_len: int = 64
    seed: int = 0

    def validate(self, modality_widths=()) -> None:
        if self.d_t % self.n_heads:
            raise ValueError(f"d_t={self.d_t} is not divisible by n_heads={self.n_heads}")
        for d_m in modality_widths:
            if d_m >= self.d_t:
                raise ValueError(f"modality width {d_m} must be smaller than d_t={self.d_t}")
        if min(self.n_layers, self.vocab, self.max_len) < 1:
            raise ValueError("n_layers, vocab and max_len must be positive")


@dataclass
class ModalityEncoderConfig:
    modality: str
    kind: str = "transformer"
    d_m: int = 16
    d_feat: int | None = None
    depth: int | None = None
    n_heads: int = 2
    seed: int | None = None

    def validate(self, prompt_depth: int | None = None) -> None:
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; expected one of {ENCODER_KINDS}")
        if self.d_m < 2:
            raise ValueError("d_m must be at least 2")
        if self.kind == "transformer" and self.d_m % self.n_heads:
            raise ValueError(f"d_m={self.d_m} not divisible by n_heads={self.n_heads}")
        if prompt_depth is not None and self.depth is not None and self.depth != prompt_depth:
            raise ValueError(f"encoder depth {self.depth} must equal prompt depth {prompt_depth}")


@dataclass
class LayerStates:
    """Per-layer text states seen by each layer, prompts used, and the final states."""

    hidden: list = field(default_factory=list)
    prompts: dict = field(default_factory=dict)
    attention_lengths: dict = field(default_factory=dict)
    final: Tensor | None = None
    text_mask: np.ndarray | None = None


def token_embedding_table(cfg: BackboneConfig, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """The backbone's frozen token embeddings; a pure function of the config."""
    g = RngState(cfg.seed).generator("backbone", "embed")
    return g.standard_normal((cfg.vocab, cfg.d_t)).astype(dtype)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention; ``mask`` is (B, l_q, l_k) booleans."""
    B, lq, d = q.shape
    lk = k.shape[1]
    dh = d // n_heads
    qh = ops.transpose(ops.reshape(q, (B, lq, n_heads, dh)), (0, 2, 1, 3))
    kh = ops.transpose(ops.reshape(k, (B, lk, n_heads, dh)), (0, 2, 3, 1))
    vh = ops.transpose(ops.reshape(v, (B, lk, n_heads, dh)), (0, 2, 1, 3))
    scores = ops.scale(ops.matmul(qh, kh), 1.0 / math.sqrt(dh))
    weights = ops.softmax_rows(scores, mask[:, None, :, :])
    out = ops.matmul(weights, vh)
    return ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, lq, d))


def lengths_mask(lengths: np.ndarray, length: int) -> np.ndarray:
    return np.arange(length)[None, :] < np.asarray(lengths)[:, None]


class Backbone:
    def __init__(self, cfg: BackboneConfig, prompt_depth: int = 3, dtype=DEFAULT_DTYPE):
        cfg.validate()
        if not 0 <= prompt_depth <= cfg.n_layers:
            raise ValueError(f"prompt depth {prompt_depth} outside [0, {cfg.n_layers}]")
        self.cfg = cfg
        self.prompt_depth = prompt_depth
        d, L = cfg.d_t, cfg.n_layers
        root = RngState(cfg.seed)
        self.params: dict[str, Parameter] = {}

        def add(name, value):
            self.params[name] = Parameter(value, f"backbone.{name}", trainable=False, dtype=dtype)
            return self.params[name]

        self.embed = add("embed", token_embedding_table(cfg, dtype))
        self.pos = add("pos", root.generator("backbone", "pos").standard_normal((cfg.max_len, d)) * 0.1)
        out_std = 1.0 / math.sqrt(2 * L)
        self.layers = []
        for i in range(L):
            g = root.generator("backbone", "layer", i)
            lay = {}
            for nm in ("ln1", "ln2"):
                lay[nm + ".g"] = add(f"layer{i}.{nm}.g", np.ones(d))
                lay[nm + ".b"] = add(f"layer{i}.{nm}.b", np.zeros(d))
            for nm in ("wq", "wk", "wv"):
                lay[nm] = add(f"layer{i}.{nm}", g.standard_normal((d, d)) / math.sqrt(d))
                lay["b" + nm[1]] = add(f"layer{i}.b{nm[1]}", np.zeros(d))
            lay["wo"] = add(f"layer{i}.wo", g.standard_normal((d, d)) / math.sqrt(d) * out_std)
            lay["bo"] = add(f"layer{i}.bo", np.zeros(d))
            lay["w1"] = add(f"layer{i}.w1", g.standard_normal((d, 4 * d)) / math.sqrt(d))
            lay["b1"] = add(f"layer{i}.b1", np.zeros(4 * d))
            lay["w2"] = add(f"layer{i}.w2", g.standard_normal((4 * d, d)) / math.sqrt(4 * d) * out_std)
            lay["b2"] = add(f"layer{i}.b2", np.zeros(d))
            self.layers.append(lay)
        self.lnf_g = add("lnf.g", np.ones(d))
        self.lnf_b = add("lnf.b", np.zeros(d))

    @property
    def prompted_layers(self) -> list[int]:
        L = self.cfg.n_layers
        return list(range(L - self.prompt_depth, L))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.set_trainable(False)

    def checksum(self) -> str:
        return digest_arrays([(n, p.data) for n, p in sorted(self.params.items())])

    def layer(self, i: int, h: Tensor, prompt: Tensor | None, text_mask: np.ndarray):
        lay = self.layers[i]
        B, l, d = h.shape
        lp = 0 if prompt is None else prompt.shape[1]
        x = h if prompt is None else ops.concat([prompt, h], axis=1)
        n = ops.layernorm_rows(x, lay["ln1.g"], lay["ln1.b"])
        n_text = n if lp == 0 else ops.slice_axis(n, 1, lp)
        q = ops.linear(n_text, lay["wq"], lay["bq"])
        k = ops.linear(n, lay["wk"], lay["bk"])
        v = ops.linear(n, lay["wv"], lay["bv"])
        causal = np.tril(np.ones((l, l), dtype=bool))
        allowed = np.concatenate([np.ones((l, lp), dtype=bool), causal], axis=1)
        key_ok = np.concatenate([np.ones((B, lp), dtype=bool), text_mask], axis=1)
        mask = allowed[None, :, :] & key_ok[:, None, :]
        a = attention(q, k, v, mask, self.cfg.n_heads)
        h = ops.add(h, ops.linear(a, lay["wo"], lay["bo"]))
        m = ops.layernorm_rows(h, lay["ln2.g"], lay["ln2.b"])
        m = ops.linear(ops.gelu(ops.linear(m, lay["w1"], lay["b1"])), lay["w2"], lay["b2"])
        return ops.add(h, m), lp + l

    def forward(self, tokens, lengths=None, prompts: dict | None = None, hook=None) -> LayerStates:
        """Run the stack on a (B, l) token batch.

        ``prompts`` maps a prompted layer index to a (l_p, d_t) or
        (B, l_p, d_t) tensor.  ``hook(i, h)`` is called at every prompted layer
        instead and returns ``(h, prompt)``; it is how prompts depending on
        the layer's own states get built.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be (batch, length), got {tokens.shape}")
        B, l = tokens.shape
        if l > self.cfg.max_len:
            raise ShapeError(f"sequence length {l} exceeds max_len {self.cfg.max_len}")
        if l < 1:
            raise ShapeError("empty token sequence")
        lengths = np.full(B, l) if lengths is None else np.asarray(lengths)
        text_mask = lengths_mask(lengths, l)
        prompted = set(self.prompted_layers)
        for i in (prompts or {}):
            if i not in prompted:
                raise ValueError(f"prompt supplied for non-prompted layer {i} (prompted: {sorted(prompted)})")

        h = ops.add(ops.take_rows(self.embed, tokens),
                    ops.broadcast_to(ops.slice_axis(self.pos, 0, 0, l), (B, l, self.cfg.d_t)))
        states = LayerStates(text_mask=text_mask)
        for i in range(self.cfg.n_layers):
            states.hidden.append(h)
            p = None
            if i in prompted:
                if hook is not None:
                    h, p = hook(i, h)
                elif prompts and i in prompts:
                    p = prompts[i]
            if p is not None:
                if p.shape[-1] != self.cfg.d_t:
                    raise ShapeError(f"prompt width {p.shape[-1]} != d_t {self.cfg.d_t}")
                if p.ndim == 2:
                    p = ops.broadcast_to(p, (B,) + p.shape)
                states.prompts[i] = p
            h, states.attention_lengths[i] = self.layer(i, h, p, text_mask)
        states.hidden.append(h)
        states.final = ops.layernorm_rows(h, self.lnf_g, self.lnf_b)
        return states


def backbone_forward(backbone: Backbone, tokens, prompts: dict | None = None) -> LayerStates:
    """Single-sequence convenience wrapper; hidden states come back without the batch axis."""
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    states = backbone.forward(tokens[None] if single else tokens, prompts=prompts)
    if single:
        states.hidden = [ops.reshape(h, h.shape[1:]) for h in states.hidden]
        states.final = ops.reshape(states.final, states.final.shape[1:])
    return states


# ----------------------------------------------------------------------------
# modality encoders

def sinusoid_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class ModalityEncoder:
    """Input projection followed by ``depth`` blocks; each block's output is one tap."""

    def __init__(self, cfg: ModalityEncoderConfig, depth: int, rng: RngState,
                 init: str = "random", dtype=DEFAULT_DTYPE):
        cfg.validate()
        self.cfg = cfg
        self.depth = depth
        self.d_feat = cfg.d_feat or cfg.d_m
        self.params: dict[str, Parameter] = {}
        if init not in ENCODER_INITS:
            raise ValueError(f"unknown encoder init {init!r}; expected one of {ENCODER_INITS}")
        self.init = init
        self._zero = init == "zeros"
        # "identity": features pass through nearly unchanged at step 0
        self._branch = 0.1 if init == "identity" else 1.0
        self._g = rng.generator("encoder", cfg.modality)
        self._dtype = dtype
        d = cfg.d_m
        if init == "identity" and self.d_feat == d:
            self.w_in = self._param("in_proj.w", (d, d), 0.0, fill=np.eye(d))
        else:
            self.w_in = self._param("in_proj.w", (self.d_feat, d), 1.0 / math.sqrt(self.d_feat))
        self.b_in = self._param("in_proj.b", (d,), 0.0)
        self.blocks = [self._make_block(j) for j in range(depth)]

    def _param(self, name, shape, std, fill=None):
        if fill is not None:
            value = np.full(shape, fill)
        elif self._zero or std == 0.0:
            value = np.zeros(shape)
        else:
            value = self._g.standard_normal(shape) * std
        p = Parameter(value, f"encoder.{self.cfg.modality}.{name}", trainable=True, dtype=self._dtype)
        self.params[name] = p
        return p

    def _make_block(self, j: int) -> dict:
        d, kind = self.cfg.d_m, self.cfg.kind
        s = 1.0 / math.sqrt(d)
        pre = f"block{j}."
        blk = {}
        if kind == "transformer":
            for nm in ("ln1", "ln2"):
                blk[nm + ".g"] = self._param(pre + nm + ".g", (d,), 0.0, fill=1.0)
                blk[nm + ".b"] = self._param(pre + nm + ".b", (d,), 0.0)
            for nm in ("wq", "wk", "wv", "wo"):
                blk[nm] = self._param(pre + nm, (d, d), s * (self._branch if nm == "wo" else 1.0))
                blk["b" + nm[1]] = self._param(pre + "b" + nm[1], (d,), 0.0)
            blk["w1"] = self._param(pre + "w1", (d, 4 * d), s)
            blk["b1"] = self._param(pre + "b1", (4 * d,), 0.0)
            blk["w2"] = self._param(pre + "w2", (4 * d, d), 0.5 * s * self._branch)
            blk["b2"] = self._param(pre + "b2", (d,), 0.0)
        elif kind in ("recurrent-gated", "recurrent-lstm"):
            gates = "zrn" if kind == "recurrent-gated" else "ifgo"
            for gname in gates:
                blk["w" + gname] = self._param(pre + "w" + gname, (d, d), s)
                blk["u" + gname] = self._param(pre + "u" + gname, (d, d), s)
                blk["b" + gname] = self._param(pre + "b" + gname, (d,), 0.0)
        else:
            blk["dw"] = self._param(pre + "dw", (3, d), 1.0 / math.sqrt(3))
            blk["db"] = self._param(pre + "db", (d,), 0.0)
            blk["pw"] = self._param(pre + "pw", (d, d), s * self._branch)
            blk["pb"] = self._param(pre + "pb", (d,), 0.0)
        return blk

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def forward(self, features, mask: np.ndarray | None = None) -> list[Tensor]:
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.ndim == 2:
            x = ops.reshape(x, (1,) + x.shape)
        B, l, _ = x.shape
        if l < 1:
            raise ShapeError("empty modality sequence")
        if x.shape[-1] != self.d_feat:
            raise ShapeError(f"{self.cfg.modality}: feature width {x.shape[-1]} != {self.d_feat}")
        mask = np.ones((B, l), dtype=bool) if mask is None else mask
        if self.cfg.kind == "transformer":
            # positions enter before the projection, so a zero projection silences them too
            pe = sinusoid_positions(l, self.d_feat).astype(x.dtype) * self._branch
            x = ops.add(x, Tensor.wrap(np.broadcast_to(pe, x.shape).copy()))
        h = ops.linear(x, self.w_in, self.b_in)
        if not mask.all():
            h = ops.mul_const(h, mask[..., None])
        taps = []
        for blk in self.blocks:
            h = self._block(blk, h, mask)
            taps.append(h)
        return taps

    def _block(self, blk: dict, x: Tensor, mask: np.ndarray) -> Tensor:
        kind = self.cfg.kind
        if kind == "transformer":
            n = ops.layernorm_rows(x, blk["ln1.g"], blk["ln1.b"])
            q = ops.linear(n, blk["wq"], blk["bq"])
            k = ops.linear(n, blk["wk"], blk["bk"])
            v = ops.linear(n, blk["wv"], blk["bv"])
            l = x.shape[1]
            amask = np.broadcast_to(mask[:, None, :], (x.shape[0], l, l))
            x = ops.add(x, ops.linear(attention(q, k, v, amask, self.cfg.n_heads), blk["wo"], blk["bo"]))
            n = ops.layernorm_rows(x, blk["ln2.g"], blk["ln2.b"])
            return ops.add(x, ops.linear(ops.gelu(ops.linear(n, blk["w1"], blk["b1"])), blk["w2"], blk["b2"]))
        if kind == "convolution":
            y = ops.depthwise_conv1d(x, blk["dw"], blk["db"])
            y = ops.linear(ops.gelu(y), blk["pw"], blk["pb"])
            out = ops.add(x, y)
            return ops.mul_const(out, mask[..., None]) if not mask.all() else out
        return ops.add(x, self._recurrent(blk, x))

    def _recurrent(self, blk: dict, x: Tensor) -> Tensor:
        B, l, d = x.shape
        lstm = self.cfg.kind == "recurrent-lstm"
        gates = "ifgo" if lstm else "zrn"
        pre = {gname: ops.linear(x, blk["w" + gname], blk["b" + gname]) for gname in gates}
        h = Tensor.wrap(np.zeros((B, d), dtype=x.dtype))
        c = h
        outs = []
        for t in range(l):
            xt = {gname: ops.reshape(ops.slice_axis(pre[gname], 1, t, t + 1), (B, d)) for gname in gates}
            if lstm:
                i = ops.sigmoid(ops.add(xt["i"], ops.matmul(h, blk["ui"])))
                f = ops.sigmoid(ops.add(xt["f"], ops.matmul(h, blk["uf"])))
                g = ops.tanh(ops.add(xt["g"], ops.matmul(h, blk["ug"])))
                o = ops.sigmoid(ops.add(xt["o"], ops.matmul(h, blk["uo"])))
                c = ops.add(ops.mul(f, c), ops.mul(i, g))
                h = ops.mul(o, ops.tanh(c))
            else:
                z = ops.sigmoid(ops.add(xt["z"], ops.matmul(h, blk["uz"])))
                r = ops.sigmoid(ops.add(xt["r"], ops.matmul(h, blk["ur"])))
                n = ops.tanh(ops.add(xt["n"], ops.mul(r, ops.matmul(h, blk["un"]))))
                h = ops.add(n, ops.mul(z, ops.sub(h, n)))
            outs.append(ops.reshape(h, (B, 1, d)))
        return ops.concat(outs, axis=1)


def modality_encode(encoder: ModalityEncoder, features) -> list[Tensor]:
    """Single-sequence wrapper: (l_m, d_feat) -> list of (l_m, d_m), one per prompting layer."""
    taps = encoder.forward(features)
    return [ops.reshape(t, t.shape[1:]) for t in taps]


# ----------------------------------------------------------------------------
# prediction head

class Head:
    """Affine map of the last real token's final hidden state to one scalar."""

    def __init__(self, d_t: int, rng: RngState | None = None, dtype=DEFAULT_DTYPE, std: float = 0.02):
        w = np.zeros((d_t, 1)) if rng is None else rng.generator("head").standard_normal((d_t, 1)) * std
        self.w = Parameter(w, "head.w", dtype=dtype)
        self.b = Parameter(np.zeros(1), "head.b", dtype=dtype)

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def forward(self, final: Tensor, last_index=None) -> Tensor:
        if final.ndim == 2:
            final = ops.reshape(final, (1,) + final.shape)
        B, l, _ = final.shape
        if l < 1:
            raise ShapeError("head needs at least one token")
        idx = np.full(B, l - 1) if last_index is None else np.asarray(last_index)
        row = ops.gather_last(final, idx)
        return ops.reshape(ops.linear(row, self.w, self.b), (B,))


def predict_head(head: Head, final_states: Tensor, last_index=None) -> Tensor:
    return head.forward(final_states, last_index)
