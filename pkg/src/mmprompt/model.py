"""The prompted model: frozen backbone, learnable prompts, modality encoders, head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Parameter
from .backbone import Backbone, BackboneConfig, Head, ModalityEncoder, ModalityEncoderConfig, lengths_mask
from .data import Batch
from .pafis import ModalityState, ordered, pafis_batch, pool_batch
from .tensor import DEFAULT_DTYPE, RngState, Tensor, digest_arrays


@dataclass
class ForwardInfo:
    selections: dict = field(default_factory=dict)
    corr: dict = field(default_factory=dict)
    prompts: dict = field(default_factory=dict)
    states: object = None


class PromptedModel:
    """Prompt tuning with modality information injected per prompted layer.

    With ``use_pafis`` the prompts are assembled by correlation-based
    selection.  Without it, the prompts stay plain learnable prefixes and
    each modality state is instead zero-padded to ``d_t`` at a fixed random
    channel offset and added onto the text hidden states (time-pooled and
    added to every row when the modality is unaligned).
    """

    def __init__(self, backbone_cfg: BackboneConfig, encoder_cfgs=(), prompt_length: int = 8,
                 prompt_depth: int = 3, use_pafis: bool = True, seed: int = 0,
                 dtype=DEFAULT_DTYPE, prompt_init_std: float = 0.02, encoder_init: str = "random"):
        if prompt_length < 1:
            raise ValueError("prompt length must be >= 1")
        encoder_cfgs = list(encoder_cfgs)
        backbone_cfg.validate([c.d_m for c in encoder_cfgs])
        self.backbone = Backbone(backbone_cfg, prompt_depth, dtype)
        self.backbone.freeze()
        self.prompt_length = prompt_length
        self.prompt_depth = prompt_depth
        self.use_pafis = use_pafis
        self.seed = seed
        rng = RngState(seed)
        d_t = backbone_cfg.d_t
        self.prompts: dict[int, Parameter] = {}
        for i in self.backbone.prompted_layers:
            value = rng.generator("init", "prompt", i).standard_normal((prompt_length, d_t)) * prompt_init_std
            self.prompts[i] = Parameter(value, f"prompt.layer{i}", dtype=dtype)
        self.encoders: dict[str, ModalityEncoder] = {}
        for c in encoder_cfgs:
            c.validate(prompt_depth)
            enc_rng = RngState(c.seed) if c.seed is not None else rng
            self.encoders[c.modality] = ModalityEncoder(c, prompt_depth, enc_rng, encoder_init, dtype)
        self.head = Head(d_t, rng, dtype)
        self.direct_offsets = {}
        for m, enc in self.encoders.items():
            for i in self.backbone.prompted_layers:
                g = rng.generator("direct-offset", m, i)
                self.direct_offsets[(m, i)] = int(g.integers(0, d_t - enc.cfg.d_m + 1))

    # ------------------------------------------------------------------
    def trainable_parameters(self) -> list[Parameter]:
        out = [self.prompts[i] for i in sorted(self.prompts)]
        for m in sorted(self.encoders):
            out.extend(self.encoders[m].parameters())
        out.extend(self.head.parameters())
        return [p for p in out if p.trainable]

    def parameters(self) -> list[Parameter]:
        out = self.backbone.parameters() + [self.prompts[i] for i in sorted(self.prompts)]
        for m in sorted(self.encoders):
            out.extend(self.encoders[m].parameters())
        return out + self.head.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def backbone_checksum(self) -> str:
        return self.backbone.checksum()

    def trainable_checksum(self) -> str:
        return digest_arrays([(p.name, p.data) for p in self.trainable_parameters()])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.trainable_parameters()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for p in self.trainable_parameters():
            p.assign(snap[p.name])

    # ------------------------------------------------------------------
    def _direct_add(self, h: Tensor, st: ModalityState, offset: int, text_mask: np.ndarray) -> Tensor:
        B, l, _ = h.shape
        if st.aligned:
            vals = st.h
            if not text_mask.all():
                vals = ops.mul_const(vals, text_mask[..., None])
        else:
            pooled = pool_batch(st.h, st.mask)
            vals = ops.broadcast_to(ops.reshape(pooled, (B, 1, pooled.shape[-1])), (B, l, pooled.shape[-1]))
        return ops.scatter_windows(h, vals, np.arange(l), np.full((B, l), offset))

    def forward(self, batch: Batch, drop=(), fixed: dict | None = None, info: ForwardInfo | None = None) -> Tensor:
        """Predictions (B,) for a batch; ``drop`` zeroes those modality features.

        ``fixed`` maps prompted layer -> {modality: SelectionMap} to reuse a
        previous selection.  ``info`` (if given) is filled with selections,
        correlation maps, prompts and the backbone states.
        """
        text_mask = lengths_mask(batch.lengths, batch.tokens.shape[1])
        taps = {}
        for m, enc in self.encoders.items():
            mod = batch.modalities.get(m)
            if mod is None:
                continue
            feats = np.zeros_like(mod.features) if m in drop else mod.features
            taps[m] = (enc.forward(Tensor.wrap(np.asarray(feats, dtype=enc.w_in.dtype)), mod.mask), mod)
        first = self.backbone.prompted_layers[0] if self.prompt_depth else None

        def hook(i, h):
            j = i - first
            states = [ModalityState(m, t[j], mod.aligned, mod.mask) for m, (t, mod) in taps.items()]
            if self.use_pafis:
                p, sels = pafis_batch(self.prompts[i], h, states, text_mask, (fixed or {}).get(i))
                if info is not None:
                    info.selections[i] = sels
                    info.corr[i] = {m: s.corr for m, s in sels.items()}
            else:
                p = ops.broadcast_to(self.prompts[i], (h.shape[0],) + self.prompts[i].shape)
                for st in ordered(states):
                    h = self._direct_add(h, st, self.direct_offsets[(st.name, i)], text_mask)
            if info is not None:
                info.prompts[i] = p
            return h, p

        states = self.backbone.forward(batch.tokens, batch.lengths, hook=hook)
        if info is not None:
            info.states = states
        return self.head.forward(states.final, batch.last_index)

    def predict(self, dataset, batch_size: int = 64, drop=()) -> np.ndarray:
        from .autograd import no_record
        out = []
        with no_record():
            for b in dataset.batches(batch_size):
                out.append(self.forward(b, drop=drop).data)
        return np.concatenate(out) if out else np.zeros(0)
