"""Parameter-free invariant/specific prompt generation.

For each modality the text hidden states are scanned with a window of the
modality's width.  The window most Pearson-correlated with the modality
states supplies the *invariant* part, the least correlated one the
*specific* part, and both are added onto the learnable prompt:

    p[c_max] += h_m + h_t[c_max]
    p[c_min] += h_m - h_t[c_min]

Selection is discrete and computed on detached values; gradients reach the
prompt, the modality states and the text states only through the additions.

Conventions fixed here:

* window offsets run over ``0 .. d_t - d_m - 1`` (``d_t - d_m`` of them);
* ties in argmax/argmin go to the smallest offset;
* a zero-variance argument makes the correlation 0;
* aligned token ``j`` writes into prompt row ``j % l_p``; unaligned
  (time-pooled) contributions go to every prompt row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

# centred sum of squares below this fraction of the raw one counts as constant
_DEGENERATE_RTOL = 1e-24
MODALITY_ORDER = ("a", "v")


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _pearson_last(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pearson r along the last axis, broadcasting ``x`` against ``w``."""
    xc = x - x.mean(axis=-1, keepdims=True)
    wc = w - w.mean(axis=-1, keepdims=True)
    sxx = (xc * xc).sum(axis=-1)
    sww = (wc * wc).sum(axis=-1)
    sxy = (xc * wc).sum(axis=-1)
    flat_x = (x * x).sum(axis=-1) * _DEGENERATE_RTOL
    flat_w = (w * w).sum(axis=-1) * _DEGENERATE_RTOL
    ok = (sxx > flat_x) & (sww > flat_w)
    den = np.sqrt(np.where(ok, sxx * sww, 1.0))
    r = np.where(ok, sxy / den, 0.0)
    return np.clip(r, -1.0, 1.0)


def window_pearson(x, w) -> float:
    x, w = _arr(x), _arr(w)
    if x.shape != w.shape or x.ndim != 1 or x.shape[0] < 2:
        raise ShapeError(f"window_pearson needs two equal vectors of length >= 2, got {x.shape}, {w.shape}")
    return float(_pearson_last(x, w))


def _windows(h_t: np.ndarray, width: int) -> np.ndarray:
    """All channel windows of width ``width``: (..., d_t) -> (..., n_off, width)."""
    n_off = h_t.shape[-1] - width
    if n_off < 1:
        raise ShapeError(f"modality width {width} must be smaller than text width {h_t.shape[-1]}")
    return np.lib.stride_tricks.sliding_window_view(h_t, width, axis=-1)[..., :n_off, :]


def correlation_windows(h_m: np.ndarray, h_t: np.ndarray) -> np.ndarray:
    """K[..., j] = pearson(h_m[...], h_t[..., j:j+d_m]) with matching leading axes."""
    return _pearson_last(h_m[..., None, :], _windows(h_t, h_m.shape[-1]))


@dataclass
class SelectionMap:
    """Best/worst window offsets.  Per token when aligned, one per sample when pooled."""

    k_max: np.ndarray
    k_min: np.ndarray
    width: int
    corr: np.ndarray
    aligned: bool = True

    @property
    def c_max(self) -> np.ndarray:
        return np.asarray(self.k_max)[..., None] + np.arange(self.width)

    @property
    def c_min(self) -> np.ndarray:
        return np.asarray(self.k_min)[..., None] + np.arange(self.width)

    def to_dict(self) -> dict:
        return {
            "aligned": self.aligned,
            "width": self.width,
            "k_max": np.asarray(self.k_max).tolist(),
            "k_min": np.asarray(self.k_min).tolist(),
        }


def select_channels(K, width: int, aligned: bool = True) -> SelectionMap:
    """Argmax/argmin of K over its last (offset) axis; numpy's first-hit rule gives smallest-offset ties."""
    K = _arr(K)
    if not np.isfinite(K).all():
        raise ValueError("correlation map contains non-finite values")
    return SelectionMap(np.argmax(K, axis=-1), np.argmin(K, axis=-1), width, K, aligned)


# ----------------------------------------------------------------------------
# batched core: h_t (B, l, d_t), h_m (B, l_m, d_m), prompts (B, l_p, d_t)

def corr_aligned_batch(h_m: Tensor, h_t: Tensor) -> np.ndarray:
    if h_m.shape[:2] != h_t.shape[:2]:
        raise ShapeError(
            f"aligned modality has {h_m.shape[1]} rows but text has {h_t.shape[1]}; use the unaligned path")
    return correlation_windows(h_m.data, h_t.data)


def assemble_aligned_batch(p: Tensor, h_t: Tensor, h_m: Tensor, sel: SelectionMap,
                           mask: np.ndarray | None = None) -> Tensor:
    width = h_m.shape[-1]
    l = h_t.shape[1]
    l_p = p.shape[1]
    inv = ops.gather_windows(h_t, sel.k_max, width)
    spe = ops.gather_windows(h_t, sel.k_min, width)
    v_max = ops.add(h_m, inv)
    v_min = ops.sub(h_m, spe)
    if mask is not None and not mask.all():
        keep = mask[..., None]
        v_max = ops.mul_const(v_max, keep)
        v_min = ops.mul_const(v_min, keep)
    rows = np.arange(l) % l_p
    p = ops.scatter_windows(p, v_max, rows, sel.k_max)
    return ops.scatter_windows(p, v_min, rows, sel.k_min)


def pool_batch(h: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return ops.reduce_mean(h, axis=1)
    return ops.masked_mean(h, mask)


def corr_unaligned_batch(h_m_bar: Tensor, h_t_bar: Tensor) -> np.ndarray:
    return correlation_windows(h_m_bar.data, h_t_bar.data)


def assemble_unaligned_batch(p: Tensor, h_t_bar: Tensor, h_m_bar: Tensor, sel: SelectionMap) -> Tensor:
    B, l_p, _ = p.shape
    width = h_m_bar.shape[-1]
    t3 = ops.reshape(h_t_bar, (B, 1, h_t_bar.shape[-1]))
    m3 = ops.reshape(h_m_bar, (B, 1, width))
    k_max = np.asarray(sel.k_max).reshape(B, 1)
    k_min = np.asarray(sel.k_min).reshape(B, 1)
    v_max = ops.broadcast_to(ops.add(m3, ops.gather_windows(t3, k_max, width)), (B, l_p, width))
    v_min = ops.broadcast_to(ops.sub(m3, ops.gather_windows(t3, k_min, width)), (B, l_p, width))
    rows = np.arange(l_p)
    p = ops.scatter_windows(p, v_max, rows, np.repeat(k_max, l_p, axis=1))
    return ops.scatter_windows(p, v_min, rows, np.repeat(k_min, l_p, axis=1))


@dataclass
class ModalityState:
    """One modality's encoded states for one prompting layer."""

    name: str
    h: Tensor
    aligned: bool
    mask: np.ndarray | None = None


def ordered(states):
    rank = {m: i for i, m in enumerate(MODALITY_ORDER)}
    return sorted(states, key=lambda s: (rank.get(s.name, len(rank)), s.name))


def pafis_batch(p_tilde: Tensor, h_t: Tensor, states, text_mask: np.ndarray | None = None,
                fixed: dict | None = None):
    """Assemble prompts for a batch.

    ``p_tilde`` is (l_p, d_t) and is broadcast over the batch.  Modalities are
    applied in the order a, v, then others by name.  ``fixed`` maps a modality
    name to a precomputed SelectionMap (used to hold selection constant, e.g.
    in finite-difference checks).  Returns ``(p, selections)``.
    """
    B, _, d_t = h_t.shape
    p = ops.broadcast_to(p_tilde, (B,) + p_tilde.shape)
    selections = {}
    for st in ordered(states):
        width = st.h.shape[-1]
        if width >= d_t:
            raise ShapeError(f"modality {st.name}: d_m={width} must be < d_t={d_t}")
        sel = fixed.get(st.name) if fixed else None
        if st.aligned:
            if sel is None:
                sel = select_channels(corr_aligned_batch(st.h, h_t), width, aligned=True)
            mask = st.mask if st.mask is not None else text_mask
            p = assemble_aligned_batch(p, h_t, st.h, sel, mask)
        else:
            h_m_bar = pool_batch(st.h, st.mask)
            h_t_bar = pool_batch(h_t, text_mask)
            if sel is None:
                sel = select_channels(corr_unaligned_batch(h_m_bar, h_t_bar), width, aligned=False)
            p = assemble_unaligned_batch(p, h_t_bar, h_m_bar, sel)
        selections[st.name] = sel
    return p, selections


# ----------------------------------------------------------------------------
# single-sample API

def _one(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return ops.reshape(x, (1,) + x.shape)


def corr_map_aligned(h_m, h_t) -> np.ndarray:
    """(l, d_m) x (l, d_t) -> K of shape (l, d_t - d_m)."""
    h_m, h_t = _arr(h_m), _arr(h_t)
    if h_m.shape[0] != h_t.shape[0]:
        raise ShapeError(
            f"aligned modality has {h_m.shape[0]} rows but text has {h_t.shape[0]}; use the unaligned path")
    return correlation_windows(h_m, h_t)


def corr_map_unaligned(h_m, h_t):
    """Pool both over time, then correlate.  Returns ``(K, h_m_bar, h_t_bar)``."""
    h_m_bar = _arr(h_m).mean(axis=0)
    h_t_bar = _arr(h_t).mean(axis=0)
    return correlation_windows(h_m_bar, h_t_bar), h_m_bar, h_t_bar


def assemble_aligned(p_tilde, h_t, h_m, sel: SelectionMap) -> Tensor:
    sel1 = SelectionMap(np.reshape(sel.k_max, (1, -1)), np.reshape(sel.k_min, (1, -1)),
                        sel.width, sel.corr, True)
    out = assemble_aligned_batch(_one(p_tilde), _one(h_t), _one(h_m), sel1)
    return ops.reshape(out, out.shape[1:])


def assemble_unaligned(p_tilde, sel: SelectionMap, h_m_bar, h_t_bar) -> Tensor:
    p = _one(p_tilde)
    sel1 = SelectionMap(np.reshape(sel.k_max, (1,)), np.reshape(sel.k_min, (1,)), sel.width, sel.corr, False)
    out = assemble_unaligned_batch(p, _one(h_t_bar), _one(h_m_bar), sel1)
    return ops.reshape(out, out.shape[1:])


def pafis(h_t, p_tilde, modalities: dict | None = None):
    """Prompt for one sample and one layer.

    ``modalities`` maps a name to ``(h_m, aligned)``; absent modalities are
    simply left out.  Returns ``(p, selections)``.
    """
    h_t = h_t if isinstance(h_t, Tensor) else Tensor(h_t)
    p_tilde = p_tilde if isinstance(p_tilde, Tensor) else Tensor(p_tilde)
    states = []
    for name, (h_m, aligned) in (modalities or {}).items():
        h_m = h_m if isinstance(h_m, Tensor) else Tensor(h_m)
        states.append(ModalityState(name, _one(h_m), bool(aligned)))
    p, sels = pafis_batch(p_tilde, _one(h_t), states)
    return ops.reshape(p, p.shape[1:]), sels
