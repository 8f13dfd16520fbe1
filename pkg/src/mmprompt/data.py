"""Synthetic multimodal datasets with planted structure, and manifest-based I/O.

Synthetic construction (per sample):

* tokens are drawn uniformly from the vocabulary; the backbone's frozen
  embedding of each token holds, at channel offset ``planted_offset``, a
  window that plays the role of the shared (invariant) latent;
* each modality row is that window (aligned) or a time-resampled copy whose
  temporal mean equals the mean window (unaligned), plus a per-sample
  constant shift ``s_m`` (the modality-specific latent) and Gaussian noise
  of scale ``sigma``.  A constant shift leaves Pearson correlation
  unchanged, so at ``sigma = 0`` the planted window is exactly recoverable;
* the label is ``w_inv * s_inv + w_a * s_a + w_v * s_v + noise`` where
  ``s_inv`` is the standardised mean projection of the token windows onto a
  fixed direction.  Text cannot see ``s_a`` or ``s_v``.

On disk a split is a JSON manifest plus raw little-endian tensor files.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, token_embedding_table
from .tensor import RngState, expected_nbytes, read_tensor_file, write_tensor_file

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class DataError(Exception):
    pass


class MissingFileError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class ManifestError(DataError):
    pass


@dataclass
class ModalitySpec:
    aligned: bool = True
    l_m: int = 16
    d_feat: int = 16


def _default_modalities() -> dict:
    return {"a": ModalitySpec(True, 16, 16), "v": ModalitySpec(False, 11, 16)}


@dataclass
class SyntheticConfig:
    n_train: int = 512
    n_val: int = 64
    n_test: int = 128
    l_t: int = 16
    modalities: dict = field(default_factory=_default_modalities)
    planted_offset: int = 7
    sigma: float = 0.1
    label_fn: str = "linear"
    weights: dict = field(default_factory=lambda: {"inv": 0.8, "a": 0.8, "v": 0.6})
    label_const: float = 0.0
    label_noise: float = 0.2
    task: str = "regression"
    label_range: tuple = (-3.0, 3.0)
    seed: int = 0

    def __post_init__(self):
        self.modalities = {m: s if isinstance(s, ModalitySpec) else ModalitySpec(**s)
                           for m, s in self.modalities.items()}
        self.label_range = tuple(float(x) for x in self.label_range)

    def validate(self, backbone: BackboneConfig) -> None:
        if self.l_t < 1 or self.l_t > backbone.max_len:
            raise ValueError(f"l_t={self.l_t} outside [1, {backbone.max_len}]")
        if self.sigma < 0 or self.label_noise < 0:
            raise ValueError("noise scales must be non-negative")
        for m, spec in self.modalities.items():
            if spec.d_feat >= backbone.d_t:
                raise ValueError(f"modality {m}: d_feat={spec.d_feat} must be < d_t={backbone.d_t}")
            if self.planted_offset < 0 or self.planted_offset > backbone.d_t - spec.d_feat - 1:
                raise ValueError(f"planted offset {self.planted_offset} infeasible for d_feat={spec.d_feat}")
            if spec.aligned and spec.l_m != self.l_t:
                raise ValueError(f"aligned modality {m} needs l_m == l_t ({spec.l_m} != {self.l_t})")
            if spec.l_m < 1:
                raise ValueError(f"modality {m}: l_m must be >= 1")
        if self.label_fn not in ("linear", "constant"):
            raise ValueError(f"unknown label_fn {self.label_fn!r}")
        if self.task not in ("regression", "binary"):
            raise ValueError(f"unknown task {self.task!r}")
        lo, hi = self.label_range
        if not lo < hi:
            raise ValueError("label_range must be increasing")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_range"] = list(self.label_range)
        return d


# ----------------------------------------------------------------------------
# in-memory containers

@dataclass
class Sample:
    id: int
    tokens: np.ndarray
    features: dict
    label: float
    aligned: dict


@dataclass
class ModalityBatch:
    features: np.ndarray
    lengths: np.ndarray
    aligned: bool

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.features.shape[1])[None, :] < self.lengths[:, None]


@dataclass
class Batch:
    ids: np.ndarray
    tokens: np.ndarray
    lengths: np.ndarray
    modalities: dict
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def last_index(self) -> np.ndarray:
        return self.lengths - 1


class Dataset:
    """Padded arrays for one split.  Absent modalities map to ``None``."""

    def __init__(self, ids, tokens, text_lengths, features, feature_lengths, aligned, labels,
                 task="regression", label_range=(-3.0, 3.0), meta: dict | None = None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.text_lengths = np.asarray(text_lengths, dtype=np.int64)
        self.features = dict(features)
        self.feature_lengths = dict(feature_lengths)
        self.aligned = dict(aligned)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.task = task
        self.label_range = tuple(label_range)
        self.meta = dict(meta or {})
        self._check()

    def _check(self) -> None:
        n = len(self.ids)
        if self.tokens.shape[0] != n or self.labels.shape != (n,) or self.text_lengths.shape != (n,):
            raise ShapeMismatchError("text/labels disagree on the number of samples")
        if n and (self.text_lengths.min() < 1 or self.text_lengths.max() > self.tokens.shape[1]):
            raise ShapeMismatchError("text lengths out of range")
        lo, hi = self.label_range
        if n and (self.labels.min() < lo or self.labels.max() > hi):
            raise LabelRangeError(f"labels outside declared range [{lo}, {hi}]")
        if self.task == "binary" and not np.isin(self.labels, (0.0, 1.0)).all():
            raise LabelRangeError("binary task labels must be 0 or 1")
        for m, f in self.features.items():
            if f is None:
                continue
            lens = self.feature_lengths[m]
            if f.shape[0] != n or lens.shape != (n,):
                raise ShapeMismatchError(f"modality {m}: sample count mismatch")
            if n and (lens.min() < 1 or lens.max() > f.shape[1]):
                raise ShapeMismatchError(f"modality {m}: feature lengths out of range")
            if self.aligned[m] and (f.shape[1] != self.tokens.shape[1]
                                    or not np.array_equal(lens, self.text_lengths)):
                raise ShapeMismatchError(f"aligned modality {m} must match text lengths")
            if not np.isfinite(f).all():
                raise DataError(f"modality {m}: non-finite features")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def present_modalities(self) -> list[str]:
        return [m for m, f in self.features.items() if f is not None]

    def __getitem__(self, i: int) -> Sample:
        lt = self.text_lengths[i]
        feats = {}
        for m, f in self.features.items():
            feats[m] = None if f is None else f[i, : self.feature_lengths[m][i]].copy()
        return Sample(int(self.ids[i]), self.tokens[i, :lt].copy(), feats, float(self.labels[i]), dict(self.aligned))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def order(self, shuffle_seed: int | None = None, epoch: int = 0) -> np.ndarray:
        if shuffle_seed is None:
            return np.arange(len(self))
        return RngState(shuffle_seed).generator("shuffle", epoch).permutation(len(self))

    def batch(self, index) -> Batch:
        index = np.asarray(index)
        lt = int(self.text_lengths[index].max())
        mods = {}
        for m, f in self.features.items():
            if f is None:
                continue
            lens = self.feature_lengths[m][index]
            width = lt if self.aligned[m] else int(lens.max())
            mods[m] = ModalityBatch(f[index, :width], lens, self.aligned[m])
        return Batch(self.ids[index], self.tokens[index, :lt], self.text_lengths[index], mods,
                     self.labels[index])

    def batches(self, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0):
        order = self.order(shuffle_seed, epoch)
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])

    def with_zeroed(self, modalities) -> "Dataset":
        feats = {m: (np.zeros_like(f) if (f is not None and m in modalities) else f)
                 for m, f in self.features.items()}
        return Dataset(self.ids, self.tokens, self.text_lengths, feats, self.feature_lengths,
                       self.aligned, self.labels, self.task, self.label_range, self.meta)

    # ------------------------------------------------------------------
    def save(self, out_dir, split: str, dtype: str = "float64") -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ref = lambda name, arr, dt: write_tensor_file(out_dir / f"{split}.{name}.bin", arr, dt)
        manifest = {
            "version": MANIFEST_VERSION,
            "split": split,
            "n_samples": len(self),
            "task": self.task,
            "label_range": list(self.label_range),
            "sample_ids": ref("ids", self.ids, "int64"),
            "text": {
                "tokens": ref("tokens", self.tokens, "int64"),
                "lengths": ref("text_lengths", self.text_lengths, "int64"),
            },
            "labels": ref("labels", self.labels, "float64"),
            "modalities": {},
        }
        for m, f in self.features.items():
            entry = {"aligned": bool(self.aligned[m])}
            if f is None:
                entry.update(d_feat=None, features=None, lengths=None)
            else:
                entry.update(d_feat=int(f.shape[-1]), features=ref(f"feat_{m}", f, dtype),
                             lengths=ref(f"len_{m}", self.feature_lengths[m], "int64"))
            manifest["modalities"][m] = entry
        manifest.update(self.meta)
        path = out_dir / f"{split}.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


# ----------------------------------------------------------------------------
# loading

def _load_ref(base: Path, ref: dict) -> np.ndarray:
    if not isinstance(ref, dict) or not {"path", "shape", "dtype"} <= set(ref):
        raise ManifestError(f"malformed tensor reference: {ref!r}")
    path = base / ref["path"]
    if not path.is_file():
        raise MissingFileError(f"referenced tensor file not found: {path}")
    if path.stat().st_size != expected_nbytes(ref["shape"], ref["dtype"]):
        raise ShapeMismatchError(
            f"{path}: {path.stat().st_size} bytes, expected {expected_nbytes(ref['shape'], ref['dtype'])}")
    return read_tensor_file(path, ref["shape"], ref["dtype"])


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    try:
        man = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: {exc}") from exc
    if man.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {man.get('version')!r}")
    base = manifest_path.parent
    try:
        ids = _load_ref(base, man["sample_ids"])
        tokens = _load_ref(base, man["text"]["tokens"])
        lengths = _load_ref(base, man["text"]["lengths"])
        labels = _load_ref(base, man["labels"])
        feats, flens, aligned = {}, {}, {}
        for m, entry in man["modalities"].items():
            aligned[m] = bool(entry["aligned"])
            if entry.get("features") is None:
                feats[m], flens[m] = None, None
                continue
            feats[m] = _load_ref(base, entry["features"]).astype(np.float64)
            flens[m] = _load_ref(base, entry["lengths"])
    except KeyError as exc:
        raise ManifestError(f"{manifest_path}: missing field {exc}") from exc
    meta = {k: man[k] for k in ("backbone", "generator") if k in man}
    return Dataset(ids, tokens, lengths, feats, flens, aligned, labels,
                   man.get("task", "regression"), man.get("label_range", (-3.0, 3.0)), meta)


def load_splits(data_dir) -> dict:
    data_dir = Path(data_dir)
    return {s: load_dataset(data_dir / f"{s}.json") for s in SPLITS}


# ----------------------------------------------------------------------------
# synthetic generation

def _resample(rows: np.ndarray, n: int) -> np.ndarray:
    """Linear interpolation of (l, d) rows onto ``n`` evenly spaced frames."""
    l = rows.shape[0]
    if l == 1:
        return np.repeat(rows, n, axis=0)
    pos = np.linspace(0.0, l - 1, n)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, l - 1)
    frac = (pos - lo)[:, None]
    return rows[lo] * (1.0 - frac) + rows[hi] * frac


def token_scores(cfg: SyntheticConfig, backbone: BackboneConfig, width: int) -> np.ndarray:
    """Standardised per-token projection of the planted window onto a fixed direction."""
    table = token_embedding_table(backbone)
    o = cfg.planted_offset
    u = RngState(cfg.seed).generator("data", "direction").standard_normal(width)
    u /= np.linalg.norm(u)
    raw = table[:, o:o + width] @ u
    return (raw - raw.mean()) / raw.std()


def generate_synthetic(cfg: SyntheticConfig, backbone: BackboneConfig | None = None,
                       out_dir=None, dtype: str = "float64") -> dict:
    """Build train/val/test splits; write them to ``out_dir`` when given."""
    backbone = backbone or BackboneConfig()
    cfg.validate(backbone)
    table = token_embedding_table(backbone)
    o = cfg.planted_offset
    widths = {spec.d_feat for spec in cfg.modalities.values()} or {16}
    width = min(widths)
    scores = token_scores(cfg, backbone, width)
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    meta = {
        "backbone": asdict(backbone),
        "generator": {"kind": "synthetic", **cfg.to_dict(), "split_sizes": sizes},
    }
    lo, hi = cfg.label_range
    out = {}
    start = 0
    for split in SPLITS:
        n = sizes[split]
        g = RngState(cfg.seed).generator("data", split)
        tokens = g.integers(0, backbone.vocab, size=(n, cfg.l_t))
        s_inv = math.sqrt(cfg.l_t) * scores[tokens].mean(axis=1)
        feats, flens, aligned, spec_latent = {}, {}, {}, {}
        for m in sorted(cfg.modalities):
            spec = cfg.modalities[m]
            s_m = g.standard_normal(n)
            noise = g.standard_normal((n, spec.l_m, spec.d_feat)) * cfg.sigma
            f = np.empty((n, spec.l_m, spec.d_feat))
            for i in range(n):
                windows = table[tokens[i], o:o + spec.d_feat]
                if spec.aligned:
                    rows = windows
                else:
                    frames = _resample(windows, spec.l_m)
                    rows = frames - frames.mean(axis=0) + windows.mean(axis=0)
                f[i] = rows + s_m[i]
            feats[m] = f + noise
            flens[m] = np.full(n, spec.l_m, dtype=np.int64)
            aligned[m] = spec.aligned
            spec_latent[m] = s_m
        label_noise = g.standard_normal(n) * cfg.label_noise
        if cfg.label_fn == "constant":
            y = np.full(n, cfg.label_const) + label_noise
        else:
            y = cfg.weights.get("inv", 0.0) * s_inv + label_noise
            for m, s_m in spec_latent.items():
                y = y + cfg.weights.get(m, 0.0) * s_m
        if cfg.task == "binary":
            y = (y > 0).astype(np.float64)
            label_range = (0.0, 1.0)
        else:
            y = np.clip(y, lo, hi)
            label_range = cfg.label_range
        ds = Dataset(np.arange(start, start + n), tokens, np.full(n, cfg.l_t), feats, flens, aligned, y,
                     cfg.task, label_range, meta)
        start += n
        if out_dir is not None:
            ds.save(out_dir, split, dtype)
        out[split] = ds
    return out
