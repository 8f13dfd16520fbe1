"""Losses, Adam, the training loop, checkpoints, and the ablation/sweep drivers."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .autograd import Tape, backward
from .backbone import BackboneConfig, ModalityEncoderConfig
from .metrics import MetricReport, evaluate
from .model import PromptedModel
from .tensor import FLOAT_DTYPES, NonFiniteError, check_finite, read_tensor_file, write_tensor_file

CHECKPOINT_VERSION = 1


class FrozenViolation(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 40
    patience: int = 5
    seed: int = 0
    task: str = "regression"
    use_pafis: bool = True
    use_modality_a: bool = True
    use_modality_v: bool = True
    test_drop_a: bool = False
    test_drop_v: bool = False
    prompt_length: int = 8
    prompt_depth: int = 3
    prompt_init_std: float = 0.02
    encoder_init: str = "identity"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 64
    dtype: str = "float64"

    def validate(self, n_layers: int) -> None:
        if not 1 <= self.prompt_depth <= n_layers:
            raise ValueError(f"prompt_depth must be in [1, {n_layers}]")
        if self.prompt_length < 1:
            raise ValueError("prompt_length must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.task not in ("regression", "binary"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.dtype not in FLOAT_DTYPES:
            raise ValueError(f"dtype must be one of {sorted(FLOAT_DTYPES)}")
        if self.encoder_init not in ("random", "identity", "zeros"):
            raise ValueError(f"unknown encoder_init {self.encoder_init!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @property
    def test_drop(self) -> tuple:
        return tuple(m for m, on in (("a", self.test_drop_a), ("v", self.test_drop_v)) if on)


# ----------------------------------------------------------------------------
# losses

def rmse_loss(preds, labels):
    return ops.rmse_loss(preds, labels)


def bce_loss(logits, labels):
    return ops.bce_with_logits(logits, labels)


def loss_for(task: str):
    return rmse_loss if task == "regression" else bce_loss


# ----------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            m = self.beta1 * self.m[p.name] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[p.name] + (1.0 - self.beta2) * g * g
            self.m[p.name], self.v[p.name] = m, v
            p.assign(p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


def build_model(backbone_cfg: BackboneConfig, encoder_cfgs, cfg: TrainConfig) -> PromptedModel:
    keep = {"a": cfg.use_modality_a, "v": cfg.use_modality_v}
    encs = [replace(e) for e in encoder_cfgs if keep.get(e.modality, True)]
    return PromptedModel(backbone_cfg, encs, cfg.prompt_length, cfg.prompt_depth, cfg.use_pafis,
                         cfg.seed, FLOAT_DTYPES[cfg.dtype], cfg.prompt_init_std, cfg.encoder_init)


def evaluate_model(model: PromptedModel, dataset, task: str = "regression", drop=(),
                   batch_size: int = 64) -> MetricReport:
    preds = model.predict(dataset, batch_size=batch_size, drop=drop)
    return evaluate(preds, dataset.labels, task, dataset.label_range)


@dataclass
class TrainReport:
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float | None = None
    restored_val: float | None = None
    stopped_early: bool = False
    steps: int = 0
    final: dict = field(default_factory=dict)
    backbone_checksum_pre: str = ""
    backbone_checksum_post: str = ""
    trainable_parameters: list = field(default_factory=list)
    n_trainable: int = 0
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_s")
        return d

    def to_json(self) -> str:
        """Deterministic serialisation (wall-clock time is left out)."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class TrainResult:
    report: TrainReport
    model: PromptedModel


def train(cfg: TrainConfig, backbone_cfg: BackboneConfig, encoder_cfgs, splits: dict,
          out_dir=None, meta: dict | None = None, log=None) -> TrainResult:
    """Fit prompts, encoders and head on ``splits['train']`` with early stopping on ``splits['val']``."""
    cfg.validate(backbone_cfg.n_layers)
    t0 = time.perf_counter()
    model = build_model(backbone_cfg, encoder_cfgs, cfg)
    train_ds, val_ds, test_ds = splits["train"], splits["val"], splits["test"]
    loss_fn = loss_for(cfg.task)
    evalb = cfg.eval_batch_size

    report = TrainReport(config={"train": asdict(cfg), "backbone": asdict(backbone_cfg),
                                 "encoders": [asdict(e) for e in encoder_cfgs], **(meta or {})})
    report.backbone_checksum_pre = model.backbone_checksum()
    params = model.trainable_parameters()
    report.trainable_parameters = [p.name for p in params]
    report.n_trainable = int(sum(p.size for p in params))
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    val0 = evaluate_model(model, val_ds, cfg.task, batch_size=evalb)
    report.epochs.append({"epoch": 0, "train_loss": None, "val": val0.to_dict()})
    best_score, best_epoch, best_snap = val0.primary(cfg.task), 0, model.snapshot()
    bad = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for batch in train_ds.batches(cfg.batch_size, shuffle_seed=cfg.seed, epoch=epoch):
            try:
                with Tape() as tape:
                    preds = model.forward(batch)
                    loss = loss_fn(preds, batch.labels)
                grads = backward(loss, tape)
            except NonFiniteError as exc:
                raise NumericError(f"epoch {epoch}, step {report.steps + 1}: {exc}") from exc
            opt.step(grads)
            report.steps += 1
            losses.append(loss.item())
        val = evaluate_model(model, val_ds, cfg.task, batch_size=evalb)
        report.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val": val.to_dict()})
        if log:
            log(f"epoch {epoch:3d}  train_loss {np.mean(losses):.4f}  val {val.primary(cfg.task):.4f}")
        score = val.primary(cfg.task)
        if score < best_score:
            best_score, best_epoch, best_snap, bad = score, epoch, model.snapshot(), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                report.stopped_early = True
                break

    model.restore(best_snap)
    report.best_epoch = best_epoch
    report.best_val = float(best_score)
    final_val = evaluate_model(model, val_ds, cfg.task, batch_size=evalb)
    report.restored_val = float(final_val.primary(cfg.task))
    report.final = {
        "train": evaluate_model(model, train_ds, cfg.task, batch_size=evalb).to_dict(),
        "val": final_val.to_dict(),
        "test": evaluate_model(model, test_ds, cfg.task, drop=cfg.test_drop, batch_size=evalb).to_dict(),
    }
    report.backbone_checksum_post = model.backbone_checksum()
    if report.backbone_checksum_post != report.backbone_checksum_pre:
        raise FrozenViolation("backbone weights changed during training")
    report.wall_clock_s = time.perf_counter() - t0
    if out_dir is not None:
        write_run(report, model, out_dir, cfg, backbone_cfg, encoder_cfgs, meta)
    return TrainResult(report, model)


def write_run(report: TrainReport, model, out_dir, cfg, backbone_cfg, encoder_cfgs, meta=None) -> None:
    from .metrics import write_metrics_csv

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "timing.json").write_text(json.dumps({"wall_clock_s": report.wall_clock_s}) + "\n")
    rows = [{"split": s, **MetricReport(**report.final[s]).csv_row()} for s in ("train", "val", "test")]
    write_metrics_csv(rows, out_dir / "metrics.csv")
    save_checkpoint(model, out_dir / "checkpoint", cfg, backbone_cfg, encoder_cfgs, meta)


# ----------------------------------------------------------------------------
# checkpoints: directory of raw tensor files + manifest.json

def save_checkpoint(model: PromptedModel, path, cfg: TrainConfig, backbone_cfg: BackboneConfig,
                    encoder_cfgs, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in model.parameters():
        fname = p.name.replace("/", "_") + ".bin"
        ref = write_tensor_file(path / fname, p.data, cfg.dtype)
        entries.append({"name": p.name, "trainable": bool(p.trainable), **ref})
    manifest = {
        "version": CHECKPOINT_VERSION,
        "train": asdict(cfg),
        "backbone": asdict(backbone_cfg),
        "encoders": [asdict(e) for e in encoder_cfgs],
        "root_seed": cfg.seed,
        "backbone_checksum": model.backbone_checksum(),
        "parameters": entries,
        **(meta or {}),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Rebuild a model from a checkpoint directory.  Returns ``(model, TrainConfig, manifest)``."""
    path = Path(path)
    man = json.loads((path / "manifest.json").read_text())
    cfg = TrainConfig(**man["train"])
    backbone_cfg = BackboneConfig(**man["backbone"])
    encoders = [ModalityEncoderConfig(**e) for e in man["encoders"]]
    model = build_model(backbone_cfg, encoders, cfg)
    named = model.named_parameters()
    for e in man["parameters"]:
        p = named[e["name"]]
        p.assign(read_tensor_file(path / e["path"], e["shape"], e["dtype"]))
    if model.backbone_checksum() != man["backbone_checksum"]:
        raise FrozenViolation("checkpoint backbone does not match its recorded checksum")
    return model, cfg, man


# ----------------------------------------------------------------------------
# ablation and sweeps

# (use_pafis, h_a, h_v, test_a, test_v): the eight ablation rows
STANDARD_ARMS = (
    (False, False, False, False, False),
    (True, True, False, True, False),
    (True, False, True, False, True),
    (False, True, True, True, True),
    (True, True, True, False, False),
    (True, True, True, True, False),
    (True, True, True, False, True),
    (True, True, True, True, True),
)


def sign_test_p(wins: int, n: int) -> float:
    """One-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2)."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


def chance_mae(labels, seed: int = 0, n_perm: int = 20) -> float:
    """MAE of predicting each sample with a randomly permuted label (label-shuffled baseline)."""
    from .tensor import RngState

    y = np.asarray(labels, dtype=np.float64)
    g = RngState(seed).generator("chance")
    return float(np.mean([np.mean(np.abs(y[g.permutation(y.size)] - y)) for _ in range(n_perm)]))


def _arm_row(arm, rep: MetricReport, task: str) -> dict:
    pafis, ha, hv, ta, tv = arm
    mark = lambda x: "x" if x else ""
    row = {"PaFIS": mark(pafis), "h_a": mark(ha), "h_v": mark(hv), "Test_a": mark(ta), "Test_v": mark(tv)}
    c = rep.csv_row()
    if task == "regression":
        row.update({"MAE": c["mae"], "Corr": c["corr"], "Acc-2": c["acc2"], "F1": c["f1"], "Acc-7": c["acc7"]})
    else:
        row.update({"Acc-2": c["acc2"], "F1": c["f1"], "Pre": c["precision"], "Rec": c["recall"]})
    return row


def ablate(base: TrainConfig, backbone_cfg: BackboneConfig, encoder_cfgs, splits: dict,
           arms=STANDARD_ARMS, out_dir=None, meta=None, log=None):
    """Train each distinct (PaFIS, h_a, h_v) arm once; evaluate every requested test-time drop.

    Returns ``(rows, reports)``: one table row per arm and the TrainReports
    keyed by the training arm.
    """
    reports, models, rows = {}, {}, []
    for arm in arms:
        pafis, ha, hv, ta, tv = arm
        key = (pafis, ha, hv)
        if key not in models:
            cfg = replace(base, use_pafis=pafis, use_modality_a=ha, use_modality_v=hv,
                          test_drop_a=False, test_drop_v=False)
            sub = None if out_dir is None else Path(out_dir) / f"arm_pafis{int(pafis)}_a{int(ha)}_v{int(hv)}"
            res = train(cfg, backbone_cfg, encoder_cfgs, splits, sub, meta)
            reports[key], models[key] = res.report, res.model
            if log:
                log(f"trained arm {key}: best epoch {res.report.best_epoch}")
        drop = tuple(m for m, used, kept in (("a", ha, ta), ("v", hv, tv)) if used and not kept)
        rep = evaluate_model(models[key], splits["test"], base.task, drop=drop, batch_size=base.eval_batch_size)
        rows.append(_arm_row(arm, rep, base.task))
    return rows, reports


def sweep(base: TrainConfig, backbone_cfg: BackboneConfig, encoder_cfgs, splits_for_seed, param: str,
          values, seeds, log=None) -> list[dict]:
    """Train once per (value, seed); rows hold train and test metrics for each run.

    ``splits_for_seed(seed)`` returns the data splits for that seed.
    """
    if param not in ("prompt_length", "prompt_depth"):
        raise ValueError(f"cannot sweep {param!r}")
    rows = []
    for seed in seeds:
        splits = splits_for_seed(seed)
        for v in values:
            cfg = replace(base, seed=seed, **{param: int(v)})
            rep = train(cfg, backbone_cfg, encoder_cfgs, splits).report
            row = {"param": param, "value": int(v), "seed": seed, "best_epoch": rep.best_epoch}
            key = "mae" if base.task == "regression" else "acc2"
            for split in ("train", "val", "test"):
                row[f"{split}_{key}"] = rep.final[split][key]
            rows.append(row)
            if log:
                log(f"{param}={v} seed={seed}: test_{key}={row[f'test_{key}']:.4f}")
    return rows


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Mean over seeds of every metric column, one row per swept value."""
    values = sorted({r["value"] for r in rows})
    metric_cols = [k for k in rows[0] if k.endswith(("_mae", "_acc2"))]
    out = []
    for v in values:
        sel = [r for r in rows if r["value"] == v]
        out.append({"param": sel[0]["param"], "value": v, "n_seeds": len(sel),
                    **{k: float(np.mean([r[k] for r in sel])) for k in metric_cols}})
    return out
