"""Command-line entry point: ``mmprompt <command> ...``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure,
5 frozen-backbone violation.  ``MMPROMPT_SEED`` overrides the training seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .autograd import no_record
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, ManifestError, generate_synthetic, load_dataset, load_splits
from .metrics import write_metrics_csv, write_metrics_json
from .model import ForwardInfo
from .tensor import NonFiniteError, ShapeError
from .training import (STANDARD_ARMS, FrozenViolation, NumericError, ablate, chance_mae, evaluate_model,
                       load_checkpoint, sign_test_p, summarize_sweep, sweep, train)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_FROZEN = 0, 2, 3, 4, 5

log = logging.getLogger("mmprompt")


# ----------------------------------------------------------------------------
# helpers

def _check_backbone_match(cfg: ExperimentConfig, splits: dict) -> None:
    for split, ds in splits.items():
        recorded = ds.meta.get("backbone")
        if recorded is not None and recorded != asdict(cfg.backbone):
            raise DataError(f"{split} split was generated for backbone {recorded}, "
                            f"config has {asdict(cfg.backbone)}")


def _splits(cfg: ExperimentConfig, data_dir=None, seed_shift: int = 0) -> dict:
    data_dir = data_dir or cfg.data.dir
    if data_dir:
        splits = load_splits(data_dir)
        _check_backbone_match(cfg, splits)
        return splits
    syn = replace(cfg.data.synthetic, seed=cfg.data.synthetic.seed + seed_shift)
    return generate_synthetic(syn, cfg.backbone)


def _dataset(path):
    path = Path(path)
    return load_dataset(path / "test.json" if path.is_dir() else path)


def parse_range(text: str) -> list[int]:
    """``"2..16"`` (inclusive) or ``"1,2,4"``."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise ConfigError(f"bad range {text!r}; use A..B or a comma list") from None


def build_grid(spec: str) -> list[tuple]:
    """Ablation arms as (use_pafis, h_a, h_v, test_a, test_v) tuples.

    ``standard`` gives the eight standard rows; otherwise ``spec`` names the
    factors to vary (``pafis``, ``modalities``, ``test-drop``) and the rest
    stay at the full-model setting.
    """
    if spec == "standard":
        return list(STANDARD_ARMS)
    factors = {f.strip() for f in spec.split(",") if f.strip()}
    unknown = factors - {"pafis", "modalities", "test-drop"}
    if unknown:
        raise ConfigError(f"unknown grid factor(s) {sorted(unknown)}")
    pafis_opts = (True, False) if "pafis" in factors else (True,)
    mod_opts = ((True, True), (True, False), (False, True), (False, False)) if "modalities" in factors \
        else ((True, True),)
    arms = []
    for ha, hv in mod_opts:
        tests = [(ta, tv) for ta in ((True, False) if ha else (False,)) for tv in ((True, False) if hv else (False,))]
        if "test-drop" not in factors:
            tests = [(ha, hv)]
        for pafis in pafis_opts:
            for ta, tv in tests:
                arm = (pafis and (ha or hv), ha, hv, ta, tv)
                if arm not in arms:
                    arms.append(arm)
    return arms


def _write_csv(rows, path) -> None:
    write_metrics_csv(rows, path)


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    syn = cfg.data.synthetic
    generate_synthetic(syn, cfg.backbone, args.out)
    print(json.dumps({"seed": syn.seed, "planted_offset": syn.planted_offset, "sigma": syn.sigma,
                      "label_fn": syn.label_fn, "weights": syn.weights, "out": str(args.out)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir or "run")
    splits = _splits(cfg, args.data)
    res = train(cfg.train, cfg.backbone, cfg.encoders, splits, out, cfg.meta(), log=log.info)
    _dump_json(cfg.to_dict(), out / "config.json")
    rep = res.report
    print(json.dumps({"best_epoch": rep.best_epoch, "steps": rep.steps, "test": rep.final["test"],
                      "out": str(out)}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, tcfg, _ = load_checkpoint(args.checkpoint)
    ds = _dataset(args.data)
    drop = tuple(sorted(set(args.drop or ())))
    missing = [m for m in drop if m not in ds.features]
    if missing:
        raise DataError(f"cannot drop modalities absent from the data: {missing}")
    rep = evaluate_model(model, ds, ds.task, drop=drop, batch_size=tcfg.eval_batch_size)
    if args.out:
        write_metrics_json(rep, args.out)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir or "ablation")
    out.mkdir(parents=True, exist_ok=True)
    arms = build_grid(args.grid)
    seeds = list(range(cfg.train.seed, cfg.train.seed + args.seeds))
    all_rows = []
    for k, seed in enumerate(seeds):
        splits = _splits(cfg, args.data, seed_shift=k)
        rows, _ = ablate(replace(cfg.train, seed=seed), cfg.backbone, cfg.encoders, splits, arms,
                         out / f"seed{seed}" if args.keep_runs else None, cfg.meta(), log=log.info)
        chance = chance_mae(splits["test"].labels, seed) if cfg.train.task == "regression" else None
        for r in rows:
            all_rows.append({"seed": seed, **r} if len(seeds) > 1 else r)
        if chance is not None:
            log.info("seed %d: label-shuffled chance MAE %.4f", seed, chance)
    _write_csv(all_rows, out / "ablation.csv")
    if len(seeds) > 1 and cfg.train.task == "regression":
        _write_csv(_ablation_summary(all_rows, arms, len(seeds)), out / "ablation_summary.csv")
    print(f"wrote {out / 'ablation.csv'} ({len(all_rows)} rows)")
    return EXIT_OK


def _ablation_summary(rows, arms, n_seeds) -> list[dict]:
    """Mean MAE per arm and a one-sided sign test of the full model against it."""
    n_arms = len(arms)
    mae = np.array([[float(rows[s * n_arms + a]["MAE"]) for a in range(n_arms)] for s in range(n_seeds)])
    full = arms.index((True, True, True, True, True)) if (True, True, True, True, True) in arms else None
    out = []
    for a, arm in enumerate(arms):
        row = {k: rows[a][k] for k in ("PaFIS", "h_a", "h_v", "Test_a", "Test_v")}
        row["mean_MAE"] = f"{mae[:, a].mean():.4f}"
        if full is not None and a != full:
            wins = int(np.sum(mae[:, full] < mae[:, a]))
            row["full_wins"] = wins
            row["sign_test_p"] = f"{sign_test_p(wins, n_seeds):.4f}"
        else:
            row["full_wins"], row["sign_test_p"] = "", ""
        out.append(row)
    return out


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    param, spec = args.param
    values = parse_range(spec)
    limit = cfg.backbone.n_layers if param == "prompt_depth" else None
    if param not in ("prompt_length", "prompt_depth"):
        raise ConfigError(f"cannot sweep {param!r}; choose prompt_length or prompt_depth")
    if not values or min(values) < 1 or (limit and max(values) > limit):
        raise ConfigError(f"{param} values {values} out of range")
    out = Path(args.out or cfg.output_dir or "sweep")
    out.mkdir(parents=True, exist_ok=True)
    base_seed = cfg.train.seed
    seeds = list(range(base_seed, base_seed + args.seeds))
    encoders = [replace(e, depth=None) for e in cfg.encoders]
    rows = sweep(cfg.train, cfg.backbone, encoders,
                 lambda s: _splits(cfg, args.data, seed_shift=s - base_seed), param, values, seeds, log=log.info)
    _write_csv(rows, out / "sweep.csv")
    _write_csv(summarize_sweep(rows), out / "sweep_summary.csv")
    print(f"wrote {out / 'sweep.csv'} and {out / 'sweep_summary.csv'}")
    return EXIT_OK


def cmd_inspect_corr(args) -> int:
    model, tcfg, _ = load_checkpoint(args.checkpoint)
    if not model.use_pafis:
        raise ConfigError("checkpoint was trained without correlation-based prompts; nothing to inspect")
    if args.layer not in model.backbone.prompted_layers:
        raise ConfigError(f"layer {args.layer} is not prompted (prompted: {model.backbone.prompted_layers})")
    ds = _dataset(args.data)
    n = len(ds) if args.limit is None else min(args.limit, len(ds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    selections, k_rows, p_rows = [], {}, []
    with no_record():
        for start in range(0, n, tcfg.eval_batch_size):
            batch = ds.batch(np.arange(start, min(n, start + tcfg.eval_batch_size)))
            info = ForwardInfo()
            model.forward(batch, info=info)
            sels, corr, prompts = info.selections[args.layer], info.corr[args.layer], info.prompts[args.layer].data
            for b, sid in enumerate(batch.ids):
                entry = {"sample_id": int(sid), "layer": args.layer, "modalities": {}}
                for m, sel in sels.items():
                    entry["modalities"][m] = {"aligned": sel.aligned, "width": sel.width,
                                              "k_max": np.asarray(sel.k_max[b]).tolist(),
                                              "k_min": np.asarray(sel.k_min[b]).tolist()}
                    K = np.atleast_2d(corr[m][b])
                    for r, krow in enumerate(K):
                        k_rows.setdefault(m, []).append({"sample_id": int(sid), "row": r,
                                                         **{f"off{j}": repr(float(v)) for j, v in enumerate(krow)}})
                selections.append(entry)
                for r, prow in enumerate(prompts[b]):
                    p_rows.append({"sample_id": int(sid), "row": r,
                                   **{f"ch{j}": repr(float(v)) for j, v in enumerate(prow)}})
    _dump_json(selections, out / "selection.json")
    for m, rows in k_rows.items():
        _write_csv(rows, out / f"K_{m}.csv")
    _write_csv(p_rows, out / "prompt.csv")
    print(f"wrote correlation maps, selections and prompts for {n} samples to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmprompt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--data", help="dataset directory (overrides the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="split manifest, or a dataset directory (uses test)")
    p.add_argument("--drop", action="append", metavar="MODALITY", help="zero this modality (repeatable)")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", default="standard", help="'standard' or factors from pafis,modalities,test-drop")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--data")
    p.add_argument("--keep-runs", action="store_true", help="keep each arm's checkpoint and report")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep prompt length or depth")
    p.add_argument("--config", required=True)
    p.add_argument("--param", nargs=2, required=True, metavar=("NAME", "RANGE"),
                   help="prompt_length or prompt_depth, then A..B or a comma list")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--data")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect-corr", help="dump correlation maps, selections and prompts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_inspect_corr)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError, ShapeError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FrozenViolation as exc:
        print(f"frozen backbone violated: {exc}", file=sys.stderr)
        return EXIT_FROZEN


if __name__ == "__main__":
    sys.exit(main())
