"""Command-line drivers: train, eval, footprint, compare, curve.

Configuration is a flat ``key=value`` file (``#`` starts a comment); flags
and ``--set key=value`` override it, last one wins.

Output CSV columns:
  history.csv  epoch,lr,train_loss,val_loss,val_acc
  curve.csv    n,acc,delta_vs_fp32,size_kb
  compare.csv  benchmark,template,delta_pct,members,size_kb,savings_pct

TNET_THREADS caps how many sweep points ``curve`` trains in parallel.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from .data import Dataset, DatasetError, load_cifar10, load_grayscale_csv, synth_dataset
from .ensemble import (
    bagging_predict,
    bagging_train,
    boost_predict,
    boost_train,
    compare_report,
    write_compare_csv,
)
from .model import NetworkSpec, build_tentaclenet, footprint
from .modelio import ModelFormatError, load_model, save_model
from .train import TrainConfig, evaluate, train

log = logging.getLogger("tentaclenet")

TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
KEYS = {
    "spec", "dataset", "tentacles", "seeds", "seed", "out", "model", "fp32_acc",
    "train_fp32", "fusion", "benchmark", "synth_contrast", "synth_train", "synth_test", "image_height", "image_width",
} | set(TRAIN_KEYS)
CURVE_COLUMNS = ["n", "acc", "delta_vs_fp32", "size_kb"]


class ConfigError(ValueError):
    pass


def packaged_spec(name: str) -> Path:
    return Path(str(resources.files("tentaclenet") / "specs" / f"{name}.json"))


def parse_config(text: str, origin: str = "<config>") -> dict[str, str]:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin} line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{origin} line {lineno}: unknown key {key!r}")
        cfg[key] = value
    return cfg


def int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from exc
    if not vals or any(b <= a for a, b in zip(vals, vals[1:])) or vals[0] < 1:
        raise ConfigError(f"list must be nonempty, positive and strictly increasing: {text!r}")
    return vals


def train_config(cfg: dict, seed: int) -> TrainConfig:
    kw = {}
    for key, typ in TRAIN_KEYS.items():
        if key in cfg and key != "seed":
            raw = cfg[key]
            try:
                if typ in ("bool", bool):
                    kw[key] = str(raw).lower() in ("1", "true", "yes", "on")
                elif typ in ("int", int):
                    kw[key] = int(raw)
                else:
                    kw[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return TrainConfig(seed=seed, **kw)


def load_dataset(cfg: dict, seed: int) -> Dataset:
    kind = cfg.get("dataset", "synth")
    if kind == "synth":
        kw = {"n_train": int(cfg.get("synth_train", 3000)), "n_test": int(cfg.get("synth_test", 600))}
        if "synth_contrast" in cfg:
            kw["contrast"] = float(cfg["synth_contrast"])
        return synth_dataset(seed, **kw)
    if kind.startswith("cifar10:"):
        return load_cifar10(kind.split(":", 1)[1])
    if kind.startswith("csv:"):
        h, w = int(cfg.get("image_height", 48)), int(cfg.get("image_width", 48))
        return load_grayscale_csv(kind.split(":", 1)[1], h, w)
    raise ConfigError(f"unknown dataset {kind!r}; use cifar10:DIR, csv:PATH or synth")


def load_spec(cfg: dict) -> NetworkSpec:
    path = cfg.get("spec")
    if path is None:
        if cfg.get("dataset", "synth") != "synth":
            raise ConfigError("spec is required for this dataset")
        path = packaged_spec("synth_tiny")
    if not Path(path).exists():
        candidate = packaged_spec(str(path))
        if not candidate.exists():
            raise FileNotFoundError(f"spec file not found: {path}")
        path = candidate
    return NetworkSpec.load(path)


def renormalize(x: np.ndarray, ds: Dataset, meta: dict) -> np.ndarray:
    """Map samples normalized with ``ds`` constants onto those in a model's metadata."""
    if "norm_mean" not in meta:
        return x
    mean = np.asarray(meta["norm_mean"], np.float32)[None, :, None, None]
    std = np.asarray(meta["norm_std"], np.float32)[None, :, None, None]
    raw = x * ds.std[None, :, None, None] + ds.mean[None, :, None, None]
    return ((raw - mean) / std).astype(np.float32)


def train_split(ds: Dataset):
    x, y = ds.subset("train")
    if ds.has("val"):
        return x, y, *ds.subset("val")
    return x, y, None, None


def test_split(ds: Dataset):
    return ds.subset("test") if ds.has("test") else ds.subset("train")


def fit(spec, ds, n, seed, tcfg, binary=True):
    x, y, xv, yv = train_split(ds)
    model = build_tentaclenet(spec, n, seed, binary=binary)
    model, hist = train(model, x, y, tcfg, xv, yv)
    model.metadata.update(
        norm_mean=np.asarray(ds.mean).tolist(), norm_std=np.asarray(ds.std).tolist(),
        dataset=ds.provenance,
    )
    return model, hist


def fp32_reference(cfg: dict, spec, ds, seed, tcfg) -> float:
    if cfg.get("fp32_acc") not in (None, "") and not cfg.get("train_fp32"):
        return float(cfg["fp32_acc"])
    if cfg.get("train_fp32"):
        ref, _ = fit(spec, ds, 1, seed, tcfg, binary=False)
        return evaluate(ref, *test_split(ds)).accuracy
    raise ConfigError("need fp32_acc=... in the config or --train-fp32")


def seeds_of(cfg: dict) -> list[int]:
    if "seeds" in cfg:
        return [int(s) for s in str(cfg["seeds"]).split(",") if s.strip()]
    return [int(cfg.get("seed", 0))]


def cmd_train(cfg: dict) -> int:
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    seed = seeds_of(cfg)[0]
    ds = load_dataset(cfg, seed)
    spec = load_spec(cfg)
    n = int_list(cfg.get("tentacles", "1"))[0]
    binary = not cfg.get("train_fp32")
    model, hist = fit(spec, ds, n, seed, train_config(cfg, seed), binary=binary)
    path = out / (cfg.get("model") or ("model.tnet" if binary else "fp32.tnet"))
    save_model(model, path)
    hist.write_csv(out / "history.csv")
    res = evaluate(model, *test_split(ds))
    print(f"model: {path}\ntentacles: {n}\naccuracy: {res.accuracy:.4f}\nloss: {res.loss:.6f}")
    return 0


def cmd_eval(cfg: dict) -> int:
    if "model" not in cfg:
        raise ConfigError("eval needs model=PATH (or --model)")
    model = load_model(cfg["model"])
    ds = load_dataset(cfg, seeds_of(cfg)[0])
    x, y = test_split(ds)
    x = renormalize(x, ds, model.metadata)
    res = evaluate(model, x, y)
    report = {
        "model": cfg["model"],
        "accuracy": res.accuracy,
        "loss": res.loss,
        **{f"class_{k}_acc": v for k, v in res.per_class.items()},
    }
    lines = [f"{k}: {v}" for k, v in report.items()]
    print("\n".join(lines))
    if "out" in cfg:
        Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
        (Path(cfg["out"]) / "eval.txt").write_text("\n".join(lines) + "\n")
    return 0


def cmd_footprint(cfg: dict) -> int:
    if "model" in cfg:
        model = load_model(cfg["model"])
    else:
        model = build_tentaclenet(load_spec(cfg), int_list(cfg.get("tentacles", "1"))[0], 0).finalize()
    print(footprint(model).format())
    return 0


def _curve_point(args):
    cfg, spec, n, seed, out = args
    ds = load_dataset(cfg, seed)
    model, hist = fit(spec, ds, n, seed, train_config(cfg, seed))
    save_model(model, out / f"model_n{n}_s{seed}.tnet")
    hist.write_csv(out / f"history_n{n}_s{seed}.csv")
    return evaluate(model, *test_split(ds)).accuracy, footprint(model).kb


def workers() -> int:
    try:
        return max(1, int(os.environ.get("TNET_THREADS", "1")))
    except ValueError as exc:
        raise ConfigError("TNET_THREADS must be an integer") from exc


def cmd_curve(cfg: dict) -> int:
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    spec = load_spec(cfg)
    seeds = seeds_of(cfg)
    sweep = int_list(cfg.get("tentacles", "1,2,4"))
    fp32 = fp32_reference(cfg, spec, load_dataset(cfg, seeds[0]), seeds[0], train_config(cfg, seeds[0]))
    jobs = [(cfg, spec, n, s, out) for n in sweep for s in seeds]
    if workers() > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers(), len(jobs))) as pool:
            results = list(pool.map(_curve_point, jobs))  # map keeps sweep order
    else:
        results = [_curve_point(j) for j in jobs]
    rows = []
    for i, n in enumerate(sweep):
        chunk = results[i * len(seeds) : (i + 1) * len(seeds)]
        acc = float(np.mean([a for a, _ in chunk]))
        rows.append({"n": n, "acc": acc, "delta_vs_fp32": acc - fp32, "size_kb": chunk[0][1]})
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"n={r['n']} acc={r['acc']:.3f} delta={r['delta_vs_fp32']:+.3f} size_kb={r['size_kb']:.3f}")
    return 0


def cmd_compare(cfg: dict) -> int:
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    spec = load_spec(cfg)
    seed = seeds_of(cfg)[0]
    ds = load_dataset(cfg, seed)
    tcfg = train_config(cfg, seed)
    x, y, _, _ = train_split(ds)
    xt, yt = test_split(ds)
    fp32 = fp32_reference(cfg, spec, ds, seed, tcfg)
    rows = []
    for members in int_list(cfg.get("tentacles", "4")):
        bag = bagging_train(spec, x, y, members, tcfg, seed, mode=cfg.get("fusion", "average"))
        boost = boost_train(spec, x, y, members, tcfg, seed)
        tnet, _ = fit(spec, ds, members, seed, tcfg)
        cands = [
            ("BENN-bagging", 100.0 * np.mean(bagging_predict(bag, xt) == yt), footprint(bag).kb, members),
            ("BENN-boosting", 100.0 * np.mean(boost_predict(boost, xt) == yt), footprint(boost).kb,
             len(boost.members)),
            (f"TentacleNet({members})", evaluate(tnet, xt, yt).accuracy, footprint(tnet).kb, members),
        ]
        rows += compare_report(fp32, cands, cfg.get("benchmark", cfg.get("dataset", "synth")))
    write_compare_csv(rows, out / "compare.csv")
    for r in rows:
        print(f"{r['template']:<18} delta={r['delta_pct']:+.3f} members={r['members']} "
              f"size_kb={r['size_kb']:.3f} savings={r['savings_pct']}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "footprint": cmd_footprint,
    "compare": cmd_compare,
    "curve": cmd_curve,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tentaclenet", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="flat key=value file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--tentacles", help="comma-separated tentacle / member counts, e.g. 1,2,4")
    p.add_argument("--dataset", help="cifar10:DIR | csv:PATH | synth")
    p.add_argument("--spec", help="network spec JSON (path or packaged name)")
    p.add_argument("--model", help="model file for eval/footprint")
    p.add_argument("--train-fp32", action="store_true", help="train the FP32 reference instead of reading fp32_acc")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args) -> dict:
    cfg = {}
    if args.config is not None:
        cfg.update(parse_config(args.config.read_text(), str(args.config)))
    for key in ("out", "seed", "tentacles", "dataset", "spec", "model"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = str(val)
            if key == "seed":
                cfg.pop("seeds", None)
    if args.train_fp32:
        cfg["train_fp32"] = "1"
    cfg.update(parse_config("\n".join(args.set), "--set"))
    if cfg.get("train_fp32") in ("0", "false", "False", ""):
        cfg.pop("train_fp32")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](resolve(args))
    except (ConfigError, DatasetError, ModelFormatError, FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"tentaclenet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
