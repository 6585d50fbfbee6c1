"""Config-driven experiment runner: datasets, methods, seeds, reports on disk.

Everything written here is a pure function of the config, so a re-run produces
byte-identical files. Floats go through ``repr`` and JSON keys are sorted.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import confidence as conf
from . import datagen as dg
from . import metrics as mt
from . import model as mdl
from . import robust_train as rt

log = logging.getLogger(__name__)

# method name -> TrainConfig flag overrides
METHODS: dict[str, dict] = {
    "ours": dict(use_llc=True, use_dro=True, co_training=True),
    "erm": dict(use_llc=False, use_dro=False, co_training=False),
    "dividemix_star": dict(use_llc=False, use_dro=False, co_training=True),
    "llc_refurb": dict(use_llc=True, use_dro=False, co_training=True),
    "loss_dro": dict(use_llc=False, use_dro=True, co_training=True),
}
ABLATION_GRID = ("dividemix_star", "loss_dro", "llc_refurb", "ours")
# settings the erm baseline never reads
ERM_UNUSED = ("k", "tau", "sigma_s", "p_drop", "gmm_max_iter", "gmm_tol", "gmm_variance_floor",
              "llc_normalize")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: dict
    train: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: ["ours"])
    n_seeds: int = 3
    seed_offset: int = 0
    output_dir: str = "runs/experiment"
    dump_confidence: bool = False

    def validate(self) -> None:
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if not self.methods:
            raise ConfigError("at least one method is required")
        for m in self.methods:
            method_flags(m)
        if "seed" in self.train:
            raise ConfigError("train.seed is set per run; use seed_offset instead")
        rt.TrainConfig.from_dict(self.train).validate()
        ds = self.dataset
        if sum(k in ds for k in ("preset", "scenario", "csv")) != 1:
            raise ConfigError("dataset needs exactly one of 'preset', 'scenario' or 'csv'")
        if "preset" in ds and ds["preset"] not in dg.PRESETS:
            raise ConfigError(f"unknown preset {ds['preset']!r}; choose from {sorted(dg.PRESETS)}")
        if "csv" in ds and not {"train", "valid", "test"} <= set(ds["csv"]):
            raise ConfigError("dataset.csv needs 'train', 'valid' and 'test' paths")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" not in d:
            raise ConfigError("config needs a 'dataset' section")
        methods = []
        for m in d.get("methods", ["ours"]):
            methods.extend(ABLATION_GRID if m == "ablation" else [m])
        cfg = cls(**{**d, "methods": methods})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)


def method_flags(method) -> tuple[str, dict]:
    """(name, flag overrides) for a method given by name or as an inline dict."""
    if isinstance(method, str):
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
        return method, dict(METHODS[method])
    if isinstance(method, dict) and "name" in method:
        flags = {k: v for k, v in method.items() if k != "name"}
        bad = set(flags) - {"use_llc", "use_dro", "co_training"}
        if bad:
            raise ConfigError(f"method flags limited to use_llc/use_dro/co_training, got {sorted(bad)}")
        return str(method["name"]), {k: bool(v) for k, v in flags.items()}
    raise ConfigError(f"bad method entry {method!r}")


def train_config(train: dict, method, seed: int) -> rt.TrainConfig:
    name, flags = method_flags(method)
    kw = {**train, **flags, "seed": seed}
    if name == "erm":
        # the whole budget is spent on plain cross-entropy
        base = rt.TrainConfig()
        kw["warmup_epochs"] = kw.get("warmup_epochs", base.warmup_epochs) + kw.get("epochs", base.epochs)
        kw["epochs"] = 0
    return rt.TrainConfig.from_dict(kw)


def erm_unused_fields(train: dict) -> list[str]:
    return sorted(k for k in ERM_UNUSED if k in train)


# -- data --------------------------------------------------------------------

@dataclass
class Splits:
    train: dg.Dataset
    valid: dg.Dataset
    test: dg.Dataset
    tail_groups: tuple[int, ...]


def scenario_for(dataset: dict, seed: int) -> dg.Scenario:
    if "preset" in dataset:
        kw = {k: v for k, v in dataset.items() if k != "preset"}
        return dg.PRESETS[dataset["preset"]](seed=seed, **kw)
    sc = dg.Scenario.from_dict(dataset["scenario"])
    # shift every split's seed so that seeds give independent draws
    return dg.Scenario(sc.name, _reseed(sc.train, seed), _reseed(sc.valid, seed),
                       _reseed(sc.test, seed), sc.noise, sc.tail_groups)


def _reseed(spec: dg.DatasetSpec, offset: int) -> dg.DatasetSpec:
    return dg.DatasetSpec(spec.subpops, spec.d_core, spec.d_spur, spec.seed + offset)


def build_splits(dataset: dict, seed: int) -> Splits:
    if "csv" in dataset:
        paths = dataset["csv"]
        return Splits(*(dg.load_csv(paths[s]) for s in ("train", "valid", "test")),
                      tuple(dataset.get("tail_groups", ())))
    sc = scenario_for(dataset, seed)
    train = dg.inject_noise(dg.generate(sc.train), sc.noise, rt.stream(seed, "noise"))
    return Splits(train, dg.generate(sc.valid), dg.generate(sc.test), sc.tail_groups)


# -- one run -------------------------------------------------------------------

def _nan_to_none(x):
    return None if x is None or (isinstance(x, float) and np.isnan(x)) else x


def _noise_id(w: np.ndarray, ds: dg.Dataset, tails) -> dict:
    rep = mt.noise_id_report(w, ds.corrupted, ds.group_ids)
    tail_vals = [rep.auc_per_group.get(g) for g in tails]
    tail_vals = [v for v in tail_vals if v is not None]
    return {**rep.to_dict(), "auc_tail": float(np.mean(tail_vals)) if tail_vals else None}


def run_single(splits: Splits, cfg: rt.TrainConfig, method_name: str,
               out_dir: Optional[Path] = None, dump_confidence: bool = False) -> dict:
    """Train one method on one seed and return its report (also written when ``out_dir``)."""
    train, test = splits.train, splits.test
    groups = sorted(set(int(g) for g in test.group_ids))
    last_warmup = cfg.warmup_epochs
    warmup_id: dict = {}

    def on_epoch(info: rt.EpochInfo) -> dict:
        rep = mt.group_report(info.state.predict(test.features), test.true_labels, test.group_ids, groups)
        row = {"avg_acc": rep.avg_accuracy, "worst_group_acc": rep.worst_group_accuracy,
               "group_acc": {str(g): rep.per_group_accuracy.get(g) for g in groups}}
        if info.w is not None:
            nid = _noise_id(info.w, train, splits.tail_groups)
            row.update(noise_auc=nid["auc_overall"], noise_auc_tail=nid["auc_tail"],
                       group_noise_auc={str(k): v for k, v in nid["auc_per_group"].items()},
                       mean_w_clean=_mean(info.w[~train.corrupted]),
                       mean_w_noisy=_mean(info.w[train.corrupted]))
        if info.epoch == last_warmup and cfg.epochs > 0:
            # both estimators on the same warmed-up model, for the noise-ID comparison
            p = info.state.params[0]
            view = train.training_view()
            for key, flag in (("llc", True), ("loss", False)):
                state = rt.estimate_confidence(p, view, cfg, use_llc=flag)
                warmup_id[key] = _noise_id(state.w, train, splits.tail_groups)
        return row

    result = rt.train(train.training_view(), cfg, (splits.valid.features, splits.valid.true_labels),
                      on_epoch)

    def final(state: rt.TrainState) -> dict:
        return mt.group_report(state.predict(test.features), test.true_labels,
                               test.group_ids, groups).to_dict()

    report = {
        "method": method_name,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "best_epoch": result.best_epoch,
        "best": final(result.best),
        "last": final(result.state),
        "noise_id_warmup": warmup_id,
        "history": result.history,
    }
    if result.state.confidences and result.state.confidences[0] is not None:
        w = sum(c.w for c in result.state.confidences) / len(result.state.confidences)
        report["noise_id_last"] = _noise_id(w, train, splits.tail_groups)
    if out_dir is not None:
        write_run(out_dir, report, result, train if dump_confidence else None)
    return report


def _mean(x: np.ndarray) -> Optional[float]:
    return float(x.mean()) if len(x) else None


def write_run(out_dir: Path, report: dict, result: rt.TrainResult,
              dump_for: Optional[dg.Dataset] = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(dumps(report))
    write_epoch_csv(out_dir / "epochs.csv", report["history"])
    for tag, state in (("best", result.best), ("last", result.state)):
        for m, params in enumerate(state.params):
            mdl.save_checkpoint(params, out_dir / f"model{'ab'[m]}_{tag}.json")
    if dump_for is not None and result.state.confidences and result.state.confidences[0] is not None:
        rows = []
        for m, c in enumerate(result.state.confidences):
            rows.extend({"model": m, **r} for r in _debug_rows(c, dump_for))
        write_rows(out_dir / "confidence_debug.csv", rows)


def _debug_rows(state, ds: dg.Dataset) -> list[dict]:
    rows = conf.debug_rows(state, ds.corrupted)
    for r in rows:
        r["group_id"] = int(ds.group_ids[r["sample_id"]])
        r["noisy_label"] = int(ds.noisy_labels[r["sample_id"]])
    return rows


def write_epoch_csv(path: Path, history: list[dict]) -> None:
    groups = sorted({g for h in history for g in h.get("group_acc", {})}, key=int)
    ngroups = sorted({g for h in history for g in h.get("group_noise_auc", {})}, key=int)
    header = (["epoch", "phase", "val_accuracy", "avg_acc", "worst_group_acc"]
              + [f"acc_g{g}" for g in groups] + ["noise_auc"] + [f"noise_auc_g{g}" for g in ngroups]
              + ["mean_w_clean", "mean_w_noisy", "selected_fraction"])
    rows = []
    for h in history:
        row = [h["epoch"], h["phase"], h.get("val_accuracy"), h.get("avg_acc"), h.get("worst_group_acc")]
        row += [h.get("group_acc", {}).get(g) for g in groups]
        row += [h.get("noise_auc")] + [h.get("group_noise_auc", {}).get(g) for g in ngroups]
        row += [h.get("mean_w_clean"), h.get("mean_w_noisy"), h.get("selected_fraction")]
        rows.append(row)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([[fmt(v) for v in r] for r in rows])


def fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return str(v)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _nan_to_none(float(obj))
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError(f"nothing to write to {path}")
    header = list(rows[0])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(r.get(h)) for h in header])


# -- experiments -------------------------------------------------------------------

def _job(args) -> tuple[str, int, Optional[dict], Optional[str]]:
    dataset, train, method, seed, out_dir, dump = args
    name, _ = method_flags(method)
    try:
        cfg = train_config(train, method, seed)
        report = run_single(build_splits(dataset, seed), cfg, name,
                            Path(out_dir) if out_dir else None, dump)
        return name, seed, report, None
    except Exception as exc:  # one failed seed must not sink the others
        log.exception("run %s seed %d failed", name, seed)
        return name, seed, None, f"{type(exc).__name__}: {exc}"


def run_experiment(cfg: ExperimentConfig, out: Optional[Path] = None, parallel: bool = False,
                   write: bool = True) -> tuple[dict[str, list[dict]], list[str]]:
    """Run every method on every seed. Returns reports per method and failure messages."""
    out = Path(out or cfg.output_dir)
    if "erm" in [method_flags(m)[0] for m in cfg.methods]:
        unused = erm_unused_fields(cfg.train)
        if unused:
            log.warning("method 'erm' ignores these train settings: %s", ", ".join(unused))
    seeds = [cfg.seed_offset + i for i in range(cfg.n_seeds)]
    jobs = [(cfg.dataset, cfg.train, m, s,
             str(out / method_flags(m)[0] / f"seed_{s}") if write else None, cfg.dump_confidence)
            for m in cfg.methods for s in seeds]
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]

    reports: dict[str, list[dict]] = {}
    failures = []
    for name, seed, report, err in results:
        if err is not None:
            failures.append(f"{name} seed {seed}: {err}")
        else:
            reports.setdefault(name, []).append(report)
    if write and reports:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(dumps(cfg.to_dict()))
        write_rows(out / "summary.csv", summarize(reports))
    return reports, failures


def _stat(values) -> tuple[Optional[float], Optional[float]]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def summarize(reports: dict[str, list[dict]]) -> list[dict]:
    rows = []
    for name, reps in reports.items():
        row: dict[str, Any] = {"method": name, "n_seeds": len(reps)}
        for snap in ("best", "last"):
            for key, col in (("avg_accuracy", "avg_acc"), ("worst_group_accuracy", "worst_group_acc")):
                m, s = _stat([r[snap][key] for r in reps])
                row[f"{snap}_{col}_mean"], row[f"{snap}_{col}_std"] = m, s
        for src in ("noise_id_last",):
            for key in ("auc_overall", "auc_tail"):
                m, s = _stat([r.get(src, {}).get(key) for r in reps])
                row[f"{key}_mean"], row[f"{key}_std"] = m, s
        for est in ("llc", "loss"):
            m, s = _stat([r["noise_id_warmup"].get(est, {}).get("auc_tail") for r in reps])
            row[f"warmup_{est}_auc_tail_mean"], row[f"warmup_{est}_auc_tail_std"] = m, s
        rows.append(row)
    return rows


def parse_param(spec: str) -> tuple[str, list]:
    """``"k=5,10,20"`` -> ``("k", [5, 10, 20])`` with values typed like TrainConfig."""
    if "=" not in spec:
        raise ConfigError(f"bad --param {spec!r}, expected name=v1,v2")
    name, vals = spec.split("=", 1)
    name = name.strip()
    types = {f.name: f.type for f in fields(rt.TrainConfig)}
    if name not in types or name == "seed":
        raise ConfigError(f"unknown sweep parameter {name!r}")
    default = getattr(rt.TrainConfig(), name)
    cast = type(default) if default is not None else int
    if cast is bool:
        cast = lambda s: s.strip().lower() in ("1", "true", "yes")  # noqa: E731
    try:
        return name, [cast(v) for v in vals.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value in --param {spec!r}: {exc}") from exc


def run_sweep(cfg: ExperimentConfig, params: list[tuple[str, list]], out: Optional[Path] = None,
              parallel: bool = False) -> tuple[list[dict], list[str]]:
    out = Path(out or cfg.output_dir)
    names = [n for n, _ in params]
    grid_rows, failures = [], []
    for combo in itertools.product(*(v for _, v in params)):
        setting = dict(zip(names, combo))
        tag = "_".join(f"{k}={v}" for k, v in setting.items())
        sub = ExperimentConfig(cfg.dataset, {**cfg.train, **setting}, cfg.methods, cfg.n_seeds,
                               cfg.seed_offset, str(out / tag), cfg.dump_confidence)
        sub.validate()
        reports, fails = run_experiment(sub, out / tag, parallel)
        failures.extend(f"{tag}: {f}" for f in fails)
        for row in summarize(reports):
            grid_rows.append({**setting, **row})
    if grid_rows:
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "sweep_grid.csv", grid_rows)
    return grid_rows, failures


def emit_plot_data(run_dir: str | Path) -> list[Path]:
    """Tidy CSVs for accuracy bars, noise-ID bars and learning curves.

    Reads ``<run_dir>/<method>/seed_*/report.json``. Nothing is written unless
    at least one report is found.
    """
    run_dir = Path(run_dir)
    reports: dict[str, list[dict]] = {}
    for path in sorted(run_dir.glob("*/seed_*/report.json")):
        rep = json.loads(path.read_text())
        reports.setdefault(rep["method"], []).append(rep)
    if not reports:
        raise FileNotFoundError(f"no run reports under {run_dir}")

    acc, auc, curves = [], [], []
    for method in sorted(reports):
        reps = sorted(reports[method], key=lambda r: r["seed"])
        groups = sorted({g for r in reps for g in r["best"]["per_group_accuracy"]}, key=int)
        for g in groups:
            m, s = _stat([r["best"]["per_group_accuracy"].get(g) for r in reps])
            acc.append({"method": method, "group": g, "metric": "accuracy", "value": m, "std": s})
        for key, label in (("avg_accuracy", "avg"), ("worst_group_accuracy", "worst")):
            m, s = _stat([r["best"][key] for r in reps])
            acc.append({"method": method, "group": label, "metric": "accuracy", "value": m, "std": s})
        for est, src in (("llc", "llc"), ("loss", "loss")):
            per = [r["noise_id_warmup"].get(src) for r in reps if r["noise_id_warmup"].get(src)]
            if not per:
                continue
            gkeys = sorted({g for p in per for g in p["auc_per_group"]}, key=int)
            for g in gkeys + ["overall"]:
                vals = [p["auc_overall"] if g == "overall" else p["auc_per_group"].get(g) for p in per]
                m, s = _stat(vals)
                auc.append({"method": method, "group": g, "metric": f"noise_auc_{est}", "value": m, "std": s})
        for r in reps:
            for h in r["history"]:
                for key in ("avg_acc", "worst_group_acc", "val_accuracy", "noise_auc", "noise_auc_tail"):
                    if h.get(key) is not None:
                        curves.append({"method": method, "seed": r["seed"], "epoch": h["epoch"],
                                       "metric": key, "value": h[key]})

    out = run_dir / "plots"
    tmp = run_dir / ".plots_tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    written = []
    for name, rows in (("accuracy_bars.csv", acc), ("noise_auc_bars.csv", auc), ("learning_curves.csv", curves)):
        if rows:
            write_rows(tmp / name, rows)
            written.append(name)
    # swap in the finished set so a failure never leaves partial output
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)
    return [out / n for n in written]
