"""The three named experiments: robustness sweep, curriculum, class bias.

Each recipe trains one run per (setting, seed) under ``out_dir/<arm>/seed<k>``
and writes an aggregate CSV and SVG next to them.  Runs are independent and
are farmed out to a process pool capped by ``GRADSTEER_THREADS``.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .. import mixgen
from .config import ConfigError, ExperimentConfig, from_dict
from .plots import band_svg, histogram_svg
from .training import _fmt, read_csv, train

ROBUST_ALPHAS = (0.0, 1 / 15, 1 / 10, 1 / 5)
CLASS_GAMMAS = ((0.0, 0.0), (0.0, 3.0), (3.0, 0.0))


def max_workers() -> int:
    env = os.environ.get("GRADSTEER_THREADS")
    limit = os.cpu_count() or 1
    if env:
        try:
            limit = max(1, int(env))
        except ValueError as err:
            raise ConfigError(f"GRADSTEER_THREADS must be an integer, got {env!r}") from err
    return limit


def _job(args):
    config_dict, out_dir, seed = args
    res = train(from_dict(config_dict), out_dir, seed)
    return res.summary


def run_jobs(jobs: list[tuple[ExperimentConfig, Path, int]], workers: int | None = None) -> list[dict]:
    """Train every job; returns summaries in job order."""
    workers = min(workers or max_workers(), len(jobs)) if jobs else 1
    payload = [(cfg.to_dict(), str(out), seed) for cfg, out, seed in jobs]
    if workers <= 1:
        return [_job(p) for p in payload]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, payload))


def _label(x: float) -> str:
    frac = Fraction(x).limit_denominator(100)
    return str(frac) if abs(float(frac) - x) < 1e-12 else f"{x:g}"


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) if isinstance(x, float) else x for x in row])


@dataclass
class SweepResult:
    out_dir: Path
    table: dict  # setting label -> aggregated statistics
    runs: dict  # (setting label, seed) -> run summary


# --- robustness -------------------------------------------------------------

QUANTILE_KEYS = ["1", "5", "10", "25", "50", "75", "90", "95", "99"]


def recipe_robust_sweep(base: ExperimentConfig, alphas=ROBUST_ALPHAS, seeds=(0, 1, 2), out_dir=None,
                        workers: int | None = None) -> SweepResult:
    """Train with ``Robust(alpha)`` for each alpha and seed; medians over seeds form the table."""
    if not seeds:
        raise ConfigError("need at least one seed")
    out = Path(out_dir or Path(base.run.out_dir) / "robust_sweep")
    jobs, keys = [], []
    for alpha in alphas:
        cfg = base.replace(reweight={"mode": "robust", "alpha": float(alpha)})
        for seed in seeds:
            jobs.append((cfg, out / f"alpha_{float(alpha):.6f}" / f"seed{seed}", seed))
            keys.append((_label(alpha), seed))
    runs = dict(zip(keys, run_jobs(jobs, workers)))

    table, rows, per_seed = {}, [], []
    for alpha in alphas:
        label = _label(alpha)
        summaries = [runs[(label, s)] for s in seeds]
        stats = {
            "alpha": float(alpha),
            "mean": float(np.median([r["test_mean"] for r in summaries])),
            "std": float(np.median([r["test_std"] for r in summaries])),
            "quantiles": {q: float(np.median([r["test_quantiles"][q] for r in summaries])) for q in QUANTILE_KEYS},
        }
        table[label] = stats
        rows.append([label, stats["mean"], stats["std"], *stats["quantiles"].values()])
        for s, r in zip(seeds, summaries):
            per_seed.append([label, s, r["test_mean"], r["test_std"], *(r["test_quantiles"][q] for q in QUANTILE_KEYS)])
    header = ["alpha", "mean_sisdri", "std_sisdri"] + [f"q{int(q):02d}" for q in QUANTILE_KEYS]
    _write_rows(out / "robust_sweep.csv", header, rows)
    _write_rows(out / "robust_sweep_runs.csv", header[:1] + ["seed"] + header[1:], per_seed)
    render_recipe(out)
    return SweepResult(out, table, runs)


# --- curriculum -------------------------------------------------------------


def recipe_curriculum(base: ExperimentConfig, seeds=(0, 1, 2, 3, 4), a: float = 10.0, b: float = 0.5,
                      out_dir=None, workers: int | None = None) -> SweepResult:
    """Curriculum ``beta = -1/(a + b*epoch)`` against the uniform baseline."""
    if len(seeds) < 2:
        raise ConfigError("the curriculum comparison needs at least two seeds")
    out = Path(out_dir or Path(base.run.out_dir) / "curriculum")
    arms = {
        "baseline": base.replace(reweight={"mode": "uniform"}),
        "curriculum": base.replace(reweight={"mode": "curriculum", "a": a, "b": b}),
    }
    jobs, keys = [], []
    for arm, cfg in arms.items():
        for seed in seeds:
            jobs.append((cfg, out / arm / f"seed{seed}", seed))
            keys.append((arm, seed))
    runs = dict(zip(keys, run_jobs(jobs, workers)))

    table, rows, per_seed = {}, [], []
    for arm in arms:
        curves = np.array([[c[1] for c in runs[(arm, s)]["convergence"]] for s in seeds])
        epochs = [c[0] for c in runs[(arm, seeds[0])]["convergence"]]
        mean, std = curves.mean(0), curves.std(0)
        table[arm] = {"epochs": epochs, "mean": mean.tolist(), "std": std.tolist(), "per_seed": curves.tolist()}
        rows += [[arm, e, float(m), float(s), len(seeds)] for e, m, s in zip(epochs, mean, std)]
        for seed, curve in zip(seeds, curves):
            per_seed += [[arm, seed, e, float(v)] for e, v in zip(epochs, curve)]
    _write_rows(out / "curriculum.csv", ["arm", "epoch", "mean_sisdri", "std_sisdri", "n_seeds"], rows)
    _write_rows(out / "curriculum_runs.csv", ["arm", "seed", "epoch", "mean_sisdri"], per_seed)
    render_recipe(out)
    return SweepResult(out, table, runs)


# --- class bias ---------------------------------------------------------------


def recipe_class_bias(base: ExperimentConfig, gamma_settings=CLASS_GAMMAS, seeds=(0, 1, 2), out_dir=None,
                      workers: int | None = None) -> SweepResult:
    """Per-source class weighting ``gamma = (gamma_A, gamma_B)`` on fixed A+B mixtures."""
    pairing = base.mix_spec().class_pairing
    if not isinstance(pairing, mixgen.FixedPair):
        raise ConfigError("class-bias recipe needs FixedPair mixtures (data.pairing.kind = 'fixed')")
    if not seeds:
        raise ConfigError("need at least one seed")
    names = {c.id: c.name for c in base.class_bank()}
    first, second = pairing.first, pairing.second
    out = Path(out_dir or Path(base.run.out_dir) / "class_bias")
    granularity = base.reweight.get("granularity", "source") if base.reweight.get("mode") == "class_bias" else "source"
    jobs, keys = [], []
    for ga, gb in gamma_settings:
        cfg = base.replace(reweight={"mode": "class_bias", "gamma": {str(first): float(ga), str(second): float(gb)},
                                     "granularity": granularity})
        for seed in seeds:
            jobs.append((cfg, out / f"gamma_{float(ga):g}_{float(gb):g}" / f"seed{seed}", seed))
            keys.append(((ga, gb), seed))
    runs = dict(zip(keys, run_jobs(jobs, workers)))

    name_a, name_b = names[first], names[second]
    table, rows, per_seed = {}, [], []
    for ga, gb in gamma_settings:
        summaries = [runs[((ga, gb), s)] for s in seeds]
        a = np.array([r["test_per_class"][name_a] for r in summaries])
        b = np.array([r["test_per_class"][name_b] for r in summaries])
        comb = np.array([r["test_combined"] for r in summaries])
        table[(ga, gb)] = {name_a: a.tolist(), name_b: b.tolist(), "combined": comb.tolist()}
        rows.append([f"{ga:g}", f"{gb:g}", float(a.mean()), float(a.std()), float(b.mean()), float(b.std()),
                     float(comb.mean()), float(comb.std())])
        for s, va, vb, vc in zip(seeds, a, b, comb):
            per_seed.append([f"{ga:g}", f"{gb:g}", s, float(va), float(vb), float(vc)])
    header = ["gamma_" + name_a, "gamma_" + name_b, f"{name_a}_mean", f"{name_a}_std", f"{name_b}_mean",
              f"{name_b}_std", "combined_mean", "combined_std"]
    _write_rows(out / "class_bias.csv", header, rows)
    _write_rows(out / "class_bias_runs.csv", header[:2] + ["seed", name_a, name_b, "combined"], per_seed)
    return SweepResult(out, table, runs)


# --- rendering ------------------------------------------------------------------


def render_recipe(out_dir) -> list[Path]:
    """Redraw recipe-level SVGs from the CSVs (and per-run histograms) in ``out_dir``."""
    out = Path(out_dir)
    written = []
    if (out / "robust_sweep.csv").exists():
        series = {}
        for arm in sorted(p for p in out.iterdir() if p.is_dir() and p.name.startswith("alpha_")):
            values = [float(r["sisdri"]) for run in sorted(arm.glob("seed*"))
                      if (run / "test_sisdri.csv").exists() for r in read_csv(run / "test_sisdri.csv")]
            if values:
                series["alpha=" + _label(float(arm.name[len("alpha_"):]))] = np.array(values)
        if series:
            target = out / "robust_sweep.svg"
            target.write_text(histogram_svg(series, title="Test SI-SDRi distribution per alpha"))
            written.append(target)
    if (out / "curriculum.csv").exists():
        series = {}
        for r in read_csv(out / "curriculum.csv"):
            x, m, s = series.setdefault(r["arm"], ([], [], []))
            x.append(float(r["epoch"]))
            m.append(float(r["mean_sisdri"]))
            s.append(float(r["std_sisdri"]))
        target = out / "curriculum.svg"
        target.write_text(band_svg(series, title="Mean validation SI-SDRi (+/- 2 std over seeds)"))
        written.append(target)
    return written
