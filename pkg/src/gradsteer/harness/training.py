"""Training loop, evaluation and run artifacts."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import mixgen, reweight, signal
from ..model import (NonFiniteGradient, SeparatorParams, init_params, load_checkpoint, loss_and_grads,
                     save_checkpoint, separate)
from ..optim import AdamState, adam_step, clip_grad_norm, save_state
from .config import DEFAULT_QUANTILES, ExperimentConfig, dump_config
from .plots import band_svg, histogram_svg

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "mean_sisdri", "std_sisdri",
                  "q01", "q05", "q10", "q25", "q50", "q75", "q90", "q95", "q99"]
WEIGHTS_HEADER = ["epoch", "step", "n_units", "entropy", "max_weight", "min_logit", "max_logit"]
CONVERGENCE_HEADER = ["epoch", "mean_sisdri", "std_sisdri"]
CLASS_HEADER = ["epoch", "split", "class_id", "class_name", "count", "mean_sisdri"]


@dataclass
class MetricsReport:
    """SI-SDRi statistics over one evaluation set."""

    mean: float
    std: float
    quantiles: dict[float, float]
    per_class: dict[int, tuple[int, float]] = field(default_factory=dict)  # id -> (count, mean)
    combined: float = float("nan")  # mean over every active source
    per_example: np.ndarray | None = None

    def row(self) -> list[float]:
        return [self.mean, self.std, *self.quantiles.values()]


def quantiles(values, levels=DEFAULT_QUANTILES) -> dict[float, float]:
    """Percentiles by linear interpolation between closest order statistics."""
    values = np.asarray(values, dtype=np.float64)
    return {q: float(np.percentile(values, q, method="linear")) for q in levels}


def _fmt(x: float) -> str:
    return f"{x:.6f}"


@torch.no_grad()
def evaluate(params: SeparatorParams, eval_set: mixgen.WaveformBatch, levels=DEFAULT_QUANTILES,
             chunk: int = 128) -> MetricsReport:
    gains, actives = [], []
    for start in range(0, len(eval_set), chunk):
        part = eval_set.subset(slice(start, start + chunk))
        dtype = params.theta.dtype
        mix = torch.as_tensor(part.mixtures, dtype=dtype)
        est = separate(params, mix)
        gain, active, _ = signal.per_source_si_sdri(
            est, torch.as_tensor(part.sources, dtype=dtype), mix, torch.as_tensor(part.active))
        gains.append(gain.double().numpy())
        actives.append(active.numpy())
    gain, active = np.concatenate(gains), np.concatenate(actives)
    per_example = (gain * active).sum(1) / active.sum(1)
    per_class = {}
    labels = np.asarray(eval_set.labels)
    for c in np.unique(labels[active]):
        sel = active & (labels == c)
        per_class[int(c)] = (int(sel.sum()), float(gain[sel].mean()))
    return MetricsReport(
        mean=float(per_example.mean()),
        std=float(per_example.std()),
        quantiles=quantiles(per_example, levels),
        per_class=per_class,
        combined=float(gain[active].mean()),
        per_example=per_example,
    )


class _CsvLog:
    def __init__(self, path: Path, header: list[str]):
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(header)

    def write(self, row) -> None:
        self._w.writerow([_fmt(x) if isinstance(x, float) else x for x in row])

    def close(self) -> None:
        self._f.close()


@dataclass
class RunResult:
    out_dir: Path
    params: SeparatorParams
    final: MetricsReport  # test metrics averaged over the final evaluation epochs
    convergence: list[tuple[int, float, float]]
    summary: dict


def _average_reports(reports: list[MetricsReport]) -> MetricsReport:
    per_class = {}
    for c in reports[-1].per_class:
        per_class[c] = (reports[-1].per_class[c][0], float(np.mean([r.per_class[c][1] for r in reports])))
    return MetricsReport(
        mean=float(np.mean([r.mean for r in reports])),
        std=float(np.mean([r.std for r in reports])),
        quantiles={q: float(np.mean([r.quantiles[q] for r in reports])) for q in reports[-1].quantiles},
        per_class=per_class,
        combined=float(np.mean([r.combined for r in reports])),
        per_example=np.mean([r.per_example for r in reports], axis=0),
    )


def eval_sets(config: ExperimentConfig, seed: int):
    spec, bank = config.mix_spec(), config.class_bank()
    val = mixgen.make_eval_set(spec, bank, config.eval.n_val, seed, "val")
    test = mixgen.make_eval_set(spec, bank, config.eval.n_test, seed, "test")
    return val, test


def train(config: ExperimentConfig, out_dir=None, seed: int | None = None) -> RunResult:
    """Run one training job and write its artifacts to ``out_dir``.

    Artifacts: ``config.json``, ``metrics.csv``, ``convergence.csv``,
    ``weights_log.csv``, ``class_metrics.csv``, ``summary.json``,
    ``checkpoint.bin`` and ``optimizer.bin``.
    """
    threads = torch.get_num_threads()
    torch.set_num_threads(1)  # fixed intra-op threading keeps reductions bit-reproducible
    try:
        return _train(config, out_dir, seed)
    finally:
        torch.set_num_threads(threads)


def _train(config: ExperimentConfig, out_dir, seed: int | None) -> RunResult:
    seed = config.run.seed if seed is None else seed
    if seed != config.run.seed:
        config = config.replace(run={"seed": seed})
    out = Path(out_dir if out_dir is not None else config.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.json")

    spec, bank = config.mix_spec(), config.class_bank()
    names = {c.id: c.name for c in bank}
    mode = config.weighting_mode()
    dtype = torch.float64 if config.model.dtype == "float64" else torch.float32
    params = init_params(config.model_config(), seed, dtype)
    state = AdamState.zeros_like(params.theta, lr=config.optim.lr, clip_norm=config.optim.clip_norm)
    val_set, test_set = eval_sets(config, seed)
    levels = tuple(config.eval.quantiles)
    epochs = config.run.epochs
    first_final = max(0, epochs - config.run.final_avg_epochs + 1)

    metrics = _CsvLog(out / "metrics.csv", METRICS_HEADER if levels == DEFAULT_QUANTILES else
                      METRICS_HEADER[:4] + [f"q{q:g}" for q in levels])
    weights = _CsvLog(out / "weights_log.csv", WEIGHTS_HEADER)
    conv = _CsvLog(out / "convergence.csv", CONVERGENCE_HEADER)
    classes = _CsvLog(out / "class_metrics.csv", CLASS_HEADER)
    convergence, finals = [], []

    def checkpoint(epoch: int) -> None:
        if epoch % config.run.eval_every == 0 or epoch == epochs:
            rep = evaluate(params, val_set, levels)
            metrics.write([epoch, "val", *rep.row()])
            conv.write([epoch, rep.mean, rep.std])
            convergence.append((epoch, rep.mean, rep.std))
            log.info("epoch %d val SI-SDRi %.3f dB", epoch, rep.mean)
        if epoch >= first_final:
            rep = evaluate(params, test_set, levels)
            metrics.write([epoch, "test", *rep.row()])
            for c, (count, mean) in sorted(rep.per_class.items()):
                classes.write([epoch, "test", c, names.get(c, str(c)), count, mean])
            finals.append(rep)

    clock = reweight.EpochClock()

    def pmf_for(losses, unit_classes, mask):
        return reweight.mode_pmf(mode, losses, unit_classes, clock, mask)

    try:
        checkpoint(0)
        for epoch in range(epochs):
            clock.epoch = epoch
            for b in range(config.run.batches_per_epoch):
                batch = mixgen.make_batch(spec, bank, config.run.batch_size, epoch, b, seed)
                try:
                    _, grad, pmf = loss_and_grads(params, batch, pmf_for, units=mode.units)
                except NonFiniteGradient:
                    weights.write([epoch, clock.step, "nonfinite", "", "", "", ""])
                    raise
                delta = clip_grad_norm(grad, state.clip_norm)
                theta, state = adam_step(params.theta, state, delta)
                params = SeparatorParams(theta, params.config)
                weights.write([epoch, clock.step, len(pmf), pmf.entropy, pmf.max_weight,
                               pmf.min_logit, pmf.max_logit])
                clock.tick()
            checkpoint(epoch + 1)
    finally:
        for f in (metrics, weights, conv, classes):
            f.close()

    with open(out / "test_sisdri.csv", "w") as f:
        f.write("index,sisdri\n")
        f.writelines(f"{i},{_fmt(v)}\n" for i, v in enumerate(finals[-1].per_example))
    render_run(out)
    save_checkpoint(out / "checkpoint.bin", params, seed, epochs)
    save_state(out / "optimizer.bin", state)
    final = _average_reports(finals)
    summary = {
        "seed": seed,
        "epochs": epochs,
        "mode": config.reweight,
        "final_epochs": [first_final, epochs],
        "test_mean": final.mean,
        "test_std": final.std,
        "test_quantiles": {f"{q:g}": v for q, v in final.quantiles.items()},
        "test_combined": final.combined,
        "test_per_class": {names.get(c, str(c)): v[1] for c, v in sorted(final.per_class.items())},
        "convergence": convergence,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(out, params, final, convergence, summary)


def evaluate_checkpoint(checkpoint_path, config: ExperimentConfig, split: str = "test") -> MetricsReport:
    params, manifest = load_checkpoint(checkpoint_path)
    val, test = eval_sets(config, manifest["seed"])
    return evaluate(params, test if split == "test" else val, tuple(config.eval.quantiles))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def render_run(run_dir) -> list[Path]:
    """(Re)draw a run's SVGs from its CSV files."""
    run_dir = Path(run_dir)
    written = []
    conv = run_dir / "convergence.csv"
    if conv.exists():
        rows = read_csv(conv)
        x = [float(r["epoch"]) for r in rows]
        m = [float(r["mean_sisdri"]) for r in rows]
        s = [float(r["std_sisdri"]) for r in rows]
        target = run_dir / "convergence.svg"
        target.write_text(band_svg({"validation": (x, m, s)}, title="Validation SI-SDRi", n_std=0.0))
        written.append(target)
    hist = run_dir / "test_sisdri.csv"
    if hist.exists():
        values = np.array([float(r["sisdri"]) for r in read_csv(hist)])
        target = run_dir / "test_hist.svg"
        target.write_text(histogram_svg({"test": values}, title="Test SI-SDRi distribution"))
        written.append(target)
    return written
