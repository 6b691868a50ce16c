"""Run, sweep, ablation and analysis drivers behind the command line.

All outputs are CSV with a header row. Files are written to a temporary name
and renamed into place so an interrupted child never leaves a partial file.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels, metrics, models, training
from .config import ExperimentConfig
from .data import DatasetBundle

logger = logging.getLogger(__name__)

SUMMARY_METRICS = ("train_acc", "val_acc", "test_acc", "cov_distance", "risk_variance", "mmd_aug")
ABLATION_VARIANTS = {
    "erm": {"method": "erm"},
    "mix_cd": {"method": "xdomainmix", "mix_cd": True, "mix_ncd": False, "discard_cd": False},
    "mix_ncd": {"method": "xdomainmix", "mix_cd": False, "mix_ncd": True, "discard_cd": False},
    "mix_both": {"method": "xdomainmix", "mix_cd": True, "mix_ncd": True, "discard_cd": False},
    "mix_both_discard": {"method": "xdomainmix", "mix_cd": True, "mix_ncd": True, "discard_cd": True},
}
MMD_METHODS = ("identity", "xdomainmix", "mixstyle", "dsu")


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    write_atomic(path, buf.getvalue())


def save_checkpoint_atomic(path, params: models.ModelParams) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.stem}.{os.getpid()}.tmp.npz")
    models.save_checkpoint(tmp, params)
    os.replace(tmp, path)


def git_blob_sha1(content: bytes) -> str:
    """Hash in the same form git uses for file blobs."""
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


# --------------------------------------------------------------------------
# single run
# --------------------------------------------------------------------------

@dataclass
class RunOutput:
    result: training.TrainResult
    bundle: DatasetBundle
    out_dir: Optional[Path]


def train_from_config(cfg: ExperimentConfig, seed: int, **train_overrides) -> tuple[training.TrainResult, DatasetBundle]:
    if train_overrides:
        cfg = cfg.with_train(**train_overrides)
    bundle = cfg.make_bundle(seed)
    result = training.train(cfg.train_config(seed), bundle, cfg.arch_config(bundle, seed), cfg.eval_config())
    return result, bundle


def metrics_rows(log: Sequence[metrics.MetricsRecord]) -> list[list]:
    cols = metrics.MetricsRecord.columns()
    return [[getattr(r, c) for c in cols] for r in log]


def run(cfg: ExperimentConfig, seed: int, out_dir, config_bytes: Optional[bytes] = None,
        **train_overrides) -> RunOutput:
    """Train one model and write metrics.csv, checkpoint.npz, final.npz and manifest.json."""
    if train_overrides:
        cfg = cfg.with_train(**train_overrides)
    result, bundle = train_from_config(cfg, seed)
    out = Path(out_dir)
    write_csv(out / "metrics.csv", metrics.MetricsRecord.columns(), metrics_rows(result.log))
    save_checkpoint_atomic(out / "checkpoint.npz", result.params)
    save_checkpoint_atomic(out / "final.npz", result.final_params)
    resolved = cfg.resolved(seed)
    canonical = json.dumps(resolved, sort_keys=True).encode()
    manifest = {
        "seed": seed,
        "config": resolved,
        "config_sha1": git_blob_sha1(canonical),
        "config_file_sha1": git_blob_sha1(config_bytes) if config_bytes is not None else None,
        "dataset_sha1": bundle.content_hash(),
        "selected_step": result.selected.step,
        "kernel_backend": kernels.BACKEND,
    }
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunOutput(result, bundle, out)


# --------------------------------------------------------------------------
# sweep and ablation
# --------------------------------------------------------------------------

def _child(args) -> tuple[str, int, Optional[list], Optional[str]]:
    raw, seed, label, overrides, out_dir = args
    cfg = ExperimentConfig.from_dict(raw)
    try:
        output = run(cfg, seed, out_dir, **overrides)
        return label, seed, [getattr(output.result.selected, c) for c in metrics.MetricsRecord.columns()], None
    except Exception as exc:  # noqa: BLE001 - reported as a failed row
        logger.error("run %s seed %d failed: %s", label, seed, exc)
        return label, seed, None, f"{type(exc).__name__}: {exc}"


def _execute(jobs: list, threads: int) -> list:
    if threads <= 1 or len(jobs) <= 1:
        return [_child(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_child, jobs))


def summarize(values: np.ndarray) -> tuple[float, float]:
    """Mean and population standard deviation."""
    return float(np.mean(values)), float(np.std(values))


@dataclass
class SweepResult:
    header: list
    rows: list
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def _grouped_rows(label_col: str, labels: Sequence[str], results: list) -> SweepResult:
    cols = metrics.MetricsRecord.columns()
    header = ["row_type", label_col] + cols + [f"{m}_std" for m in SUMMARY_METRICS] + ["error"]
    rows, failures = [], []
    per_label = {l: [] for l in labels}
    for label, seed, record, err in results:
        if record is None:
            failures.append((label, seed, err))
            rows.append(["failed", label] + [seed] + [None] * (len(cols) - 1) + [None] * len(SUMMARY_METRICS) + [err])
            continue
        per_label[label].append(dict(zip(cols, record)))
        rows.append(["run", label] + record + [None] * len(SUMMARY_METRICS) + [None])
    for label in labels:
        recs = per_label[label]
        if not recs:
            continue
        stats = {m: summarize(np.array([r[m] for r in recs])) for m in SUMMARY_METRICS}
        base = {c: None for c in cols}
        base["method"] = recs[0]["method"]
        for m in SUMMARY_METRICS:
            base[m] = stats[m][0]
        rows.append(["summary", label] + [base[c] for c in cols] + [stats[m][1] for m in SUMMARY_METRICS] + [None])
    return SweepResult(header, rows, failures)


def sweep(cfg: ExperimentConfig, seeds: Sequence[int], methods: Sequence[str], out_dir, threads: int = 1) -> SweepResult:
    out = Path(out_dir)
    raw = cfg.to_dict()
    jobs = [(raw, s, m, {"method": m}, out / m / f"seed_{s}") for m in methods for s in seeds]
    res = _grouped_rows("label", list(methods), _execute(jobs, threads))
    write_csv(out / "summary.csv", res.header, res.rows)
    return res


def ablate(cfg: ExperimentConfig, seeds: Sequence[int], out_dir, threads: int = 1) -> SweepResult:
    """Table-shaped ablation: one summary row per flag combination plus the ERM baseline."""
    out = Path(out_dir)
    raw = cfg.to_dict()
    jobs = [(raw, s, name, flags, out / name / f"seed_{s}")
            for name, flags in ABLATION_VARIANTS.items() for s in seeds]
    res = _grouped_rows("variant", list(ABLATION_VARIANTS), _execute(jobs, threads))
    write_csv(out / "runs.csv", res.header, res.rows)
    header = ["variant", "mix_cd", "mix_ncd", "discard_cd", "runs"] + \
        [c for m in SUMMARY_METRICS for c in (m, f"{m}_std")]
    table = []
    for row in res.rows:
        if row[0] != "summary":
            continue
        name = row[1]
        flags = ABLATION_VARIANTS[name]
        stats = dict(zip(res.header, row))
        n = sum(1 for r in res.rows if r[0] == "run" and r[1] == name)
        table.append([name, flags.get("mix_cd", False), flags.get("mix_ncd", False), flags.get("discard_cd", False), n]
                     + [v for m in SUMMARY_METRICS for v in (stats[m], stats[f"{m}_std"])])
    write_csv(out / "ablation.csv", header, table)
    return SweepResult(header, table, res.failures)


# --------------------------------------------------------------------------
# MMD study
# --------------------------------------------------------------------------

def feature_hash(z: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(z, dtype=np.float64).tobytes()).hexdigest()


def shared_features(params: models.ModelParams, bundle: DatasetBundle, batch_size: int,
                    rng: np.random.Generator):
    """Validation rows of the training domains, ordered as domain-balanced batches."""
    x, y, d = bundle.select("val")
    per = batch_size // bundle.num_domains
    idx = np.concatenate(training.balanced_chunks(d, per, rng))
    return models.forward_array(params.extractor, x[idx]), y[idx], d[idx]


def augment_in_batches(method: str, params, z, y, d, rng, tc: training.TrainConfig) -> np.ndarray:
    if method == "identity":
        return z.copy()
    bs = tc.batch_size
    parts = []
    for b, s in enumerate(range(0, len(z), bs)):
        q = training.tau_d_level(b * tc.n_tau, tc.n_tau) if tc.tau_d_override is None else tc.tau_d_override
        parts.append(training.augment_features(method, params, z[s:s + bs], y[s:s + bs], d[s:s + bs], rng, tc, q))
    return np.vstack(parts)


def mmd_for_model(params: models.ModelParams, bundle: DatasetBundle, tc: training.TrainConfig,
                  seed: int, bandwidth: Optional[float] = None, methods: Sequence[str] = MMD_METHODS) -> list[dict]:
    """mmd(augmented, original) for each augmenter on one shared feature set."""
    streams = np.random.SeedSequence([seed, 7]).spawn(len(methods) + 1)
    z, y, d = shared_features(params, bundle, tc.batch_size, np.random.default_rng(streams[0]))
    h = metrics.median_heuristic(z, z) if bandwidth is None else float(bandwidth)
    digest = feature_hash(z)
    rows = []
    for method, ss in zip(methods, streams[1:]):
        z_aug = augment_in_batches(method, params, z, y, d, np.random.default_rng(ss), tc)
        if feature_hash(z) != digest:
            raise RuntimeError("original features were modified by an augmenter")
        rows.append({"seed": seed, "method": method, "mmd": metrics.mmd(z_aug, z, h),
                     "bandwidth": h, "num_points": len(z), "feature_sha1": digest})
    return rows


def mmd_study(cfg: ExperimentConfig, seeds: Sequence[int], out_dir, bandwidth: Optional[float] = None,
              models_by_seed: Optional[dict] = None) -> list[dict]:
    """Features come from an XDomainMix model per seed; each augmenter reuses them."""
    cfg = cfg.with_train(method="xdomainmix")
    rows = []
    for seed in seeds:
        if models_by_seed and seed in models_by_seed:
            params, bundle = models_by_seed[seed]
        else:
            result, bundle = train_from_config(cfg, seed)
            params = result.params
        rows.extend(mmd_for_model(params, bundle, cfg.train_config(seed), seed, bandwidth))
    header = ["row_type", "seed", "method", "mmd", "mmd_std", "bandwidth", "num_points", "feature_sha1"]
    table = [["run", r["seed"], r["method"], r["mmd"], None, r["bandwidth"], r["num_points"], r["feature_sha1"]] for r in rows]
    for m in MMD_METHODS:
        mean, std = summarize(np.array([r["mmd"] for r in rows if r["method"] == m]))
        table.append(["summary", None, m, mean, std, None, None, None])
    if out_dir is not None:
        write_csv(Path(out_dir) / "mmd.csv", header, table)
    return rows


# --------------------------------------------------------------------------
# removal, feature dump, projection
# --------------------------------------------------------------------------

def check_compatible(params: models.ModelParams, bundle: DatasetBundle) -> None:
    a = params.arch
    if a is not None and (a.input_dim, a.num_classes, a.num_domains) != (bundle.input_dim, bundle.num_classes, bundle.num_domains):
        raise ValueError(f"checkpoint expects (input_dim, classes, domains) = "
                         f"{(a.input_dim, a.num_classes, a.num_domains)}, dataset has "
                         f"{(bundle.input_dim, bundle.num_classes, bundle.num_domains)}")


def removal_table(params, bundle: DatasetBundle, strategy: str, fractions: Sequence[float],
                  target: str = "class", seed: int = 0, repeats: int = 10) -> list[tuple[float, float]]:
    check_compatible(params, bundle)
    x, y, d = bundle.select("val")
    labels = y if target == "class" else d
    accs = metrics.removal_study(params, x, labels, strategy, fractions, target,
                                 np.random.default_rng(seed), repeats=repeats)
    return list(zip(fractions, accs))


def removal_csv(params, bundle, strategy, fractions, target, out_path, seed: int = 0) -> list:
    table = removal_table(params, bundle, strategy, fractions, target, seed)
    write_csv(out_path, ["fraction", "accuracy"], table)
    return table


def dump_features(params, bundle: DatasetBundle, tc: training.TrainConfig, out_path, seed: int = 0) -> None:
    check_compatible(params, bundle)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    z, y, d = shared_features(params, bundle, tc.batch_size, rng)
    z_aug = augment_in_batches(tc.method.value, params, z, y, d, rng, tc)
    k = z.shape[1]
    rows = [list(r) + [int(c), int(e), "orig"] for r, c, e in zip(z, y, d)]
    rows += [list(r) + [int(c), int(e), "aug"] for r, c, e in zip(z_aug, y, d)]
    write_csv(out_path, [f"dim_{i}" for i in range(k)] + ["y", "domain", "tag"], rows)


def projection(params, bundle: DatasetBundle, out_path, seed: int = 0, split: str = "val") -> np.ndarray:
    check_compatible(params, bundle)
    x, y, d = bundle.select(split)
    z = models.forward_array(params.extractor, x)
    coords = metrics.project_2d(z, y, np.random.default_rng(seed))
    write_csv(out_path, ["px", "py", "y", "domain"], [[p[0], p[1], int(c), int(e)] for p, c, e in zip(coords, y, d)])
    return coords
