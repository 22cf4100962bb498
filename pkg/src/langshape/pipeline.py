"""End-to-end experiment stages with file outputs.

Every stage is a pure function of the configuration and master seed.  RL
stages go through a job ledger (one JSON line per finished run), so an
interrupted stage resumes where it stopped and never duplicates a record.
Files are written to a temporary name and renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
import tempfile
from collections import defaultdict
from dataclasses import asdict, replace
from multiprocessing import get_context
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dataset as ds
from . import lang, learnnet, metrics
from .config import ExperimentConfig
from .env import ACTION_NAMES, N_COMMON_ACTIONS
from .rl import EXT_LANG, EXT_ONLY, TrainingCurve, train_policy
from .seeding import subseed, substream
from .shaping import ShapingConfig
from .vecenv import compiled

log = logging.getLogger(__name__)


# -- file helpers ----------------------------------------------------------------

_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.chmod(tmp, 0o666 & ~_UMASK)  # mkstemp creates 0600 files
    os.replace(tmp, path)


def write_csv(path: str | Path, rows: Sequence[dict], config_hash: str, columns: Sequence[str] | None = None) -> None:
    """CSV with a header row and a trailing ``config_hash`` column."""
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    columns = [c for c in columns if c != "config_hash"] + ["config_hash"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**{k: _fmt(v) for k, v in r.items()}, "config_hash": config_hash})
    atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    if isinstance(v, (np.floating,)):
        return _fmt(float(v))
    return v


def read_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_").lower()


# -- data ------------------------------------------------------------------------

def data_paths(cfg: ExperimentConfig) -> dict[str, Path]:
    d = cfg.out / "data"
    return {
        "corpus_train": d / "corpus_train.jsonl",
        "corpus_val": d / "corpus_val.jsonl",
        "pairs_train": d / "pairs_train.jsonl",
        "pairs_val": d / "pairs_val.jsonl",
        "embeddings": d / "embeddings_50d.txt",
        "summary": d / "summary.json",
    }


def make_clips(cfg: ExperimentConfig, names: Sequence[str], part: str) -> list[ds.AnnotatedClip]:
    layouts = cfg.load_layouts()
    dc = cfg.data
    clips = []
    for name in names:
        room = compiled(layouts[name])
        rng = substream(cfg.master_seed, "data", "trajectories", name)
        for k in range(dc.trajectories_per_layout):
            traj = ds.generate_trajectory(room, dc.trajectory_length, rng, trajectory_id=f"{name}/{k}")
            clips += ds.extract_clips(traj, dc.clip_len, dc.stride)
    ds.annotate(clips, substream(cfg.master_seed, "data", "annotate", part), layouts,
                n_descriptions=dc.n_descriptions, typo_rate=dc.typo_rate)
    return clips


def gen_data(cfg: ExperimentConfig) -> dict:
    """Trajectories -> clips -> descriptions -> labelled pairs, plus a 50-d word vector file."""
    train_names, val_names = cfg.split()
    paths = data_paths(cfg)
    train_clips = make_clips(cfg, train_names, "train")
    val_clips = make_clips(cfg, val_names, "val")
    train_pairs = ds.build_dataset(train_clips, cfg.data.n_train_pairs, substream(cfg.master_seed, "data", "pairs", "train"))
    val_pairs = ds.build_dataset(val_clips, cfg.data.n_val_pairs, substream(cfg.master_seed, "data", "pairs", "val"))
    ds.save_corpus(train_clips, paths["corpus_train"])
    ds.save_corpus(val_clips, paths["corpus_val"])
    ds.save_pairs(train_pairs, paths["pairs_train"])
    ds.save_pairs(val_pairs, paths["pairs_val"])
    # no pretrained vectors ship with the package, so fit PPMI-SVD vectors on the training text
    words, matrix = lang.cooccurrence_embeddings([d for c in train_clips for d in c.descriptions], cfg.data.embedding_dim)
    lang.save_embeddings(words, matrix, paths["embeddings"])
    per_clip = sorted({len(c.descriptions) for c in train_clips + val_clips})
    summary = {
        "train_layouts": train_names,
        "val_layouts": val_names,
        "train_clips": len(train_clips),
        "val_clips": len(val_clips),
        "descriptions_per_clip": per_clip,
        "distinct_descriptions": len({d for c in train_clips + val_clips for d in c.descriptions}),
        "train_pairs": len(train_pairs),
        "val_pairs": len(val_pairs),
        "embedding_words": len(words),
        "config_hash": cfg.config_hash(),
    }
    atomic_write_text(paths["summary"], json.dumps(summary, indent=2) + "\n")
    return summary


# -- LEARN -----------------------------------------------------------------------

def checkpoint_path(cfg: ExperimentConfig, mode: str) -> Path:
    return cfg.out / "learn" / f"{slug(mode)}.npz"


def learn_config(cfg: ExperimentConfig, mode: str) -> learnnet.LearnConfig:
    paths = data_paths(cfg)
    lc = replace(cfg.learn, encoder_mode=mode, rng_seed=subseed(cfg.master_seed, "learn", mode))
    if mode == learnnet.GLOVE_RNN:
        lc = replace(lc, embeddings_path=str(paths["embeddings"]), d_word=cfg.data.embedding_dim)
    return lc


def train_learn(cfg: ExperimentConfig, modes: Sequence[str] | None = None, data_dir: str | Path | None = None,
                out: str | Path | None = None) -> dict[str, dict]:
    """One checkpoint and one epoch-log CSV per encoder mode.

    ``data_dir`` replaces the configured data directory; ``out`` is a
    checkpoint file when a single mode is trained, otherwise a directory.
    """
    paths = data_paths(cfg)
    if data_dir is not None:
        paths = {k: Path(data_dir) / v.name for k, v in paths.items()}
    for key in ("pairs_train", "pairs_val"):
        if not paths[key].exists():
            raise ds.ConfigurationError(f"missing {paths[key]}; run gen-data first")
    train_pairs = ds.load_pairs(paths["pairs_train"])
    val_pairs = ds.load_pairs(paths["pairs_val"])
    modes = list(modes or cfg.encoder_modes)
    results = {}
    for mode in modes:
        lc = learn_config(cfg, mode)
        if mode == learnnet.GLOVE_RNN:
            lc = replace(lc, embeddings_path=str(paths["embeddings"]))
        model, history = learnnet.train(lc, train_pairs, val_pairs, np.random.default_rng(lc.rng_seed))
        best = max(history, key=lambda r: r["val_accuracy"])
        ckpt = checkpoint_path(cfg, mode)
        if out is not None:
            ckpt = Path(out) if len(modes) == 1 and Path(out).suffix == ".npz" else Path(out) / ckpt.name
        learnnet.save_checkpoint(model, ckpt, extra={"best_epoch": best["epoch"], "val_accuracy": best["val_accuracy"]})
        write_csv(ckpt.with_suffix(".epochs.csv"), history, cfg.config_hash())
        results[mode] = {"checkpoint": str(ckpt), "best_epoch": best["epoch"], "val_accuracy": best["val_accuracy"]}
    return results


_MODEL_CACHE: dict[str, learnnet.LearnModel] = {}


def load_learn(cfg: ExperimentConfig, mode: str) -> learnnet.LearnModel:
    path = str(checkpoint_path(cfg, mode))
    if path not in _MODEL_CACHE:
        if not os.path.exists(path):
            raise ds.ConfigurationError(f"missing checkpoint {path}; run train-learn first")
        _MODEL_CACHE[path] = learnnet.load_checkpoint(path)
    return _MODEL_CACHE[path]


# -- RL jobs -----------------------------------------------------------------------

def setting_id(mode: str, lam: float) -> str:
    return f"{mode}|lam={lam:g}"


def parse_setting(sid: str) -> tuple[str, float]:
    mode, lam = sid.split("|lam=")
    return mode, float(lam)


def job_id(job: dict) -> str:
    keys = ("phase", "task", "description_id", "seed", "reward_mode", "setting", "noise_sigma")
    return "/".join(str(job.get(k, "")) for k in keys)


def run_job(cfg: ExperimentConfig, job: dict) -> dict:
    """Train one policy and return its JSON-serialisable record."""
    layouts = cfg.load_layouts()
    layout = layouts[job["task"]]
    room = compiled(layout)
    text = layout.descriptions[job["description_id"]]
    seed = subseed(cfg.master_seed, job["phase"], "rl", job["task"], job["description_id"], job["seed"])
    mode = job["reward_mode"]
    model, lam, enc = None, 0.0, ""
    if mode == EXT_LANG:
        enc, lam = parse_setting(job["setting"])
        model = load_learn(cfg, enc)
    shaping = replace(cfg.shaping, lam=lam, noise_sigma=job.get("noise_sigma", 0.0))
    res = train_policy(room, job["timesteps"], seed, mode, shaping, model, text, cfg.rl.ppo,
                       eval_timesteps=job.get("eval_timesteps", 0),
                       log_correlation=job.get("log_correlation", False))
    rec = {**job, "job_id": job_id(job), "description": text, "lam": lam, "encoder_mode": enc,
           "run_seed": seed, "config_hash": cfg.config_hash(), "curve": res.curve.points(), "auc": metrics.auc(res.curve),
           "final_successes": res.final_successes, "train_successes": int(res.curve.successes[-1])}
    if res.correlation_log is not None:
        F, p = res.correlation_log
        rec["correlation"] = metrics.action_correlations(F, p)
    return rec


class JobLedger:
    """Append-only JSON-lines file of finished run records, keyed by job id."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.records: dict[str, dict] = {}
        if self.path.exists():
            self._drop_torn_tail()
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        continue  # a torn final line from an interrupted write
                    self.records[rec["job_id"]] = rec

    def _drop_torn_tail(self) -> None:
        # an interrupted append can leave a partial last line; cut it so the next record starts clean
        data = self.path.read_bytes()
        if data and not data.endswith(b"\n"):
            with open(self.path, "r+b") as fh:
                fh.truncate(data.rfind(b"\n") + 1)

    def done(self, job: dict) -> bool:
        return job_id(job) in self.records

    def add(self, rec: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            line = json.dumps(rec, sort_keys=True)
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.records[rec["job_id"]] = json.loads(line)


def _worker(args):
    cfg, job = args
    return run_job(cfg, job)


def run_jobs(cfg: ExperimentConfig, jobs: Sequence[dict], ledger: JobLedger, workers: int | None = None) -> list[dict]:
    """Run the jobs missing from ``ledger`` and return all records in job order."""
    todo = [j for j in jobs if not ledger.done(j)]
    workers = workers or cfg.workers
    log.info("%d jobs, %d already done", len(jobs), len(jobs) - len(todo))
    if todo:
        if workers <= 1:
            for k, job in enumerate(todo):
                ledger.add(run_job(cfg, job))
                log.info("finished %s (%d/%d)", job_id(job), k + 1, len(todo))
        else:
            with get_context("spawn").Pool(workers) as pool:
                for rec in pool.imap_unordered(_worker, [(cfg, j) for j in todo]):
                    ledger.add(rec)
    return [ledger.records[job_id(j)] for j in jobs]


def records_to_rows(records: Iterable[dict]) -> list[dict]:
    rows = []
    for r in records:
        row = {k: v for k, v in r.items() if k not in ("curve", "correlation")}
        for name, rho in (r.get("correlation") or {}).items():
            row[f"rho_{name}"] = rho
        rows.append(row)
    return rows


# -- hyperparameter selection -----------------------------------------------------

def grid(cfg: ExperimentConfig) -> list[str]:
    return [setting_id(m, l) for m in cfg.encoder_modes for l in cfg.lambdas]


def selection_jobs(cfg: ExperimentConfig) -> list[dict]:
    jobs = []
    for sid in grid(cfg):
        for task in cfg.test_tasks:
            for d in range(cfg.rl.n_descriptions):
                for s in range(cfg.rl.selection_seeds):
                    jobs.append({"phase": "select", "task": task, "description_id": d, "seed": s,
                                 "reward_mode": EXT_LANG, "setting": sid,
                                 "timesteps": cfg.rl.selection_timesteps})
    return jobs


def auc_table(records: Iterable[dict]) -> dict[str, dict[str, float]]:
    """Mean AUC per (setting, task)."""
    acc: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        acc[r["setting"]][r["task"]].append(r["auc"])
    return {s: {t: float(np.mean(v)) for t, v in sorted(d.items())} for s, d in sorted(acc.items())}


def select_hyperparams(cfg: ExperimentConfig) -> dict[str, str]:
    """Leave-one-task-out rank aggregation; writes the AUC and selection tables."""
    out = cfg.out / "select"
    records = run_jobs(cfg, selection_jobs(cfg), JobLedger(out / "records.jsonl"))
    table = auc_table(records)
    if len(table) == 1:
        only = next(iter(table))
        chosen = {t: only for t in cfg.test_tasks}
    else:
        chosen = metrics.leave_one_out_selection(table)
    h = cfg.config_hash()
    write_csv(out / "auc_table.csv", [{"setting": s, **row} for s, row in table.items()], h)
    rows = []
    for task in cfg.test_tasks:
        others = [t for t in cfg.test_tasks if t != task] or [task]
        ranks = metrics.mean_ranks(table, others)
        rows.append({"task": task, "setting": chosen[task], "mean_rank": ranks[chosen[task]]})
    write_csv(out / "selection.csv", rows, h)
    return chosen


def load_selection(cfg: ExperimentConfig) -> dict[str, str]:
    path = cfg.out / "select" / "selection.csv"
    if not path.exists():
        raise ds.ConfigurationError(f"missing {path}; run select-hyperparams first")
    return {r["task"]: r["setting"] for r in read_csv(path)}


# -- headline experiment -----------------------------------------------------------

CORRELATION_TASK = "r10_ladder_descent"


def experiment_jobs(cfg: ExperimentConfig, selection: dict[str, str]) -> list[dict]:
    jobs = []
    for task in cfg.test_tasks:
        for d in range(cfg.rl.n_descriptions):
            for s in range(cfg.rl.n_seeds):
                base = {"phase": "main", "task": task, "description_id": d, "seed": s,
                        "timesteps": cfg.rl.total_timesteps, "eval_timesteps": cfg.rl.eval_timesteps}
                jobs.append({**base, "reward_mode": EXT_ONLY, "setting": ""})
                jobs.append({**base, "reward_mode": EXT_LANG, "setting": selection[task],
                             "log_correlation": True})
    return jobs


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
    out = cfg.out / "main"
    records = run_jobs(cfg, experiment_jobs(cfg, load_selection(cfg)), JobLedger(out / "records.jsonl"))
    write_csv(out / "runs.csv", records_to_rows(records), cfg.config_hash())
    return records


# -- analysis --------------------------------------------------------------------

def load_records(path: str | Path) -> list[dict]:
    return list(JobLedger(path).records.values())


def _curve(rec: dict) -> TrainingCurve:
    pts = np.asarray(rec["curve"], dtype=np.float64)
    return TrainingCurve(pts[:, 0], pts[:, 1])


def comparison_rows(records: Sequence[dict], metric: str, alpha: float = metrics.ALPHA) -> list[dict]:
    """Per task: Ext+Lang vs ExtOnly means, Welch test and a significance verdict."""
    by = defaultdict(lambda: defaultdict(list))
    for r in sorted(records, key=lambda r: r["job_id"]):
        by[r["task"]][r["reward_mode"]].append(float(r[metric]))
    rows = []
    for task in sorted(by):
        lang_v, ext_v = by[task][EXT_LANG], by[task][EXT_ONLY]
        if len(lang_v) < 2 or len(ext_v) < 2:
            continue
        res = metrics.welch_t_test(lang_v, ext_v)
        rows.append({"task": task, "metric": metric, "n_ext_lang": len(lang_v), "n_ext_only": len(ext_v),
                     "mean_ext_lang": float(np.mean(lang_v)), "mean_ext_only": float(np.mean(ext_v)),
                     "t": res.t, "df": res.df, "p": res.p, "verdict": metrics.compare(lang_v, ext_v, alpha)})
    return rows


def correlation_rows(records: Sequence[dict]) -> list[dict]:
    """Spearman rho per action averaged over runs, per (task, description)."""
    by = defaultdict(list)
    for r in records:
        if r.get("correlation"):
            by[(r["task"], r["description"])].append(r["correlation"])
    rows = []
    for (task, desc), runs in sorted(by.items()):
        row = {"task": task, "description": desc, "n_runs": len(runs)}
        for name in ACTION_NAMES[:N_COMMON_ACTIONS]:
            vals = [c[name] for c in runs if c[name] is not None and np.isfinite(c[name])]
            row[name] = float(np.mean(vals)) if vals else float("nan")
        rows.append(row)
    return rows


def band_rows(records: Sequence[dict], group_keys=("task", "reward_mode")) -> list[dict]:
    groups = defaultdict(list)
    for r in sorted(records, key=lambda r: r["job_id"]):
        groups[tuple(r[k] for k in group_keys)].append(_curve(r))
    rows = []
    for key, curves in sorted(groups.items()):
        if len(curves) < 2:
            continue
        grid_x, mean, half = metrics.confidence_band(curves)
        for x, m, h in zip(grid_x, mean, half):
            rows.append({**dict(zip(group_keys, key)), "timesteps": int(x), "mean": m, "lo": m - h, "hi": m + h})
    return rows


def summary_text(auc_rows: list[dict], final_rows: list[dict]) -> str:
    lines = ["Ext+Lang against ExtOnly, Welch two-sided test at alpha = %.2f" % metrics.ALPHA, ""]
    for label, rows in (("AUC", auc_rows), ("Final policy", final_rows)):
        counts = defaultdict(int)
        lines.append(f"{label}:")
        for r in rows:
            counts[r["verdict"]] += 1
            lines.append(f"  {r['task']:<24} {r['mean_ext_lang']:>14.1f} vs {r['mean_ext_only']:>14.1f}"
                         f"  p={r['p']:.3g}  {r['verdict']}")
        lines.append(f"  improvement {counts['improvement']} / deterioration {counts['deterioration']}"
                     f" / none {counts['none']}")
        lines.append("")
    return "\n".join(lines)


def analyze(run_dir: str | Path, config_hash: str = "") -> dict:
    """All report CSVs plus a plain-text summary for a directory holding records.jsonl."""
    run_dir = Path(run_dir)
    records = load_records(run_dir / "records.jsonl")
    if not records:
        raise ds.ConfigurationError(f"no run records in {run_dir}")
    if not config_hash:
        hashes = {r.get("config_hash", "") for r in records}
        config_hash = hashes.pop() if len(hashes) == 1 else ""
    auc_rows = comparison_rows(records, "auc")
    final_rows = comparison_rows([r for r in records if r.get("final_successes") is not None], "final_successes")
    corr = correlation_rows(records)
    bands = band_rows(records)
    rep = run_dir / "report"
    write_csv(rep / "auc_comparison.csv", auc_rows, config_hash)
    write_csv(rep / "final_policy_comparison.csv", final_rows, config_hash)
    write_csv(rep / "correlations.csv", corr, config_hash)
    write_csv(rep / "confidence_bands.csv", bands, config_hash)
    text = summary_text(auc_rows, final_rows)
    atomic_write_text(rep / "summary.txt", text)
    return {"auc": auc_rows, "final": final_rows, "correlation": corr, "summary": text}


# -- sensitivity -----------------------------------------------------------------

def sensitivity_jobs(cfg: ExperimentConfig, sigmas: Sequence[float], setting: str) -> list[dict]:
    sc = cfg.sensitivity
    jobs = []
    for s in range(sc.n_seeds):
        base = {"phase": "sensitivity", "task": sc.task, "description_id": 0, "seed": s,
                "timesteps": cfg.rl.total_timesteps}
        jobs.append({**base, "reward_mode": EXT_ONLY, "setting": "", "noise_sigma": 0.0})
        for sigma in (0.0, *sigmas):
            jobs.append({**base, "reward_mode": EXT_LANG, "setting": setting, "noise_sigma": float(sigma)})
    return jobs


def sensitivity(cfg: ExperimentConfig, sigmas: Sequence[float] | None = None) -> list[dict]:
    """Ext+Lang runs under potential noise for each sigma, plus sigma = 0 and the ExtOnly baseline."""
    sigmas = list(cfg.sensitivity.sigmas if sigmas is None else sigmas)
    setting = load_selection(cfg)[cfg.sensitivity.task]
    out = cfg.out / "sensitivity"
    records = run_jobs(cfg, sensitivity_jobs(cfg, sigmas, setting), JobLedger(out / "records.jsonl"))
    h = cfg.config_hash()
    write_csv(out / "runs.csv", records_to_rows(records), h)
    write_csv(out / "bands.csv", band_rows(records, ("reward_mode", "noise_sigma")), h)
    return records
