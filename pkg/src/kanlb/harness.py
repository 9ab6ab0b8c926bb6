"""Seeded multi-episode evaluation, CCDF tables, comparisons, and file export.

Every policy is run against the same per-episode traffic (common random
numbers: episode i uses seed_base + i), with the deterministic policy mean by
default, so reports are directly comparable and bit-reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .neural import GaussianPolicy
from .simnet import EpisodeConfig, LoadBalanceEnv, SimParams

REPORT_SCHEMA = "kanlb-report-v1"

METRICS = ("satisfaction", "loss", "delay")

METRIC_LABELS = {
    "satisfaction": "throughput utility (mean demand satisfied per step)",
    "loss": "overall loss ratio per step",
    "delay": "overall mean delay per step [s]",
}


class ElBaseline:
    """Marker policy: capacity-proportional flow placement inside the env."""

    policy_id = "el-baseline"

    def act(self, obs: np.ndarray) -> float:  # pragma: no cover - never used
        return 0.0


class NetworkPolicy:
    """Checkpointed actor evaluated at its clamped mean (or sampled)."""

    def __init__(self, policy: GaussianPolicy, policy_id: str = "policy"):
        self.policy = policy
        self.policy_id = policy_id

    def act(self, obs: np.ndarray) -> float:
        return self.policy.act(obs)

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> float:
        action, _ = self.policy.sample(obs, rng)
        return float(min(1.0, max(-1.0, action)))


# --------------------------------------------------------------------------
# CCDF
# --------------------------------------------------------------------------

@dataclass
class CcdfTable:
    xs: np.ndarray      # sorted unique thresholds
    probs: np.ndarray   # P(X > x) at each threshold

    def evaluate(self, x: float) -> float:
        """P(X > x); 1 below the sample minimum, 0 at and above the maximum."""
        idx = np.searchsorted(self.xs, x, side="right") - 1
        if idx < 0:
            return 1.0
        return float(self.probs[idx])

    def to_dict(self) -> dict:
        return {"xs": self.xs.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CcdfTable":
        return cls(np.asarray(d["xs"], float), np.asarray(d["probs"], float))


def ccdf(samples: np.ndarray) -> CcdfTable:
    """Empirical complementary CDF at the sorted unique sample points."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("ccdf needs at least one sample")
    if not np.isfinite(samples).all():
        raise ValueError("ccdf samples must be finite")
    xs, counts = np.unique(samples, return_counts=True)
    n = samples.size
    exceed = n - np.cumsum(counts)          # samples strictly above each x
    return CcdfTable(xs, exceed / n)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    policy_id: str
    episodes: int
    seed_base: int
    action_mode: str
    params_tag: str
    ep_reward_utility: np.ndarray
    ep_reward_loss: np.ndarray
    satisfaction: np.ndarray
    loss: np.ndarray
    delay: np.ndarray
    summary: dict = field(default_factory=dict)
    ccdfs: dict = field(default_factory=dict)

    def seed_set(self) -> tuple:
        return (self.episodes, self.seed_base, self.action_mode, self.params_tag)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "policy_id": self.policy_id,
            "episodes": self.episodes,
            "seed_base": self.seed_base,
            "action_mode": self.action_mode,
            "params_tag": self.params_tag,
            "summary": self.summary,
            "ep_reward_utility": self.ep_reward_utility.tolist(),
            "ep_reward_loss": self.ep_reward_loss.tolist(),
            "samples": {
                "satisfaction": self.satisfaction.tolist(),
                "loss": self.loss.tolist(),
                "delay": self.delay.tolist(),
            },
            "ccdfs": {k: v.to_dict() for k, v in self.ccdfs.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError("not an evaluation report")
        report = cls(
            policy_id=d["policy_id"],
            episodes=int(d["episodes"]),
            seed_base=int(d["seed_base"]),
            action_mode=d["action_mode"],
            params_tag=d["params_tag"],
            ep_reward_utility=np.asarray(d["ep_reward_utility"], float),
            ep_reward_loss=np.asarray(d["ep_reward_loss"], float),
            satisfaction=np.asarray(d["samples"]["satisfaction"], float),
            loss=np.asarray(d["samples"]["loss"], float),
            delay=np.asarray(d["samples"]["delay"], float),
            summary=d["summary"],
        )
        report.ccdfs = {k: CcdfTable.from_dict(v) for k, v in d["ccdfs"].items()}
        return report


def params_tag(params: SimParams) -> str:
    """Stable fingerprint of the simulation constants, for paired comparisons."""
    items = sorted(vars(params).items())
    return json.dumps(items, sort_keys=True)


def run_eval(policy, params: SimParams, episodes: int, seed_base: int,
             policy_id: str | None = None, action_mode: str = "mean") -> EvalReport:
    """Run seeded episodes and collect rewards plus per-step network metrics."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if action_mode not in ("mean", "sample"):
        raise ValueError(f"unknown action_mode {action_mode!r}")
    pid = policy_id or getattr(policy, "policy_id", "policy")
    is_el = isinstance(policy, ElBaseline)
    env = LoadBalanceEnv(params, controller="el" if is_el else "ratio")

    n_steps = params.steps_per_episode
    ep_util = np.zeros(episodes)
    ep_loss = np.zeros(episodes)
    sat = np.zeros(episodes * n_steps)
    loss = np.zeros(episodes * n_steps)
    delay = np.zeros(episodes * n_steps)

    for i in range(episodes):
        config = EpisodeConfig.random(params, np.random.default_rng(seed_base + i))
        obs = env.reset(config)
        sample_rng = (np.random.default_rng(np.random.SeedSequence([seed_base + i, 7]))
                      if action_mode == "sample" else None)
        for t in range(n_steps):
            if is_el:
                action = 0.0
            elif action_mode == "sample":
                action = policy.sample(obs, sample_rng)
            else:
                action = policy.act(obs)
            out = env.step(action)
            k = i * n_steps + t
            sat[k] = out.info["satisfaction"]
            loss[k] = out.info["loss_overall"]
            delay[k] = out.info["delay_overall"]
            ep_util[i] += out.reward_utility
            ep_loss[i] += out.reward_loss
            obs = out.obs

    report = EvalReport(
        policy_id=pid,
        episodes=episodes,
        seed_base=seed_base,
        action_mode=action_mode,
        params_tag=params_tag(params),
        ep_reward_utility=ep_util,
        ep_reward_loss=ep_loss,
        satisfaction=sat,
        loss=loss,
        delay=delay,
    )
    report.summary = {
        "reward_utility_mean": float(ep_util.mean()),
        "reward_utility_std": float(ep_util.std()),
        "reward_loss_mean": float(ep_loss.mean()),
        "reward_loss_std": float(ep_loss.std()),
        "satisfaction_mean": float(sat.mean()),
        "loss_mean": float(loss.mean()),
        "delay_mean": float(delay.mean()),
    }
    report.ccdfs = {
        "satisfaction": ccdf(sat),
        "loss": ccdf(loss),
        "delay": ccdf(delay),
    }
    return report


# --------------------------------------------------------------------------
# Comparison
# --------------------------------------------------------------------------

@dataclass
class Comparison:
    rows: list[dict]
    best_utility: str
    best_loss: str
    ccdfs: dict            # metric -> list of (policy_id, CcdfTable)

    def to_dict(self) -> dict:
        return {
            "schema": "kanlb-comparison-v1",
            "rows": self.rows,
            "best_utility": self.best_utility,
            "best_loss": self.best_loss,
            "ccdfs": {
                metric: [[pid, table.to_dict()] for pid, table in series]
                for metric, series in self.ccdfs.items()
            },
        }


def compare(reports: list[EvalReport]) -> Comparison:
    """Side-by-side reward table plus CCDF overlays for paired reports."""
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    seed_sets = {r.seed_set() for r in reports}
    if len(seed_sets) != 1:
        raise ValueError(
            "reports were produced under different seed sets or simulator "
            "settings; comparison would be confounded"
        )
    rows = []
    for r in reports:
        rows.append({
            "policy": r.policy_id,
            "utility_mean": r.summary["reward_utility_mean"],
            "utility_std": r.summary["reward_utility_std"],
            "loss_mean": r.summary["reward_loss_mean"],
            "loss_std": r.summary["reward_loss_std"],
        })
    best_utility = max(rows, key=lambda row: row["utility_mean"])["policy"]
    best_loss = max(rows, key=lambda row: row["loss_mean"])["policy"]
    ccdfs = {
        metric: [(r.policy_id, r.ccdfs[metric]) for r in reports]
        for metric in METRICS
    }
    return Comparison(rows, best_utility, best_loss, ccdfs)


# --------------------------------------------------------------------------
# Export: JSON reports, CSV tables, SVG plots
# --------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def export_report(report: EvalReport, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    stem = safe_name(report.policy_id)
    json_path = out_dir / f"{stem}_report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    paths.append(json_path)
    for metric in METRICS:
        path = out_dir / f"{stem}_ccdf_{metric}.csv"
        write_ccdf_csv(path, report.ccdfs[metric])
        paths.append(path)
    return paths


def write_ccdf_csv(path: str | Path, table: CcdfTable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "prob"])
        for x, p in zip(table.xs, table.probs):
            writer.writerow([_fmt(x), _fmt(p)])


def read_ccdf_csv(path: str | Path) -> CcdfTable:
    xs, probs = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["x", "prob"]:
            raise ValueError(f"{path}: not a CCDF table")
        for row in reader:
            xs.append(float(row[0]))
            probs.append(float(row[1]))
    return CcdfTable(np.asarray(xs), np.asarray(probs))


COMPARISON_HEADER = ["policy", "utility_mean", "utility_std", "loss_mean",
                     "loss_std", "best_utility", "best_loss"]


def export_comparison(comp: Comparison, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    csv_path = out_dir / "comparison.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARISON_HEADER)
        for row in comp.rows:
            writer.writerow([
                row["policy"],
                _fmt(row["utility_mean"]), _fmt(row["utility_std"]),
                _fmt(row["loss_mean"]), _fmt(row["loss_std"]),
                str(row["policy"] == comp.best_utility),
                str(row["policy"] == comp.best_loss),
            ])
    paths.append(csv_path)

    json_path = out_dir / "comparison.json"
    json_path.write_text(json.dumps(comp.to_dict(), indent=1, sort_keys=True))
    paths.append(json_path)

    for metric, series in comp.ccdfs.items():
        csv_m = out_dir / f"ccdf_{metric}.csv"
        with open(csv_m, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["policy", "x", "prob"])
            for pid, table in series:
                for x, p in zip(table.xs, table.probs):
                    writer.writerow([pid, _fmt(x), _fmt(p)])
        paths.append(csv_m)

        svg = svg_line_plot(
            [(pid, table.xs, table.probs) for pid, table in series],
            title=f"CCDF of {METRIC_LABELS[metric]}",
            xlabel=METRIC_LABELS[metric],
            ylabel="P(X > x)",
        )
        svg_path = out_dir / f"ccdf_{metric}.svg"
        svg_path.write_text(svg)
        paths.append(svg_path)
    return paths


def read_comparison_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != COMPARISON_HEADER:
            raise ValueError(f"{path}: not a comparison table")
        for row in reader:
            rows.append({
                "policy": row[0],
                "utility_mean": float(row[1]),
                "utility_std": float(row[2]),
                "loss_mean": float(row[3]),
                "loss_std": float(row[4]),
                "best_utility": row[5] == "True",
                "best_loss": row[6] == "True",
            })
    return rows


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def svg_line_plot(series: list[tuple[str, np.ndarray, np.ndarray]], title: str,
                  xlabel: str, ylabel: str, width: int = 640,
                  height: int = 440) -> str:
    """Deterministic, dependency-free SVG line plot: one polyline per series."""
    ml, mr, mt, mb = 70, 160, 40, 55
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = np.concatenate([np.asarray(s[1], float) for s in series])
    ys_all = np.concatenate([np.asarray(s[2], float) for s in series])
    x_lo, x_hi = float(xs_all.min()), float(xs_all.max())
    y_lo, y_hi = min(0.0, float(ys_all.min())), max(1.0, float(ys_all.max()))
    if x_hi == x_lo:
        x_hi = x_lo + 1.0

    def sx(x: float) -> float:
        return ml + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y: float) -> float:
        return mt + ph - (y - y_lo) / (y_hi - y_lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml + pw / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    # axes
    parts.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" '
                 'stroke="black"/>')
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" '
                 'stroke="black"/>')
    for tx in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{sx(tx):.1f}" y1="{mt + ph}" x2="{sx(tx):.1f}" '
                     f'y2="{mt + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{sx(tx):.1f}" y="{mt + ph + 18}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{tx:.4g}</text>')
    for ty in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{ml - 5}" y1="{sy(ty):.1f}" x2="{ml}" '
                     f'y2="{sy(ty):.1f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{sy(ty) + 3:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{ty:.4g}</text>')
    parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12">{xlabel}</text>')
    parts.append(f'<text x="18" y="{mt + ph / 2:.1f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 18 {mt + ph / 2:.1f})">{ylabel}</text>')

    for si, (label, xs, ys) in enumerate(series):
        color = _PALETTE[si % len(_PALETTE)]
        pts = " ".join(f"{sx(float(x)):.2f},{sy(float(y)):.2f}"
                       for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
        ly = mt + 14 + 16 * si
        lx = ml + pw + 10
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 24}" y="{ly}" font-family="sans-serif" '
                     f'font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
