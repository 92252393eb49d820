"""Seed sweeps over sampling conditions, scored by the blob detector.

Every condition sees the same seeds, so each seed yields the same prompt and
the same initial noise under every condition. Deltas against the first
(baseline) condition are formed per seed and tested with a one-sided paired
sign-flip permutation test.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .diffusion.checkpoint import load_checkpoint
from .diffusion.vocab import COLORS, SHAPES, parse_prompt
from .errors import UsageError
from .guidance import GuidanceConfig, LayoutSpec
from .sampler import sample, stream_seed
from .scenes import detect

LEFT, RIGHT = (0.0, 0.0, 0.5, 1.0), (0.5, 0.0, 1.0, 1.0)
N_PERM = 10_000

# metric -> direction that counts as an improvement
METRICS = {
    "presence": "greater",
    "binding": "greater",
    "centroid_in_box": "greater",
    "mean_r": "greater",
    "final_semantic": "less",
    "final_layout": "less",
}


@dataclass(frozen=True)
class Condition:
    name: str
    guidance: Optional[dict] = None  # GuidanceConfig fields; None samples without guidance
    boxes: bool = False  # give the guidance one box per subject

    def gcfg(self) -> Optional[GuidanceConfig]:
        return None if self.guidance is None else GuidanceConfig.from_dict(self.guidance)

    def to_dict(self) -> dict:
        return {"name": self.name, "guidance": self.guidance, "boxes": self.boxes}

    @classmethod
    def from_dict(cls, d: dict) -> "Condition":
        unknown = set(d) - {"name", "guidance", "boxes", "seeds"}
        if unknown:
            raise UsageError(f"unknown condition fields {sorted(unknown)}")
        return cls(d["name"], d.get("guidance"), bool(d.get("boxes", False)))


def eval_prompt(seed: int, master_seed: int = 0):
    """Two-subject prompt with distinct shapes and colors, plus left/right boxes."""
    rng = np.random.default_rng([master_seed, seed, 1])
    s = rng.choice(len(SHAPES), size=2, replace=False)
    c = rng.choice(len(COLORS), size=2, replace=False)
    prompt = parse_prompt(f"{COLORS[c[0]]} {SHAPES[s[0]]} and {COLORS[c[1]]} {SHAPES[s[1]]}")
    layout = LayoutSpec(tuple(zip(prompt.subject_positions, (LEFT, RIGHT))))
    return prompt, layout


def _inside(pt, box) -> bool:
    x0, y0, x1, y1 = box
    return x0 <= pt[0] < x1 and y0 <= pt[1] < y1


def _refinement_summary(trace) -> list[dict]:
    out = []
    for rec in trace:
        ref = rec.get("refinement")
        if not ref or not ref["history"] or not ref["history"][0]:
            continue
        first, last = ref["history"][0], ref["history"][-1]
        j = int(np.argmin(first))
        out.append({"step": ref["step"], "threshold": ref["threshold"], "iterations": ref["iterations"],
                    "met": ref["met"], "neglected_before": first[j], "neglected_after": last[j]})
    return out


def score_sample(image, prompt, layout, step_stats) -> dict:
    det = detect(image)
    present, bound, in_box = [], [], []
    for pos, (_, box) in zip(prompt.subject_positions, layout.entries):
        shape, color = prompt.subject_word(pos), prompt.bound_color(pos)
        found = det.find(shape)
        matched = det.find(shape, color)
        present.append(bool(found))
        bound.append(bool(matched))
        in_box.append(any(_inside(b.centroid, box) for b in (matched or found)))
    ratios = [r for st in step_stats for r in st.get("in_box_ratio", [])]
    last = step_stats[-1]
    r_last = np.asarray(last.get("in_box_ratio", [np.nan]))
    n_present = sum(present)
    return {
        "presence": float(all(present)),
        "subjects_present": present,
        "subjects_bound": bound,
        "binding": (sum(b for b, p in zip(bound, present) if p) / n_present) if n_present else None,
        "centroid_in_box": float(np.mean(in_box)),
        "mean_r": float(np.mean(ratios)) if ratios else None,
        "final_semantic": float(1.0 - min(last["smoothed_max"])),
        "final_layout": float(np.mean((1.0 - r_last) ** 2)),
        "detections": det.to_dict(),
    }


def run_one(model, cond: Condition, seed: int, master_seed: int = 0, sched=None) -> dict:
    prompt, layout = eval_prompt(seed, master_seed)
    gcfg = cond.gcfg()
    res = sample(model, prompt, layout if cond.boxes else None, gcfg, seed=stream_seed(master_seed, seed),
                 sched=sched, stats_layout=layout, stats_cfg=gcfg)
    rec = {"condition": cond.name, "seed": int(seed), "prompt": prompt.text(),
           "boxes": [list(b) for _, b in layout.entries], "guided_steps": len(res.trace),
           "refinements": _refinement_summary(res.trace)}
    rec.update(score_sample(res.image, prompt, layout, res.step_stats))
    return rec, res


# ---------------------------------------------------------------- statistics

def paired_permutation_test(treated, baseline, n_perm: int = N_PERM, alternative: str = "greater",
                            seed: int = 0) -> float:
    """One-sided sign-flip test on per-seed differences; p includes the +1 correction.

    Identical inputs give p = 1.
    """
    d = np.asarray(treated, dtype=np.float64) - np.asarray(baseline, dtype=np.float64)
    if d.size == 0:
        return float("nan")
    if alternative == "less":
        d = -d
    elif alternative != "greater":
        raise ValueError(f"alternative must be 'greater' or 'less', got {alternative!r}")
    observed = d.mean()
    signs = np.random.default_rng(seed).choice((-1.0, 1.0), size=(n_perm, d.size))
    perm = (signs * d).mean(axis=1)
    # tolerance guards against float noise in equal sums
    hits = int(np.sum(perm >= observed - 1e-12))
    return (hits + 1) / (n_perm + 1)


@dataclass
class EvalReport:
    conditions: dict
    deltas: dict
    records: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    def to_dict(self, with_records: bool = False) -> dict:
        d = {"seeds": self.seeds, "conditions": self.conditions, "deltas": self.deltas}
        if with_records:
            d["records"] = self.records
        return d

    def table(self) -> str:
        cols = ["n", "presence", "binding", "centroid_in_box", "mean_r", "final_semantic", "final_layout"]
        lines = ["condition".ljust(16) + "".join(c.rjust(17) for c in cols)]
        for name, agg in self.conditions.items():
            cells = []
            for c in cols:
                v = agg.get(c)
                cells.append(("-" if v is None else (str(v) if c == "n" else f"{v:.4f}")).rjust(17))
            lines.append(name.ljust(16) + "".join(cells))
        lines.append("")
        lines.append("paired deltas vs " + next(iter(self.conditions)) + " (one-sided permutation p)")
        for name, metrics in self.deltas.items():
            parts = [f"{m} {v['delta']:+.4f} (p={v['p_value']:.4f}, n={v['n']})"
                     for m, v in metrics.items() if v["delta"] is not None]
            lines.append(f"  {name}: " + "; ".join(parts))
        return "\n".join(lines)


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(records: list, conditions: Sequence[Condition], seeds: Sequence[int], n_perm: int = N_PERM,
              perm_seed: int = 0) -> EvalReport:
    by = {c.name: {r["seed"]: r for r in records if r["condition"] == c.name} for c in conditions}
    aggs = {}
    for c in conditions:
        rows = [by[c.name][s] for s in seeds]
        agg = {"n": len(rows)}
        for m in METRICS:
            agg[m] = _mean(r[m] for r in rows)
        present = sum(sum(r["subjects_present"]) for r in rows)
        bound = sum(sum(b for b, p in zip(r["subjects_bound"], r["subjects_present"]) if p) for r in rows)
        agg["binding"] = bound / present if present else None
        agg["guided_steps"] = _mean(r["guided_steps"] for r in rows)
        aggs[c.name] = agg
    base = conditions[0].name
    deltas = {}
    for c in conditions[1:]:
        out = {}
        for m, direction in METRICS.items():
            pairs = [(by[c.name][s][m], by[base][s][m]) for s in seeds
                     if by[c.name][s][m] is not None and by[base][s][m] is not None]
            if not pairs:
                out[m] = {"delta": None, "p_value": None, "n": 0}
                continue
            a, b = np.array(pairs).T
            out[m] = {"delta": float(np.mean(a - b)),
                      "p_value": paired_permutation_test(a, b, n_perm, direction, perm_seed),
                      "n": len(pairs)}
        if aggs[c.name]["binding"] is not None and aggs[base]["binding"] is not None:
            out["binding_rate_change"] = {"delta": aggs[c.name]["binding"] - aggs[base]["binding"],
                                          "p_value": out["binding"]["p_value"], "n": out["binding"]["n"]}
        deltas[f"{c.name}-{base}"] = out
    return EvalReport(aggs, deltas, records, list(seeds))


# ---------------------------------------------------------------- sweep driver

_WORKER = {}


def _worker_init(checkpoint: str) -> None:
    _WORKER["model"], _WORKER["sched"], _ = load_checkpoint(checkpoint)


def _worker_task(args) -> dict:
    cond_d, seed, master = args
    rec, _ = run_one(_WORKER["model"], Condition.from_dict(cond_d), seed, master, _WORKER["sched"])
    return rec


def worker_count(default: Optional[int] = None) -> int:
    cap = os.environ.get("ATTNGUIDE_THREADS")
    n = default or os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"ATTNGUIDE_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def check_pairing(conditions: Sequence[dict], seeds: Sequence[int]) -> None:
    for c in conditions:
        if "seeds" in c and list(c["seeds"]) != list(seeds):
            raise UsageError(f"condition {c.get('name')!r} has its own seed list; "
                             "all conditions must share the same seeds (paired design)")


def run_eval(checkpoint, conditions: Sequence[Condition], seeds: Sequence[int], master_seed: int = 0,
             workers: Optional[int] = None, n_perm: int = N_PERM, progress=None) -> EvalReport:
    """Sample every (condition, seed) pair, detect, and aggregate."""
    if len(conditions) < 2:
        raise UsageError("evaluation needs at least two conditions (baseline first)")
    names = [c.name for c in conditions]
    if len(set(names)) != len(names):
        raise UsageError(f"condition names must be unique, got {names}")
    seeds = [int(s) for s in seeds]
    tasks = [(c.to_dict(), s, master_seed) for c in conditions for s in seeds]
    workers = worker_count(workers)
    records = []
    if workers == 1:
        _worker_init(str(checkpoint))
        for i, t in enumerate(tasks):
            records.append(_worker_task(t))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(str(checkpoint),)) as ex:
            for i, rec in enumerate(ex.map(_worker_task, tasks, chunksize=4)):
                records.append(rec)
                if progress:
                    progress(i + 1, len(tasks))
    return aggregate(records, conditions, seeds, n_perm)


def write_report(report: EvalReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(report.table() + "\n")
    with open(out / "records.jsonl", "w") as fh:
        for r in report.records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return out
