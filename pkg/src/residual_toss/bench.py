"""Experiment harness: ablations, supervision study, generalization runs, metrics and grasp histograms.

An experiment is a variant, an object set, a box layout and a training config,
repeated over a seed list. Training and evaluation results can be cached on
disk, keyed by a hash of the configuration and of the package sources, so the
long comparisons are computed once and re-read afterwards.
"""

from __future__ import annotations

import ast
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .policy import GraspThrowNet, NetConfig, PolicyVariant
from .scene import WorkspaceConfig, displaced_layout, layouts_overlap, select_objects, train_layout
from .simulator import GRIPPER_HALF_WIDTH
from .trainer import StepRecord, TrainConfig, evaluate, read_step_log, run_episode_loop, success_rates, write_step_log

log = logging.getLogger(__name__)

LAYOUTS = ("train", "displaced")
CURVE_WINDOW = 1000
HIST_CELL = 0.005


@dataclass(frozen=True)
class ExperimentConfig:
    variant: PolicyVariant = PolicyVariant.RESIDUAL_PHYSICS
    objects: str = "seen"  # seen | unseen | a single kind
    n_objects: int = 12
    drag_override: float | None = None
    layout: str = "train"
    workspace: dict = field(default_factory=dict)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_steps: int = 1000
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", PolicyVariant(self.variant))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        if self.n_objects < 1 or self.eval_steps < 0 or not self.seeds:
            raise ValueError("n_objects >= 1, eval_steps >= 0 and at least one seed are required")
        select_objects(self.objects)  # fail early on unknown sets
        if self.layout == "displaced" and layouts_overlap(train_layout(), displaced_layout()):
            raise ValueError("displaced layout overlaps the training layout")

    def workspace_config(self, layout: str | None = None) -> WorkspaceConfig:
        ws = WorkspaceConfig.from_dict(self.workspace)
        layout = layout or self.layout
        z = ws.landing_height
        return ws.with_boxes(displaced_layout(z) if layout == "displaced" else train_layout(z))

    def object_models(self, name: str | None = None):
        return select_objects(name or self.objects, drag_override=self.drag_override)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        train_kw = {k: kw.pop(k) for k in ("steps", "supervision", "lr") if k in kw and kw[k] is not None}
        if "seed" in kw:
            seed = kw.pop("seed")
            if seed is not None:
                kw["seeds"] = (seed,)
        kw = {k: v for k, v in kw.items() if v is not None}
        out = replace(self, **kw)
        return replace(out, train=replace(out.train, **train_kw)) if train_kw else out

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "variant": self.variant.value,
            "objects": self.objects,
            "n_objects": self.n_objects,
            "drag_override": self.drag_override,
            "layout": self.layout,
            "workspace": dict(self.workspace),
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
            "eval_steps": self.eval_steps,
            "seeds": list(self.seeds),
            "output_dir": str(self.output_dir),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        d.pop("variants", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        if "net" in d:
            d["net"] = NetConfig.from_dict(d["net"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)


def load_experiments(path) -> list[ExperimentConfig]:
    """Read a YAML experiment file; a ``variants`` list expands into one config per variant."""
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    if not isinstance(d, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    variants = d.get("variants")
    if variants is None:
        return [ExperimentConfig.from_dict(d)]
    return [ExperimentConfig.from_dict({**d, "variant": v}) for v in variants]


# --------------------------------------------------------------------------
# metrics


def learning_curve(successes, window: int = CURVE_WINDOW, counted=None) -> np.ndarray:
    """Windowed success over the last ``window`` attempts, early steps weighted by i / window.

    The value after attempt i is ``(successes in the last min(i, window) attempts) / window``,
    i.e. the window success rate times ``min(i, window) / window``. With ``counted``
    (a 0/1 mask) the rate is taken over the counted attempts only, e.g. throws
    among all steps.
    """
    s = np.asarray(successes, dtype=np.float64)
    n = len(s)
    if n == 0:
        return np.zeros(0)
    idx = np.arange(1, n + 1)
    lo = np.maximum(idx - window, 0)
    cs = np.concatenate([[0.0], np.cumsum(s)])
    hits = cs[idx] - cs[lo]
    weight = np.minimum(idx, window) / window
    if counted is None:
        return hits / window
    cc = np.concatenate([[0.0], np.cumsum(np.asarray(counted, dtype=np.float64))])
    total = cc[idx] - cc[lo]
    rate = np.divide(hits, total, out=np.zeros(n), where=total > 0)
    return rate * weight


@dataclass
class KindStats:
    grasps: int = 0
    thrown: int = 0
    in_box: int = 0

    @property
    def throw_success(self) -> float:
        return 100.0 * self.in_box / self.thrown if self.thrown else math.nan


@dataclass
class MetricsReport:
    name: str
    variant: str
    grasp_success: float
    throw_success: float
    per_kind: dict[str, KindStats]
    per_seed: list[tuple[int, float, float]] = field(default_factory=list)
    grasp_curve: list[float] = field(default_factory=list)
    throw_curve: list[float] = field(default_factory=list)
    eval_steps: int = 0

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["per_kind"] = {k: {**asdict(v), "throw_success": v.throw_success} for k, v in self.per_kind.items()}
        return d

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{self.name or 'report'}_{self.variant}"
        with open(out / f"{stem}.json", "w") as fh:
            json.dump(_jsonable(self.to_dict()), fh, indent=2)
        with open(out / f"{stem}_kinds.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["kind", "grasps", "thrown", "in_box", "throw_success"])
            for k, v in sorted(self.per_kind.items()):
                wr.writerow([k, v.grasps, v.thrown, v.in_box, f"{v.throw_success:.3f}"])
        if self.grasp_curve:
            # gnuplot: plot 'x_curve.csv' using 1:2 with lines, '' using 1:3 with lines
            with open(out / f"{stem}_curve.csv", "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["step", "grasp_success", "throw_success"])
                for i, (g, t) in enumerate(zip(self.grasp_curve, self.throw_curve)):
                    wr.writerow([i, f"{g:.6f}", f"{t:.6f}"])


def _jsonable(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def kind_breakdown(records, kinds=()) -> dict[str, KindStats]:
    out = {k: KindStats() for k in kinds}
    for r in records:
        if not r.grasp_success:
            continue
        ks = out.setdefault(r.kind, KindStats())
        ks.grasps += 1
        if r.throw_success is not None:
            ks.thrown += 1
            ks.in_box += bool(r.throw_success)
    return out


def metrics_report(name, variant, eval_runs, train_runs=(), kinds=(), window: int = CURVE_WINDOW) -> MetricsReport:
    """Aggregate per-seed evaluation logs (mean over seeds) and the first training log's curves."""
    per_seed, grasp, throw = [], [], []
    records = []
    for seed, recs in eval_runs:
        g, t = success_rates(recs)
        per_seed.append((seed, g, t))
        grasp.append(g)
        throw.append(t)
        records.extend(recs)
    rep = MetricsReport(
        name=name,
        variant=str(variant),
        grasp_success=float(np.mean(grasp)) if grasp else math.nan,
        throw_success=float(np.nanmean(throw)) if throw and not all(math.isnan(t) for t in throw) else math.nan,
        per_kind=kind_breakdown(records, kinds),
        per_seed=per_seed,
        eval_steps=len(eval_runs[0][1]) if eval_runs else 0,
    )
    if train_runs:
        recs = train_runs[0]
        rep.grasp_curve = learning_curve([r.grasp_success for r in recs], window).tolist()
        rep.throw_curve = learning_curve(
            [bool(r.throw_success) for r in recs], window, [r.throw_success is not None for r in recs]
        ).tolist()
    return rep


# --------------------------------------------------------------------------
# training and evaluation with an optional on-disk cache


def _code_fingerprint(source: str) -> str:
    # comments and docstrings do not change behaviour, so they do not invalidate the cache
    tree = ast.parse(source)
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return ast.dump(tree)


def source_digest() -> str:
    """Hash of the package code and data that training results depend on."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if "__pycache__" in p.parts or p.name == "cli.py":
            continue
        if p.suffix == ".py":
            h.update(p.relative_to(root).as_posix().encode())
            h.update(_code_fingerprint(p.read_text()).encode())
        elif p.suffix == ".yaml":
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _key(payload) -> str:
    blob = json.dumps(_jsonable(payload), sort_keys=True).encode() + source_digest().encode()
    return hashlib.sha256(blob).hexdigest()[:20]


def _train_payload(exp: ExperimentConfig, seed: int):
    d = exp.to_dict()
    for k in ("name", "eval_steps", "seeds", "output_dir", "layout"):
        d.pop(k)
    d["seed"] = seed
    return d


def build_policy(exp: ExperimentConfig, seed: int) -> GraspThrowNet:
    return GraspThrowNet(exp.variant, exp.workspace_config("train"), exp.net, seed=seed)


def train_policy(exp: ExperimentConfig, seed: int, cache_dir=None, out_dir=None):
    """Train one seed on the training layout; returns ``(policy, step records)``."""
    cfg = replace(exp.train, seed=seed)
    if cache_dir is not None:
        slot = Path(cache_dir) / "train" / _key(_train_payload(exp, seed))
        if (slot / "done").exists():
            policy = build_policy(exp, seed)
            policy.load(slot / "policy.rtnw")
            return policy, read_step_log(slot / "steps.csv")
    policy = build_policy(exp, seed)
    ws = exp.workspace_config("train")
    ckpt = Path(out_dir) / "checkpoints" if out_dir is not None and cfg.checkpoint_every else None
    log.info("training %s seed %d for %d steps", exp.variant.value, seed, cfg.steps)
    result = run_episode_loop(policy, exp.object_models(), exp.n_objects, cfg, checkpoint_dir=ckpt, workspace=ws)
    if cache_dir is not None:
        slot.mkdir(parents=True, exist_ok=True)
        policy.save(slot / "policy.rtnw")
        write_step_log(slot / "steps.csv", result.records)
        (slot / "config.json").write_text(json.dumps(_jsonable(_train_payload(exp, seed)), indent=2))
        (slot / "done").write_text("")
    return policy, result.records


def evaluate_policy(exp: ExperimentConfig, policy: GraspThrowNet, seed: int, objects: str | None = None,
                    layout: str | None = None, cache_dir=None) -> list[StepRecord]:
    """Greedy evaluation for ``exp.eval_steps`` steps, optionally on another object set or layout."""
    objects = objects or exp.objects
    layout = layout or exp.layout
    if cache_dir is not None:
        payload = {"train": _train_payload(exp, seed), "objects": objects, "layout": layout, "steps": exp.eval_steps}
        slot = Path(cache_dir) / "eval" / _key(payload)
        if (slot / "done").exists():
            return read_step_log(slot / "steps.csv")
    records = evaluate(policy, exp.object_models(objects), exp.n_objects, exp.eval_steps, seed,
                       exp.workspace_config(layout), exp.train.supervision)
    if cache_dir is not None:
        slot.mkdir(parents=True, exist_ok=True)
        write_step_log(slot / "steps.csv", records)
        (slot / "done").write_text("")
    return records


@dataclass
class SeedRun:
    seed: int
    policy: GraspThrowNet
    train_records: list[StepRecord]
    eval_records: list[StepRecord]


def run_experiment(exp: ExperimentConfig, cache_dir=None, objects: str | None = None, layout: str | None = None):
    """Train every seed of ``exp`` and evaluate it; returns the per-seed runs and the report."""
    runs = []
    for seed in exp.seeds:
        policy, train_recs = train_policy(exp, seed, cache_dir)
        eval_recs = evaluate_policy(exp, policy, seed, objects, layout, cache_dir)
        runs.append(SeedRun(seed, policy, train_recs, eval_recs))
    kinds = [o.kind for o in exp.object_models(objects)]
    rep = metrics_report(exp.name, exp.variant.value, [(r.seed, r.eval_records) for r in runs],
                         [r.train_records for r in runs], kinds)
    return runs, rep


def _write(reports, out_dir, label):
    if out_dir is None:
        return
    out = Path(out_dir)
    for rep in reports.values() if isinstance(reports, dict) else reports:
        rep.write(out)
    rows = reports.values() if isinstance(reports, dict) else reports
    with open(out / f"{label}_summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["name", "variant", "grasp_success", "throw_success"])
        for r in rows:
            wr.writerow([r.name, r.variant, f"{r.grasp_success:.3f}", f"{r.throw_success:.3f}"])


def run_ablation(experiments, cache_dir=None, out_dir=None) -> dict[str, MetricsReport]:
    """Train and evaluate each variant; configs should share seeds and object sets."""
    experiments = list(experiments)
    if len({(e.objects, e.seeds) for e in experiments}) > 1:
        raise ValueError("ablation configs must share object set and seeds")
    reports = {e.variant.value: run_experiment(e, cache_dir)[1] for e in experiments}
    _write(reports, out_dir, "ablation")
    return reports


def run_unseen_locations(experiments, cache_dir=None, out_dir=None) -> dict[str, MetricsReport]:
    """Evaluate policies trained on the training layout against the displaced boxes."""
    reports = {}
    for e in experiments:
        rep = run_experiment(e, cache_dir, layout="displaced")[1]
        rep.name = f"{e.name}_displaced" if e.name else "displaced"
        reports[e.variant.value] = rep
    _write(reports, out_dir, "unseen_locations")
    return reports


def run_unseen_objects(experiments, cache_dir=None, out_dir=None) -> dict[str, MetricsReport]:
    """Evaluate policies trained on ``exp.objects`` against the held-out object set."""
    reports = {}
    for e in experiments:
        rep = run_experiment(e, cache_dir, objects="unseen")[1]
        rep.name = f"{e.name}_unseen" if e.name else "unseen"
        reports[e.variant.value] = rep
    _write(reports, out_dir, "unseen_objects")
    return reports


@dataclass
class SupervisionStudy:
    reports: dict[str, MetricsReport]
    histograms: dict[str, dict[str, "GraspHistogram"]]
    entropy: dict[str, float]  # mean over seeds of the successful-grasp histogram entropy
    mean_abs_offset: dict[str, float]


def run_supervision_study(exp: ExperimentConfig, cache_dir=None, out_dir=None) -> SupervisionStudy:
    """Train with width and with throw-accuracy grasp labels; compare throws and grasp histograms."""
    if exp.variant is not PolicyVariant.RESIDUAL_PHYSICS:
        raise ValueError("the supervision study uses the residual-physics variant")
    reports, hists, entropy, offsets = {}, {}, {}, {}
    objects = exp.object_models()
    for mode in ("width", "throw-accuracy"):
        e = exp.with_overrides(supervision=mode, name=f"{exp.name or 'supervision'}_{mode}")
        runs, rep = run_experiment(e, cache_dir)
        reports[mode] = rep
        ents = []
        for r in runs:
            h = grasp_histograms(r.eval_records, objects)
            seen = [hh.entropy() for hh in h.values() if hh.success.sum() > 0]
            ents.append(float(np.mean(seen)) if seen else 0.0)
        entropy[mode] = float(np.mean(ents))
        hists[mode] = grasp_histograms([x for r in runs for x in r.eval_records], objects)
        offsets[mode] = mean_abs_offset([x for r in runs for x in r.eval_records])
        if out_dir is not None:
            export_grasp_histograms(hists[mode], Path(out_dir) / f"histograms_{mode}")
    _write(reports, out_dir, "supervision")
    if out_dir is not None:
        with open(Path(out_dir) / "supervision_entropy.json", "w") as fh:
            json.dump({"entropy": entropy, "mean_abs_offset": offsets}, fh, indent=2)
    return SupervisionStudy(reports, hists, entropy, offsets)


def mean_abs_offset(records) -> float:
    offs = [abs(r.offset) for r in records if r.grasp_success and r.offset is not None]
    return float(np.mean(offs)) if offs else math.nan


# --------------------------------------------------------------------------
# grasp histograms


@dataclass
class GraspHistogram:
    """Object-frame counts of successful grasps over a grid covering the dilated silhouette."""

    kind: str
    origin: tuple[float, float]  # object-frame (u, v) of the grid's lower corner
    cell: float
    mask: np.ndarray  # cells whose centre lies within gripper reach of the silhouette
    success: np.ndarray
    throw_hit: np.ndarray
    throw_miss: np.ndarray
    com: tuple[float, float]

    def cell_of(self, u: float, v: float) -> tuple[int, int]:
        i = int(math.floor((u - self.origin[0]) / self.cell))
        j = int(math.floor((v - self.origin[1]) / self.cell))
        return min(max(i, 0), self.mask.shape[0] - 1), min(max(j, 0), self.mask.shape[1] - 1)

    def entropy(self, grid: np.ndarray | None = None) -> float:
        """Shannon entropy (nats) of the normalised grid; zero for an empty grid."""
        g = self.success if grid is None else grid
        total = g.sum()
        if total == 0:
            return 0.0
        p = g[g > 0] / total
        return float(-(p * np.log(p)).sum())


def empty_histogram(model, cell: float = HIST_CELL) -> GraspHistogram:
    lo, hi = model.bounds()
    reach = GRIPPER_HALF_WIDTH
    u0, v0 = lo[0] - reach, lo[1] - reach
    nu = int(math.ceil((hi[0] + reach - u0) / cell))
    nv = int(math.ceil((hi[1] + reach - v0) / cell))
    uc = u0 + (np.arange(nu) + 0.5) * cell
    vc = v0 + (np.arange(nv) + 0.5) * cell
    U, V = np.meshgrid(uc, vc, indexing="ij")
    # half a cell diagonal of slack so every reachable grasp point falls in a masked cell
    mask = model.planar_distance(U, V) <= reach + cell * math.sqrt(0.5)
    z = np.zeros((nu, nv), dtype=np.int64)
    return GraspHistogram(model.kind, (u0, v0), cell, mask, z, z.copy(), z.copy(), tuple(model.com[:2]))


def grasp_histograms(records, objects, cell: float = HIST_CELL) -> dict[str, GraspHistogram]:
    """Bin the object-frame grasp points of successful grasps, per object kind."""
    out = {o.kind: empty_histogram(o, cell) for o in objects}
    for r in records:
        if not r.grasp_success or r.grasp_u is None or r.kind not in out:
            continue
        h = out[r.kind]
        i, j = h.cell_of(r.grasp_u, r.grasp_v)
        h.success[i, j] += 1
        if r.throw_success is True:
            h.throw_hit[i, j] += 1
        elif r.throw_success is False:
            h.throw_miss[i, j] += 1
    return out


def export_grasp_histograms(histograms: dict[str, GraspHistogram], out_dir) -> list[Path]:
    """Write each grid as a CSV matrix (rows along the object axis u) plus a JSON metadata file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, h in histograms.items():
        for label, grid in (("success", h.success), ("throw_hit", h.throw_hit), ("throw_miss", h.throw_miss),
                            ("silhouette", h.mask.astype(np.int64))):
            path = out / f"{kind}_{label}.csv"
            np.savetxt(path, grid, fmt="%d", delimiter=",")
            written.append(path)
        meta = {
            "kind": kind,
            "origin_uv": list(h.origin),
            "cell": h.cell,
            "shape": list(h.success.shape),
            "com_uv": list(h.com),
            "com_cell": list(h.cell_of(*h.com)),
            "successful_grasps": int(h.success.sum()),
            "entropy": h.entropy(),
        }
        path = out / f"{kind}_meta.json"
        path.write_text(json.dumps(meta, indent=2))
        written.append(path)
    return written


def histograms_from_log(log_path, object_set: str, out_dir, cell: float = HIST_CELL) -> dict[str, GraspHistogram]:
    hists = grasp_histograms(read_step_log(log_path), select_objects(object_set), cell)
    export_grasp_histograms(hists, out_dir)
    return hists
