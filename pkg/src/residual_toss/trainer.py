"""Self-supervised trial-and-error training: labels, prioritized replay and the step loop.

Each step renders the bin, picks the next target box, grasps at the policy's
choice and, if the grasp holds, throws. The outcome becomes a replay sample;
then a rank-prioritized batch is replayed for one optimiser step. Everything is
serial and seeded, so a run is reproducible step for step.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ballistics
from .policy import GraspThrowNet, PolicyVariant, compose_throw, conditioning_value, select_action
from .scene import GraspAction, ObjectModel, ThrowParams, Vec3, WorkspaceConfig
from .simulator import (
    BinState,
    GraspOutcome,
    ThrowOutcome,
    execute_grasp,
    execute_throw,
    render_heightmap,
    reset_if_empty,
    spawn_bin,
)
from .tensornet import bce_loss, huber_loss, sgd_momentum_step

log = logging.getLogger(__name__)

SUPERVISION_MODES = ("width", "throw-accuracy")

LOG_FIELDS = (
    "step", "epsilon", "grasp_success", "throw_success", "box", "executed_speed", "delta_bar", "loss",
    "kind", "grasp_u", "grasp_v", "offset", "exploratory", "landing_x", "landing_y",
)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 2.0**-5
    epsilon_start: float = 0.5
    epsilon_end: float = 0.1
    alpha: float = 0.7
    batch_size: int = 4
    capacity: int = 10_000
    supervision: str = "throw-accuracy"
    seed: int = 0
    checkpoint_every: int = 0
    # physics pre-training of the throw head (regression-pop only)
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 8
    pretrain_scenes: int = 8

    def __post_init__(self) -> None:
        if self.supervision not in SUPERVISION_MODES:
            raise ValueError(f"supervision must be one of {SUPERVISION_MODES}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.steps < 0 or self.batch_size < 0 or self.capacity < 1:
            raise ValueError("steps, batch_size and capacity must be non-negative (capacity >= 1)")
        if not self.epsilon_start >= self.epsilon_end >= 0.0:
            raise ValueError("epsilon must anneal downwards and stay non-negative")

    def epsilon(self, step: int) -> float:
        """Linear anneal from ``epsilon_start`` at step 0 to ``epsilon_end`` at ``steps``."""
        if self.steps <= 0:
            return self.epsilon_start
        frac = min(max(step / self.steps, 0.0), 1.0)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**dict(d or {}))

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# labels and transitions


@dataclass(frozen=True)
class Labels:
    y: int
    delta_bar: float | None = None
    landing: Vec3 | None = None
    executed_speed: float | None = None
    throw_dropped: bool = False  # thrown, but the landing point is not ballistically reachable


def make_labels(grasp: GraspOutcome, throw: ThrowOutcome | None, params: ThrowParams | None, mode: str,
                cfg: WorkspaceConfig) -> Labels:
    """Grasp label for the supervision ``mode`` and the residual label of the throw.

    The residual is ``executed planar speed - ballistic speed for the actual landing``
    and is recorded for every throw, wherever it landed, as long as that
    landing point can be reached by a ballistic throw.
    """
    if mode not in SUPERVISION_MODES:
        raise ValueError(f"unknown supervision mode {mode!r}")
    if not grasp.success or throw is None:
        return Labels(0)
    y = 1 if mode == "width" else int(throw.in_target_box)
    executed = params.planar_speed
    try:
        delta = executed - ballistics.speed_for_landing(throw.landing, cfg)
    except ballistics.UnreachableTarget:
        return Labels(y, None, throw.landing, executed, throw_dropped=True)
    return Labels(y, delta, throw.landing, executed)


@dataclass
class Transition:
    image: np.ndarray  # normalised heightmap, float16 (H, W, C)
    background: np.ndarray
    target: Vec3
    box: int
    action: GraspAction
    cond_grasp: float
    y: int
    cond_throw: float | None = None  # conditioning for the landing point actually reached
    throw_label: float | None = None  # residual, or absolute planar speed for regression
    executed_speed: float | None = None
    landing: Vec3 | None = None
    delta_bar: float | None = None
    in_target_box: bool = False
    exploratory: bool = False
    step: int = 0
    priority: float = 0.0

    def sample(self):
        cond_t = self.cond_grasp if self.cond_throw is None else self.cond_throw
        return (self.image, self.background, self.cond_grasp, cond_t, self.action, self.y, self.throw_label)


def throw_target(variant: PolicyVariant, labels: Labels, cfg: WorkspaceConfig):
    """Hindsight conditioning and label for the throw head: what the network should have output to hit the landing point."""
    if not variant.has_throw_head or labels.delta_bar is None:
        return None, None
    cond = conditioning_value(variant, labels.landing, cfg)
    if variant is PolicyVariant.RESIDUAL_PHYSICS:
        return cond, labels.delta_bar
    return cond, labels.executed_speed


class ReplayBuffer:
    """Bounded FIFO store of transitions with rank-based prioritized sampling."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)
        self._table: dict[tuple[int, float], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, idx: int) -> Transition:
        return self._items[idx]

    def __iter__(self):
        return iter(self._items)

    def add(self, t: Transition) -> None:
        self._items.append(t)

    def priorities(self) -> np.ndarray:
        return np.fromiter((t.priority for t in self._items), dtype=np.float64, count=len(self._items))

    def rank_order(self) -> np.ndarray:
        """Buffer indices from highest to lowest priority (older first on ties)."""
        return np.argsort(-self.priorities(), kind="stable")

    def rank_probabilities(self, alpha: float) -> np.ndarray:
        n = len(self._items)
        key = (n, float(alpha))
        if key not in self._table:
            w = np.arange(1, n + 1, dtype=np.float64) ** (-alpha)
            self._table = {key: w / w.sum()}
        return self._table[key]


def sample_batch(buffer: ReplayBuffer, batch_size: int, alpha: float, rng: np.random.Generator) -> list[Transition]:
    """Draw ``batch_size`` transitions with replacement, ``P(rank) ~ rank ** -alpha`` (rank 1 = highest priority)."""
    if len(buffer) == 0 or batch_size <= 0:
        return []
    order = buffer.rank_order()
    ranks = rng.choice(len(buffer), size=batch_size, p=buffer.rank_probabilities(alpha))
    return [buffer[int(order[r])] for r in ranks]


def experience_replay(policy: GraspThrowNet, batch: list[Transition], cfg: TrainConfig) -> float:
    """One optimiser step on the mean loss of ``batch``; each sample's priority becomes its loss."""
    if not batch:
        return 0.0
    policy.zero_grad()
    losses = policy.train_batch([t.sample() for t in batch])
    scale = 1.0 / len(batch)
    params = policy.params()
    for p in params:
        p.grad *= scale
    sgd_momentum_step(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    total = 0.0
    for t, (lg, lt) in zip(batch, losses):
        t.priority = lg + lt
        total += lg + lt
    return total * scale


# --------------------------------------------------------------------------
# physics pre-training


def _random_box_point(cfg: WorkspaceConfig, rng: np.random.Generator) -> Vec3:
    box = cfg.boxes[int(rng.integers(len(cfg.boxes)))]
    x0, y0, x1, y1 = box.rect()
    return Vec3(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)), box.center.z)


def _pretrain_samples(policy, scenes, cfg, count, rng):
    samples, speeds = [], []
    R = policy.workspace.num_rotations
    h, w = policy.workspace.shape
    for _ in range(count):
        img, bg = scenes[int(rng.integers(len(scenes)))]
        p = _random_box_point(cfg, rng)
        speed = ballistics.solve_release(p, cfg).speed
        cond = conditioning_value(policy.variant, p, cfg)
        a = GraspAction(int(rng.integers(h)), int(rng.integers(w)), int(rng.integers(R)), R)
        samples.append((img, bg, cond, cond, a, 0, speed))
        speeds.append(speed)
    return samples, speeds


def pretrain_on_physics(policy: GraspThrowNet, objects, n_objects: int, cfg: TrainConfig, steps: int | None = None,
                        workspace: WorkspaceConfig | None = None) -> GraspThrowNet:
    """Regress the throw head onto the analytic planar speed at random pixels (trunk and grasp head frozen)."""
    if policy.variant is not PolicyVariant.REGRESSION_POP:
        raise ValueError("physics pre-training applies to the regression-pop variant only")
    steps = cfg.pretrain_steps if steps is None else steps
    if steps <= 0:
        return policy
    ws = workspace or policy.workspace
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB0B]))
    scenes = _pretrain_scenes(policy, objects, n_objects, ws, cfg.pretrain_scenes, cfg.seed + 10_000)
    params = [p for p in policy.throw_head.params()]
    for _ in range(steps):
        samples, _ = _pretrain_samples(policy, scenes, ws, cfg.pretrain_batch, rng)
        policy.zero_grad()
        policy.train_batch(samples, throw_only=True)
        for p in params:
            p.grad /= len(samples)
        sgd_momentum_step(params, cfg.pretrain_lr, cfg.momentum, cfg.weight_decay)
    policy.zero_grad()
    return policy


def _pretrain_scenes(policy, objects, n_objects, ws, count, seed):
    scenes = []
    for e in range(count):
        hm = render_heightmap(spawn_bin(objects, n_objects, seed, ws, episode=e))
        scenes.append((hm.normalized, policy.background(hm.stats)))
    return scenes


def pretrain_rms(policy: GraspThrowNet, objects, n_objects: int, seed: int, count: int = 64,
                 workspace: WorkspaceConfig | None = None) -> float:
    """RMS error (m/s) of the throw head against the analytic speed on held-out scenes and targets."""
    ws = workspace or policy.workspace
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFACE]))
    scenes = _pretrain_scenes(policy, objects, n_objects, ws, 4, seed + 20_000)
    samples, speeds = _pretrain_samples(policy, scenes, ws, count, rng)
    errs = []
    for (img, bg, _, cond, a, _, _), speed in zip(samples, speeds):
        out = policy.run(img, bg, cond, cond, rotations=[a.k])
        errs.append(float(out.qt[0, a.i, a.j]) - speed)
    return float(np.sqrt(np.mean(np.square(errs))))


# --------------------------------------------------------------------------
# the step loop


@dataclass
class StepRecord:
    step: int
    epsilon: float
    grasp_success: bool
    throw_success: bool | None
    box: int
    executed_speed: float | None
    delta_bar: float | None
    loss: float
    kind: str
    grasp_u: float | None
    grasp_v: float | None
    offset: float | None
    exploratory: bool
    landing_x: float | None
    landing_y: float | None

    def row(self) -> list[str]:
        def f(x, fmt="{:.6f}"):
            return "" if x is None else fmt.format(x)

        def b(x):
            return "" if x is None else str(int(x))

        return [
            str(self.step), f(self.epsilon, "{:.4f}"), b(self.grasp_success), b(self.throw_success), str(self.box),
            f(self.executed_speed), f(self.delta_bar), f(self.loss), self.kind, f(self.grasp_u), f(self.grasp_v),
            f(self.offset), b(self.exploratory), f(self.landing_x), f(self.landing_y),
        ]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "StepRecord":
        def fl(k):
            return None if row[k] == "" else float(row[k])

        def bo(k):
            return None if row[k] == "" else bool(int(row[k]))

        return cls(int(row["step"]), float(row["epsilon"]), bool(int(row["grasp_success"])), bo("throw_success"),
                   int(row["box"]), fl("executed_speed"), fl("delta_bar"), float(row["loss"]), row["kind"],
                   fl("grasp_u"), fl("grasp_v"), fl("offset"), bool(int(row["exploratory"])), fl("landing_x"),
                   fl("landing_y"))


def write_step_log(path, records) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_FIELDS)
        for r in records:
            wr.writerow(r.row())


def read_step_log(path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        return [StepRecord.from_row(r) for r in csv.DictReader(fh)]


@dataclass
class Environment:
    """The simulated bin plus target bookkeeping for one run."""

    objects: list[ObjectModel]
    n_objects: int
    seed: int
    workspace: WorkspaceConfig
    state: BinState = field(init=False)
    blocked: set = field(default_factory=set)  # grasps that failed on the current, unchanged scene

    def __post_init__(self) -> None:
        self.state = spawn_bin(self.objects, self.n_objects, self.seed, self.workspace)

    def target(self, step: int) -> tuple[int, Vec3]:
        idx = step % len(self.workspace.boxes)
        return idx, self.workspace.boxes[idx].center

    def after_grasp(self, action: GraspAction, success: bool) -> None:
        if success:
            self.blocked.clear()
        else:
            self.blocked.add((action.k, action.i, action.j))

    def reset_if_empty(self) -> None:
        new = reset_if_empty(self.state)
        if new is not self.state:
            self.blocked.clear()
        self.state = new


@dataclass
class Trial:
    record: StepRecord
    transition: Transition
    labels: Labels
    grasp: GraspOutcome
    throw: ThrowOutcome | None


def run_trial(policy: GraspThrowNet, env: Environment, step: int, epsilon: float, rng: np.random.Generator,
              mode: str) -> Trial:
    """One grasp-and-throw attempt at the step's target box (no learning)."""
    ws = env.workspace
    box_idx, p = env.target(step)
    hm = render_heightmap(env.state)
    out = policy.forward(hm, p)
    action = select_action(out, epsilon, rng, ws.num_rotations, env.blocked)
    grasp = execute_grasp(env.state, action)
    env.after_grasp(action, grasp.success)
    params = throw = None
    if grasp.success:
        params = compose_throw(out, action, p, policy.variant, epsilon, rng, ws)
        throw = execute_throw(grasp, params, ws, ws.boxes[box_idx])
    labels = make_labels(grasp, throw, params, mode, ws)
    cond_t, label_t = throw_target(policy.variant, labels, ws)
    slot = out.rotation_slot(action.k)
    prio, _ = bce_loss(out.qg[slot, action.i, action.j], labels.y)
    if label_t is not None:
        prio += huber_loss(out.qt[slot, action.i, action.j], label_t)[0]
    t = Transition(
        image=hm.normalized.astype(np.float16),
        background=policy.background(hm.stats),
        target=p,
        box=box_idx,
        action=action,
        cond_grasp=out.cond_grasp,
        y=labels.y,
        cond_throw=cond_t,
        throw_label=label_t,
        executed_speed=labels.executed_speed,
        landing=labels.landing,
        delta_bar=labels.delta_bar,
        in_target_box=bool(throw is not None and throw.in_target_box),
        exploratory=bool(params is not None and params.exploratory),
        step=step,
        priority=prio,
    )
    u, v = grasp.grasp_point if grasp.success else (None, None)
    rec = StepRecord(
        step=step,
        epsilon=epsilon,
        grasp_success=grasp.success,
        throw_success=None if throw is None else throw.in_target_box,
        box=box_idx,
        executed_speed=labels.executed_speed,
        delta_bar=labels.delta_bar,
        loss=0.0,
        kind=grasp.model.kind if grasp.success else "",
        grasp_u=u,
        grasp_v=v,
        offset=grasp.offset if grasp.success else None,
        exploratory=t.exploratory,
        landing_x=None if throw is None else throw.landing.x,
        landing_y=None if throw is None else throw.landing.y,
    )
    return Trial(rec, t, labels, grasp, throw)


@dataclass
class TrainResult:
    policy: GraspThrowNet
    records: list[StepRecord]
    dropped_throws: int = 0


def run_episode_loop(policy: GraspThrowNet, objects, n_objects: int, cfg: TrainConfig, log_path=None,
                     checkpoint_dir=None, workspace: WorkspaceConfig | None = None) -> TrainResult:
    """Train ``policy`` for ``cfg.steps`` trial-and-error steps and return it with the step log."""
    ws = workspace or policy.workspace
    ss = np.random.SeedSequence(cfg.seed)
    sim_ss, explore_ss, replay_ss = ss.spawn(3)
    sim_seed = int(sim_ss.generate_state(1)[0])
    explore = np.random.default_rng(explore_ss)
    replay = np.random.default_rng(replay_ss)
    if policy.variant is PolicyVariant.REGRESSION_POP and cfg.pretrain_steps > 0:
        pretrain_on_physics(policy, objects, n_objects, cfg, workspace=ws)
    env = Environment(list(objects), n_objects, sim_seed, ws)
    buffer = ReplayBuffer(cfg.capacity)
    records: list[StepRecord] = []
    dropped = 0
    for step in range(cfg.steps):
        eps = cfg.epsilon(step)
        trial = run_trial(policy, env, step, eps, explore, cfg.supervision)
        dropped += trial.labels.throw_dropped
        buffer.add(trial.transition)
        batch = sample_batch(buffer, cfg.batch_size, cfg.alpha, replay)
        trial.record.loss = experience_replay(policy, batch, cfg)
        records.append(trial.record)
        env.reset_if_empty()
        if checkpoint_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            policy.save(Path(checkpoint_dir) / f"step_{step + 1:06d}.rtnw")
    if dropped:
        log.info("dropped %d throws whose landing point was not ballistically reachable", dropped)
    if log_path is not None:
        write_step_log(log_path, records)
    return TrainResult(policy, records, dropped)


def evaluate(policy: GraspThrowNet, objects, n_objects: int, steps: int, seed: int,
             workspace: WorkspaceConfig | None = None, mode: str = "throw-accuracy") -> list[StepRecord]:
    """Greedy (epsilon = 0) rollouts with frozen parameters."""
    ws = workspace or policy.workspace
    ss = np.random.SeedSequence([seed, 0xE7A1])
    sim_ss, explore_ss = ss.spawn(2)
    env = Environment(list(objects), n_objects, int(sim_ss.generate_state(1)[0]), ws)
    rng = np.random.default_rng(explore_ss)
    records = []
    for step in range(steps):
        trial = run_trial(policy, env, step, 0.0, rng, mode)
        records.append(trial.record)
        env.reset_if_empty()
    return records


def success_rates(records) -> tuple[float, float]:
    """Grasp success (% of attempts) and throw success (% of thrown objects landing in the target box)."""
    if not records:
        return math.nan, math.nan
    grasps = sum(r.grasp_success for r in records)
    thrown = [r for r in records if r.throw_success is not None]
    g = 100.0 * grasps / len(records)
    t = 100.0 * sum(r.throw_success for r in thrown) / len(thrown) if thrown else math.nan
    return g, t
