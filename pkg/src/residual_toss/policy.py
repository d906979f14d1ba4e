"""The grasp-and-throw network: a shared perception trunk over rotated heightmaps,
a conditioning scalar tiled onto the features, and two dense heads.

Each of the ``R`` rotations re-samples the heightmap onto a square canvas so that
a gripper closing along canvas rows corresponds to world angle ``2 pi k / R``.
Head outputs are read back through the inverse index map, so every heightmap
pixel has one prediction per rotation.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import min_weight_full_bipartite_matching

from . import ballistics
from .scene import GraspAction, ThrowParams, Vec3, WorkspaceConfig
from .tensornet import (
    Conv2d,
    MaxPool2x2,
    Param,
    ReLU,
    Sequential,
    Sigmoid,
    UpsampleBilinear2x,
    bce_loss,
    huber_loss,
    load_tensors,
    save_tensors,
)

MIN_SPEED = 0.1
EXPLORE_RANGE = (0.5, 1.5)
THROW_INIT_SCALE = 0.01


class PolicyVariant(str, enum.Enum):
    RESIDUAL_PHYSICS = "residual-physics"
    REGRESSION = "regression"
    REGRESSION_POP = "regression-pop"
    PHYSICS_ONLY = "physics-only"

    @property
    def has_throw_head(self) -> bool:
        return self is not PolicyVariant.PHYSICS_ONLY

    @property
    def uses_physics(self) -> bool:
        return self in (PolicyVariant.RESIDUAL_PHYSICS, PolicyVariant.PHYSICS_ONLY)


def conditioning_value(variant: PolicyVariant, p: Vec3, cfg: WorkspaceConfig) -> float:
    """Scalar tiled onto the features: ballistic planar speed, or release-to-target distance for regression."""
    if variant.uses_physics:
        return ballistics.solve_release(p, cfg).speed
    d = ballistics.release_distance(p, cfg)
    if d <= 0:
        raise ballistics.UnreachableTarget("target inside the release circle")
    return d


# --------------------------------------------------------------------------
# rotation stack


def _round(x):
    return np.floor(x + 0.5).astype(np.int64)


MATCH_RADII = (1.0, 1.5, 2.0, 3.0)  # pixels, tried in order


def _match(ei, ej, S):
    """Assign each exact position ``(ei, ej)`` a distinct canvas pixel, minimising total squared displacement."""
    n = len(ei)
    for radius in MATCH_RADII:
        reach = int(math.ceil(radius))
        off = np.arange(-reach, reach + 2)
        di, dj = np.meshgrid(off, off, indexing="ij")
        ci = np.floor(ei)[:, None] + di.ravel()
        cj = np.floor(ej)[:, None] + dj.ravel()
        d = (ci - ei[:, None]) ** 2 + (cj - ej[:, None]) ** 2
        keep = (d <= radius * radius) & (ci >= 0) & (ci < S) & (cj >= 0) & (cj < S)
        rows = np.repeat(np.arange(n), keep.sum(axis=1))
        cols = (ci * S + cj)[keep].astype(np.int64)
        # strictly positive weights: a stored zero would read as a missing edge
        graph = csr_matrix((d[keep] + 1e-3, (rows, cols)), shape=(n, S * S))
        try:
            _, assigned = min_weight_full_bipartite_matching(graph)
        except ValueError:
            continue
        return assigned.astype(np.int64)
    raise RuntimeError("no one-to-one rotation map within the search radius")


class RotationStack:
    """Nearest-neighbour rotations of an ``(H, W)`` grid onto an ``S x S`` canvas.

    ``S`` is the smallest multiple of 4 covering the grid diagonal, so rotated
    content is never clipped and the canvas survives two 2x poolings.

    Plain nearest-neighbour sampling drops some source pixels and duplicates
    others. Here every source pixel owns one canvas pixel within a pixel of its
    exact rotated position (a minimum-displacement bipartite matching), and only
    the canvas pixels left over fall back to nearest-neighbour sampling. The inverse map
    is then exact: ``unrotate(rotate(img))`` reproduces ``img``. For even
    ``R`` the second half of the stack is the point reflection of the first,
    so a scene turned by 180 degrees yields identical canvases at ``k + R/2``.
    """

    def __init__(self, shape: tuple[int, int], num_rotations: int):
        if num_rotations < 1:
            raise ValueError("need at least one rotation")
        self.shape = shape
        self.R = num_rotations
        h, w = shape
        side = int(math.ceil(math.hypot(h, w)))
        self.S = side + (-side) % 4
        self.src = np.empty((self.R, self.S * self.S), dtype=np.int64)
        self.inv = np.empty((self.R, h * w), dtype=np.int64)
        half = self.R // 2 if self.R % 2 == 0 else self.R
        for k in range(half):
            self.src[k], self.inv[k] = self._build(2.0 * math.pi * k / self.R)
        flip = (h * w - 1) - np.arange(h * w)  # 180-degree reflection of the source grid
        for k in range(half, self.R):
            base = k - half
            s = self.src[base]
            self.src[k] = np.where(s < 0, -1, (h * w - 1) - s)
            self.inv[k] = self.inv[base][flip]

    def _build(self, theta: float):
        h, w = self.shape
        S = self.S
        c_src = ((h - 1) / 2.0, (w - 1) / 2.0)
        c_can = (S - 1) / 2.0
        c, s = math.cos(theta), math.sin(theta)
        # canvas -> source nearest neighbour: p = c_src + Rot(theta) (q - c_can)
        qi, qj = np.divmod(np.arange(S * S), S)
        a, b = qi - c_can, qj - c_can
        si = _round(c_src[0] + c * a - s * b)
        sj = _round(c_src[1] + s * a + c * b)
        ok = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
        nn = np.where(ok, si * w + sj, -1)
        # exact canvas position of each source pixel
        pi_, pj = np.divmod(np.arange(h * w), w)
        a, b = pi_ - c_src[0], pj - c_src[1]
        ei = c_can + c * a + s * b
        ej = c_can - s * a + c * b
        inv = _match(ei, ej, S)
        owner = np.full(S * S, -1, dtype=np.int64)
        owner[inv] = np.arange(h * w)
        src = np.where(owner >= 0, owner, nn)
        return src, inv

    def rotate(self, img: np.ndarray, ks, background) -> np.ndarray:
        """``img`` (H, W, C) -> (len(ks), S, S, C) canvases."""
        h, w, c = img.shape
        flat = np.concatenate([img.reshape(h * w, c), np.asarray(background, dtype=img.dtype)[None]], axis=0)
        out = np.empty((len(ks), self.S * self.S, c), dtype=img.dtype)
        for n, k in enumerate(ks):
            idx = self.src[k]
            out[n] = flat[np.where(idx < 0, h * w, idx)]
        return out.reshape(len(ks), self.S, self.S, c)

    def unrotate(self, maps: np.ndarray, ks) -> np.ndarray:
        """Canvas maps (len(ks), S, S) -> heightmap-aligned (len(ks), H, W)."""
        h, w = self.shape
        out = np.empty((len(ks), h * w), dtype=maps.dtype)
        for n, k in enumerate(ks):
            out[n] = maps[n].ravel()[self.inv[k]]
        return out.reshape(len(ks), h, w)

    def canvas_index(self, k: int, i: int, j: int) -> tuple[int, int]:
        flat = int(self.inv[k][i * self.shape[1] + j])
        return divmod(flat, self.S)


@functools.lru_cache(maxsize=8)
def rotation_stack(shape: tuple[int, int], num_rotations: int) -> RotationStack:
    """Shared, read-only rotation maps (building them takes about a second)."""
    return RotationStack(tuple(shape), num_rotations)


# --------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetConfig:
    trunk: tuple[int, int, int, int] = (32, 32, 64, 64)
    head: tuple[int, int, int] = (32, 16, 8)
    tile_channels: int = 8
    in_channels: int = 2
    dtype: str = "float32"
    train_crop: int = 64  # replay window (pixels, multiple of 4); 0 uses the whole canvas

    @classmethod
    def from_dict(cls, d) -> "NetConfig":
        d = dict(d or {})
        if d.get("train_crop", 0) % 4:
            raise ValueError("train_crop must be a multiple of 4")
        for key in ("trunk", "head"):
            if key in d:
                d[key] = tuple(int(c) for c in d[key])
        return cls(**d)

    def to_dict(self):
        return {"trunk": list(self.trunk), "head": list(self.head), "tile_channels": self.tile_channels,
                "in_channels": self.in_channels, "dtype": self.dtype, "train_crop": self.train_crop}


def build_trunk(cfg: NetConfig, rng, dtype) -> Sequential:
    a, b, c, d = cfg.trunk
    return Sequential(
        Conv2d(cfg.in_channels, a, rng=rng, dtype=dtype, input_grad=False), ReLU(),
        Conv2d(a, b, rng=rng, dtype=dtype), ReLU(),
        MaxPool2x2(),
        Conv2d(b, c, rng=rng, dtype=dtype), ReLU(),
        Conv2d(c, d, rng=rng, dtype=dtype), ReLU(),
        MaxPool2x2(),
    )


def build_head(cfg: NetConfig, rng, dtype, probability: bool) -> Sequential:
    h1, h2, h3 = cfg.head
    layers = [
        Conv2d(cfg.trunk[-1] + cfg.tile_channels, h1, rng=rng, dtype=dtype), ReLU(),
        Conv2d(h1, h2, rng=rng, dtype=dtype), ReLU(),
        UpsampleBilinear2x(),
        Conv2d(h2, h3, rng=rng, dtype=dtype), ReLU(),
        UpsampleBilinear2x(),
        Conv2d(h3, 1, rng=rng, dtype=dtype),
    ]
    if probability:
        layers.append(Sigmoid())
    else:
        # start the speed map near zero so early throws follow the analytic controller
        layers[-1].weight.value *= THROW_INIT_SCALE
    return Sequential(*layers)


@dataclass
class PolicyOutput:
    qg: np.ndarray  # (n_rot, H, W) grasp probabilities
    qt: np.ndarray | None  # (n_rot, H, W) residual or absolute planar speed
    cond_grasp: float
    cond_throw: float
    rotations: tuple[int, ...]
    ballistic_speed: float | None = None
    _cache: dict | None = field(default=None, repr=False)

    def rotation_slot(self, k: int) -> int:
        try:
            return self.rotations.index(k)
        except ValueError:
            raise ValueError(f"rotation {k} was not evaluated in this pass") from None


class GraspThrowNet:
    def __init__(self, variant: PolicyVariant, workspace: WorkspaceConfig, net: NetConfig | None = None, seed: int = 0):
        self.variant = PolicyVariant(variant)
        self.workspace = workspace
        self.net = net or NetConfig()
        self.dtype = np.dtype(self.net.dtype)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        self.trunk = build_trunk(self.net, rng, self.dtype)
        self.grasp_head = build_head(self.net, rng, self.dtype, probability=True)
        self.throw_head = build_head(self.net, rng, self.dtype, probability=False) if self.variant.has_throw_head else None
        self.rot = rotation_stack(workspace.shape, workspace.num_rotations)

    # -- parameters -------------------------------------------------------
    def named_params(self) -> dict[str, Param]:
        out = {}
        for name, mod in (("trunk", self.trunk), ("grasp", self.grasp_head), ("throw", self.throw_head)):
            if mod is None:
                continue
            for n, p in enumerate(mod.params()):
                out[f"{name}.{n}"] = p
        return out

    def params(self) -> list[Param]:
        return list(self.named_params().values())

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad[...] = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.named_params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = self.named_params()
        if set(mine) != set(state):
            raise ValueError("checkpoint does not match the network layout")
        for k, p in mine.items():
            if p.value.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.value.shape} vs {state[k].shape}")
            p.value[...] = state[k]

    def save(self, path) -> None:
        save_tensors(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(load_tensors(path))

    # -- forward ----------------------------------------------------------
    def background(self, stats) -> np.ndarray:
        (mh, sh), (mi, si) = stats
        return np.array([-mh / sh, -mi / si], dtype=self.dtype)

    def _tile(self, mu: np.ndarray, value) -> np.ndarray:
        """Append ``tile_channels`` constant channels; ``value`` is a scalar or one value per batch row."""
        n, h, w, _ = mu.shape
        vals = np.broadcast_to(np.asarray(value, dtype=mu.dtype).reshape(-1), (n,))
        tile = np.broadcast_to(vals[:, None, None, None], (n, h, w, self.net.tile_channels))
        return np.concatenate([mu, tile], axis=-1)

    def run(self, image: np.ndarray, background, cond_grasp: float, cond_throw: float | None = None,
            rotations=None, keep_cache: bool = False) -> PolicyOutput:
        """Evaluate the heads on the chosen rotations of a normalised ``(H, W, C)`` image."""
        ks = tuple(range(self.rot.R)) if rotations is None else tuple(int(k) for k in rotations)
        cond_throw = cond_grasp if cond_throw is None else cond_throw
        x = self.rot.rotate(image.astype(self.dtype, copy=False), ks, background)
        mu = self.trunk.forward(x)
        g = self.grasp_head.forward(self._tile(mu, cond_grasp))[..., 0]
        qg = self.rot.unrotate(g, ks)
        qt = None
        t = None
        if self.throw_head is not None:
            t = self.throw_head.forward(self._tile(mu, cond_throw))[..., 0]
            qt = self.rot.unrotate(t, ks)
        cache = {"canvas_g": g, "canvas_t": t, "mu_channels": mu.shape[-1]} if keep_cache else None
        return PolicyOutput(qg, qt, float(cond_grasp), float(cond_throw), ks, None, cache)

    def forward(self, heightmap, p: Vec3, rotations=None, keep_cache: bool = False) -> PolicyOutput:
        """Dense grasp and throw maps for target ``p`` over the rotation stack."""
        cond = conditioning_value(self.variant, p, self.workspace)
        out = self.run(heightmap.normalized, self.background(heightmap.stats), cond, cond, rotations, keep_cache)
        if self.variant.uses_physics:
            out.ballistic_speed = cond
        return out

    # -- learning ---------------------------------------------------------
    def loss_and_backward(self, out: PolicyOutput, action: GraspAction, y: int, throw_label: float | None,
                          throw_weight: float = 1.0) -> tuple[float, float]:
        """BCE at the executed pixel plus Huber on the throw head when a throw label is given.

        Gradients enter the heads at one canvas pixel only and are accumulated
        into the parameter ``grad`` buffers. Returns ``(grasp_loss, throw_loss)``.
        """
        if out._cache is None:
            raise ValueError("forward pass was run without keep_cache=True")
        if y not in (0, 1):
            raise ValueError("grasp label must be 0 or 1")
        slot = out.rotation_slot(action.k)
        n = len(out.rotations)
        S = self.rot.S
        ci, cj = self.rot.canvas_index(action.k, action.i, action.j)
        cg = out._cache["canvas_g"]
        lg, dq = bce_loss(cg[slot, ci, cj], y)
        grad = np.zeros((n, S, S, 1), dtype=self.dtype)
        grad[slot, ci, cj, 0] = dq
        gmu = self.grasp_head.backward(grad)[..., : out._cache["mu_channels"]]
        lt = 0.0
        if throw_label is not None and self.throw_head is not None:
            ct = out._cache["canvas_t"]
            lt, de = huber_loss(ct[slot, ci, cj], throw_label)
            grad_t = np.zeros((n, S, S, 1), dtype=self.dtype)
            grad_t[slot, ci, cj, 0] = throw_weight * de
            gmu = gmu + self.throw_head.backward(grad_t)[..., : out._cache["mu_channels"]]
            lt *= throw_weight
        self.trunk.backward(gmu)
        return lg, lt


    def _crop_origin(self, ci: int, cj: int) -> tuple[int, int]:
        crop, S = self.net.train_crop, self.rot.S
        if not crop or crop >= S:
            return 0, 0
        oi = min(max(((ci - crop // 2) // 4) * 4, 0), S - crop)
        oj = min(max(((cj - crop // 2) // 4) * 4, 0), S - crop)
        return oi, oj

    def train_batch(self, samples, throw_only: bool = False) -> list[tuple[float, float]]:
        """Batched ``loss_and_backward`` over replayed samples, one rotation each.

        ``samples`` holds ``(image, background, cond_grasp, cond_throw, action, y, throw_label)``
        tuples. Gradients of every sample are summed into the parameter buffers.

        Only one output pixel per sample carries a loss, so each sample is
        evaluated on a ``train_crop`` window of its canvas around that pixel.
        Windows are aligned to the pooling grid and clamped to the canvas, and the
        crop is wider than the network's receptive field, so the pixel sees the
        same inputs and the same zero padding as in a full-canvas pass.

        With ``throw_only`` the grasp head is skipped and the trunk is treated
        as frozen: only throw-head gradients are produced.
        """
        if not samples:
            return []
        crop = self.net.train_crop if self.net.train_crop and self.net.train_crop < self.rot.S else self.rot.S
        n = len(samples)
        x = np.empty((n, crop, crop, self.net.in_channels), dtype=self.dtype)
        where = []
        for m, (img, bg, _, _, a, _, _) in enumerate(samples):
            ci, cj = self.rot.canvas_index(a.k, a.i, a.j)
            oi, oj = self._crop_origin(ci, cj)
            canvas = self.rot.rotate(img.astype(self.dtype, copy=False), [a.k], bg)[0]
            x[m] = canvas[oi : oi + crop, oj : oj + crop]
            where.append((ci - oi, cj - oj))
        cg = np.array([s[2] for s in samples])
        ct = np.array([s[3] for s in samples])
        mu = self.trunk.forward(x)
        channels = mu.shape[-1]
        losses = [[0.0, 0.0] for _ in samples]
        gmu = None
        if not throw_only:
            g = self.grasp_head.forward(self._tile(mu, cg))[..., 0]
            grad_g = np.zeros((n, crop, crop, 1), dtype=self.dtype)
            for m, (sample, (ci, cj)) in enumerate(zip(samples, where)):
                lg, dq = bce_loss(g[m, ci, cj], sample[5])
                grad_g[m, ci, cj, 0] = dq
                losses[m][0] = lg
            gmu = self.grasp_head.backward(grad_g)[..., :channels]
        if self.throw_head is not None and any(s[6] is not None for s in samples):
            t = self.throw_head.forward(self._tile(mu, ct))[..., 0]
            grad_t = np.zeros((n, crop, crop, 1), dtype=self.dtype)
            for m, (sample, (ci, cj)) in enumerate(zip(samples, where)):
                if sample[6] is None:
                    continue
                lt, de = huber_loss(t[m, ci, cj], sample[6])
                grad_t[m, ci, cj, 0] = de
                losses[m][1] = lt
            gt = self.throw_head.backward(grad_t)[..., :channels]
            gmu = gt if gmu is None else gmu + gt
        if gmu is not None and not throw_only:
            self.trunk.backward(gmu)
        return [tuple(l) for l in losses]


# --------------------------------------------------------------------------
# action selection


def select_action(out: PolicyOutput, epsilon: float, rng: np.random.Generator, num_rotations: int | None = None,
                  blocked=None) -> GraspAction:
    """Greedy argmax over all rotation maps, or a uniform random grasp with probability ``epsilon``.

    Ties go to the lowest flat ``(rotation, i, j)`` index. Random grasps are
    uniform over every pixel and rotation of the heightmap. ``blocked`` is an
    optional collection of ``(k, i, j)`` triples the greedy choice must skip
    (grasps already seen to fail on an unchanged scene).
    """
    n, h, w = out.qg.shape
    R = num_rotations or n
    explore = rng.random() < epsilon
    if explore:
        k = out.rotations[int(rng.integers(n))]
        i = int(rng.integers(h))
        j = int(rng.integers(w))
        return GraspAction(i, j, k, R)
    q = out.qg
    if blocked:
        q = q.copy()
        for k, i, j in blocked:
            if k in out.rotations:
                q[out.rotations.index(k), i, j] = -np.inf
    flat = int(np.argmax(q))
    slot, rem = divmod(flat, h * w)
    i, j = divmod(rem, w)
    return GraspAction(i, j, out.rotations[slot], R)


def compose_throw(out: PolicyOutput, action: GraspAction, p: Vec3, variant: PolicyVariant, epsilon: float,
                  rng: np.random.Generator, cfg: WorkspaceConfig) -> ThrowParams:
    """Release parameters for target ``p``: ballistic speed plus residual, or a regressed speed.

    With probability ``epsilon`` (learned variants only) the planar speed is drawn
    uniformly from ``[0.5, 1.5]`` times the ballistic speed. Non-positive speeds are
    clamped to 0.1 m/s and flagged as exploratory.
    """
    variant = PolicyVariant(variant)
    ballistic = ballistics.solve_release(p, cfg).speed
    draw = rng.random()
    exploratory = False
    if variant.has_throw_head and draw < epsilon:
        speed = ballistic * float(rng.uniform(*EXPLORE_RANGE))
        exploratory = True
    elif variant is PolicyVariant.PHYSICS_ONLY:
        speed = ballistic
    else:
        slot = out.rotation_slot(action.k)
        pred = float(out.qt[slot, action.i, action.j])
        speed = ballistic + pred if variant is PolicyVariant.RESIDUAL_PHYSICS else pred
    if not speed > 0.0:
        speed = MIN_SPEED
        exploratory = True
    plan = ballistics.plan_from_speed(p, speed, cfg)
    return ThrowParams(plan.r, plan.v_hat, exploratory)
