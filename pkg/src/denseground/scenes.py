"""Synthetic point-cloud scenes and templated referrals.

Scenes are rooms with axis-aligned box instances sampled as uniform point
clouds over a floor/wall background. Every scene contains exactly one lamp
placed against a wall; the annotation camera is derived from the lamp, which
is what makes view-dependent referrals resolvable from scene content alone.

All generated coordinates are quantized to 6 decimals so that the on-disk
format (9 significant digits) round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

KIND_UNIQUE = "unique"
KIND_RELATIONAL = "relational"
KIND_VIEW = "view-dependent"
KINDS = (KIND_UNIQUE, KIND_RELATIONAL, KIND_VIEW)

# Radius of the "near" relation; matches the first fusion masking radius so
# relational cues are resolvable inside the earliest attention neighborhoods.
RELATION_RADIUS = 1.0

# Margins the generator enforces so that the strict referral predicates stay
# unambiguous under point-sampling noise.
LATERAL_MARGIN = 0.15
CLOSEST_GAP = 0.30
RELATION_SLACK = 0.05
DISTRACTOR_SLACK = 0.30

BACKGROUND_CLASSES = ("floor", "wall")
OBJECT_CLASSES = ("chair", "table", "lamp", "sofa", "crate", "shelf", "plant", "sink")
CLASSES = BACKGROUND_CLASSES + OBJECT_CLASSES

PAD_TOKEN = "<pad>"
MASK_TOKEN = "<mask>"

VOCAB = (
    PAD_TOKEN, MASK_TOKEN,
    "the", "a",
    "floor", "wall", "chair", "table", "lamp", "sofa", "crate", "shelf", "plant", "sink",
    "near", "on", "left", "right", "closest", "to", "camera",
    "beside", "next", "close", "far", "from", "behind", "front", "of", "by", "at",
    "corner", "center", "room", "side",
    "bed", "desk", "stool", "cabinet", "box", "monitor", "couch", "rug", "door", "window",
    "red", "green", "blue", "white", "black",
    "small", "large", "tall", "short", "round", "square", "wooden", "metal", "between", "under",
)
VOCAB_INDEX = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = VOCAB_INDEX[PAD_TOKEN]
MASK_ID = VOCAB_INDEX[MASK_TOKEN]

# nominal half extents (x, y, z) per object class, jittered at placement time
_HALF_EXTENTS = {
    "chair": (0.25, 0.25, 0.42),
    "table": (0.55, 0.45, 0.36),
    "lamp": (0.14, 0.14, 0.55),
    "sofa": (0.70, 0.35, 0.38),
    "crate": (0.30, 0.30, 0.30),
    "shelf": (0.45, 0.18, 0.70),
    "plant": (0.18, 0.18, 0.38),
    "sink": (0.28, 0.22, 0.24),
}

_BASE_COLORS = {
    "floor": (0.50, 0.50, 0.50),
    "wall": (0.85, 0.85, 0.80),
    "chair": (0.80, 0.20, 0.20),
    "table": (0.60, 0.40, 0.20),
    "lamp": (0.95, 0.90, 0.30),
    "sofa": (0.20, 0.30, 0.80),
    "crate": (0.70, 0.55, 0.30),
    "shelf": (0.40, 0.25, 0.15),
    "plant": (0.20, 0.70, 0.30),
    "sink": (0.90, 0.90, 0.95),
}

PAIR_CLASSES = ("chair", "crate", "plant")
ANCHOR_CLASSES = ("table", "sofa", "shelf", "sink")


class SceneGenerationError(RuntimeError):
    pass


class ReferralError(RuntimeError):
    pass


class SceneFormatError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    family: str = "mixed"            # mixed | relational | view
    room: tuple = (8.0, 8.0, 3.0)
    wall_margin: float = 0.8
    min_sep: float = 0.5
    points_per_instance: tuple = (40, 80)
    floor_points: int = 160
    wall_points: int = 80
    color_noise: float = 0.05
    extra_fillers: tuple = (0, 1)    # mixed family only

    def validate(self):
        if min(self.room) <= 0:
            raise ValueError("room dimensions must be positive")
        if self.points_per_instance[0] < 20:
            raise ValueError("instances need at least 20 points")
        if not 0 <= self.min_sep:
            raise ValueError("min_sep must be non-negative")
        if self.family not in ("mixed", "relational", "view"):
            raise ValueError(f"unknown scene family {self.family!r}")


@dataclass
class InstanceRecord:
    id: int
    semantic: int
    centroid: np.ndarray
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    point_indices: np.ndarray


@dataclass
class Referral:
    tokens: list
    text: str
    target_id: int
    kind: str
    camera: np.ndarray


@dataclass
class Scene:
    points: np.ndarray          # (N, 3) meters
    colors: np.ndarray          # (N, 3) in [0, 1]
    instance_id: np.ndarray     # (N,) int, -1 = background
    semantic_id: np.ndarray     # (N,) int in [0, C)
    instances: list
    camera: np.ndarray          # (3,)
    referrals: list = field(default_factory=list)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def instance_by_id(self, inst_id: int) -> InstanceRecord:
        for inst in self.instances:
            if inst.id == inst_id:
                return inst
        raise KeyError(f"no instance with id {inst_id}")

    def gt_mask(self, inst_id: int) -> np.ndarray:
        return self.instance_id == inst_id

    def class_count(self, semantic: int) -> int:
        return sum(1 for inst in self.instances if inst.semantic == semantic)


def _quant(a: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(a, dtype=np.float64), 6)


def _dist_xy(a, b) -> float:
    return float(math.hypot(a[0] - b[0], a[1] - b[1]))


# ---------------------------------------------------------------------------
# scene generation


def _sample_center(rng, config, half, constraint=None, existing=(), attempts=1000):
    rx, ry, _ = config.room
    lo_x = config.wall_margin + half[0]
    hi_x = rx - config.wall_margin - half[0]
    lo_y = config.wall_margin + half[1]
    hi_y = ry - config.wall_margin - half[1]
    if hi_x <= lo_x or hi_y <= lo_y:
        raise SceneGenerationError("room too small for the requested instance")
    for _ in range(attempts):
        c = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y), half[2]])
        if any(float(np.linalg.norm(c - e)) < config.min_sep for e in existing):
            continue
        if constraint is not None and not constraint(c):
            continue
        return c
    raise SceneGenerationError("infeasible packing: 1000 rejection attempts exhausted")


def _jittered_half(rng, cls) -> np.ndarray:
    base = np.array(_HALF_EXTENTS[cls])
    return base * rng.uniform(0.85, 1.15, size=3)


def _plan_lamp(rng, config):
    """Lamp against one of the four walls; the camera hangs off it."""
    rx, ry, _ = config.room
    half = _jittered_half(rng, "lamp")
    wall = int(rng.integers(4))
    off = config.wall_margin + half[0] + rng.uniform(0.0, 0.25)
    if wall == 0:
        c = np.array([off, rng.uniform(config.wall_margin + half[1], ry - config.wall_margin - half[1]), half[2]])
        inward = np.array([1.0, 0.0])
    elif wall == 1:
        c = np.array([rx - off, rng.uniform(config.wall_margin + half[1], ry - config.wall_margin - half[1]), half[2]])
        inward = np.array([-1.0, 0.0])
    elif wall == 2:
        c = np.array([rng.uniform(config.wall_margin + half[0], rx - config.wall_margin - half[0]), off, half[2]])
        inward = np.array([0.0, 1.0])
    else:
        c = np.array([rng.uniform(config.wall_margin + half[0], rx - config.wall_margin - half[0]), ry - off, half[2]])
        inward = np.array([0.0, -1.0])
    camera = np.array([c[0] + 0.8 * inward[0], c[1] + 0.8 * inward[1], 1.5])
    return ("lamp", c, half), camera


def _pair_laterals(centers, camera) -> np.ndarray:
    """Signed lateral coordinate of each center along the camera-frame right axis."""
    mid = np.mean([c[:2] for c in centers], axis=0)
    f = mid - camera[:2]
    n = np.linalg.norm(f)
    if n < 1e-9:
        return None
    f = f / n
    right = np.array([f[1], -f[0]])
    return np.array([float((c[:2] - mid) @ right) for c in centers])


def _plan_pair(rng, config, camera, existing, pair_cls, near_anchor=None, far_others=()):
    """Place two same-class instances with unambiguous left/right laterals.

    `near_anchor`, when given, is (center, lo, hi): the first member keeps its
    centroid distance to that anchor inside [lo, hi] while the second stays
    beyond RELATION_RADIUS + DISTRACTOR_SLACK of it and of `far_others`.
    """
    for _ in range(1000):
        half_a = _jittered_half(rng, pair_cls)
        half_b = _jittered_half(rng, pair_cls)
        if near_anchor is not None:
            anchor_c, lo, hi = near_anchor
            # plan the 3-D centroid distance, then place in the xy plane
            dz = abs(float(anchor_c[2]) - float(half_a[2]))
            lo_eff = max(lo, config.min_sep, dz + 0.1)
            if lo_eff >= hi:
                continue
            d3 = rng.uniform(lo_eff, hi)
            r = math.sqrt(d3 * d3 - dz * dz)
            theta = rng.uniform(0.0, 2.0 * math.pi)
            ca = np.array([anchor_c[0] + r * math.cos(theta), anchor_c[1] + r * math.sin(theta), half_a[2]])
            rx, ry, _ = config.room
            if not (config.wall_margin + half_a[0] <= ca[0] <= rx - config.wall_margin - half_a[0]
                    and config.wall_margin + half_a[1] <= ca[1] <= ry - config.wall_margin - half_a[1]):
                continue
            if any(float(np.linalg.norm(ca - e)) < config.min_sep for e in existing):
                continue
        else:
            try:
                ca = _sample_center(rng, config, half_a, existing=existing, attempts=50)
            except SceneGenerationError:
                continue

        def far_enough(c):
            anchors = list(far_others)
            if near_anchor is not None:
                anchors.append(near_anchor[0])
            return all(_dist_xy(c, a) > RELATION_RADIUS + DISTRACTOR_SLACK for a in anchors)

        try:
            cb = _sample_center(rng, config, half_b, constraint=far_enough,
                                existing=list(existing) + [ca], attempts=50)
        except SceneGenerationError:
            continue
        lat = _pair_laterals([ca, cb], camera)
        if lat is None:
            continue
        if lat[0] * lat[1] < 0 and min(abs(lat[0]), abs(lat[1])) >= 0.4:
            return [(pair_cls, ca, half_a), (pair_cls, cb, half_b)]
    raise SceneGenerationError("infeasible packing: 1000 rejection attempts exhausted")


def _plan_layout(rng, config, camera, lamp_plan):
    """Return the list of (class, center, half_extents) for the family."""
    plans = [lamp_plan]
    centers = [lamp_plan[1]]
    if config.family == "view":
        pair_cls = str(rng.choice(PAIR_CLASSES))
        pair = _plan_pair(rng, config, camera, centers, pair_cls)
        plans.extend(pair)
    elif config.family == "relational":
        anchor_cls = str(rng.choice(ANCHOR_CLASSES))
        anchor_half = _jittered_half(rng, anchor_cls)
        anchor_c = _sample_center(
            rng, config, anchor_half, existing=centers,
            constraint=lambda c: _dist_xy(c, camera) > 1.2)
        plans.append((anchor_cls, anchor_c, anchor_half))
        centers.append(anchor_c)
        pair_cls = str(rng.choice(PAIR_CLASSES))
        pair = _plan_pair(rng, config, camera, centers, pair_cls,
                          near_anchor=(anchor_c, 0.55, RELATION_RADIUS - RELATION_SLACK))
        plans.extend(pair)
        centers.extend(p[1] for p in pair)
        if rng.random() < 0.5:
            extra_half = _jittered_half(rng, pair_cls)
            far = lambda c: all(_dist_xy(c, a) > RELATION_RADIUS + DISTRACTOR_SLACK
                                for a in [anchor_c])
            plans.append((pair_cls, _sample_center(rng, config, extra_half,
                                                   constraint=far, existing=centers), extra_half))
    else:  # mixed
        anchor_cls = str(rng.choice(ANCHOR_CLASSES))
        anchor_half = _jittered_half(rng, anchor_cls)
        anchor_c = _sample_center(rng, config, anchor_half, existing=centers)
        plans.append((anchor_cls, anchor_c, anchor_half))
        centers.append(anchor_c)
        pair_cls = str(rng.choice(PAIR_CLASSES))
        pair = _plan_pair(rng, config, camera, centers, pair_cls,
                          near_anchor=(anchor_c, 0.55, RELATION_RADIUS - RELATION_SLACK))
        plans.extend(pair)
        centers.extend(p[1] for p in pair)
        n_extra = int(rng.integers(config.extra_fillers[0], config.extra_fillers[1] + 1))
        used = {anchor_cls, pair_cls, "lamp"}
        pool = [c for c in ANCHOR_CLASSES if c not in used]
        for _ in range(n_extra):
            if not pool:
                break
            cls = str(rng.choice(pool))
            pool.remove(cls)
            half = _jittered_half(rng, cls)
            plans.append((cls, _sample_center(rng, config, half, existing=centers), half))
            centers.append(plans[-1][1])
    return plans


def _seed_words(seed: int):
    s = seed & 0xFFFFFFFFFFFFFFFF
    return [s & 0xFFFFFFFF, (s >> 32) & 0xFFFFFFFF]


def gen_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministically generate one scene for (config, seed).

    Layouts are resampled until the family's referral kinds are actually
    resolvable from the sampled point centroids (sampling noise can push a
    planned layout over a predicate margin).
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([17] + _seed_words(seed)))
    for _ in range(50):
        scene = _gen_scene_once(config, rng)
        if config.family == "relational":
            feasible = bool(_relational_options(scene))
        elif config.family == "view":
            modes = {mode for _, _, mode in _view_options(scene)}
            feasible = {"left", "right"} <= modes
        else:
            feasible = bool(_relational_options(scene)) and bool(_view_options(scene))
        if feasible:
            return scene
    raise SceneGenerationError("could not realize a feasible layout in 50 attempts")


def _gen_scene_once(config: SceneConfig, rng) -> Scene:
    lamp_plan, camera = _plan_lamp(rng, config)
    plans = _plan_layout(rng, config, camera, lamp_plan)

    points, colors, inst_ids, sem_ids = [], [], [], []
    instances = []
    offset = 0
    for inst_id, (cls, center, half) in enumerate(plans):
        n = int(rng.integers(config.points_per_instance[0], config.points_per_instance[1] + 1))
        pts = _quant(center + rng.uniform(-1.0, 1.0, size=(n, 3)) * half)
        base = np.array(_BASE_COLORS[cls]) + rng.uniform(-0.08, 0.08, size=3)
        cols = _quant(np.clip(base + rng.uniform(-config.color_noise, config.color_noise, size=(n, 3)), 0.0, 1.0))
        sem = CLASSES.index(cls)
        points.append(pts)
        colors.append(cols)
        inst_ids.append(np.full(n, inst_id, dtype=np.int64))
        sem_ids.append(np.full(n, sem, dtype=np.int64))
        instances.append(InstanceRecord(
            id=inst_id, semantic=sem,
            centroid=pts.mean(axis=0),
            aabb_min=pts.min(axis=0), aabb_max=pts.max(axis=0),
            point_indices=np.arange(offset, offset + n, dtype=np.int64)))
        offset += n

    rx, ry, rz = config.room
    if config.floor_points > 0:
        fp = np.column_stack([rng.uniform(0, rx, config.floor_points),
                              rng.uniform(0, ry, config.floor_points),
                              np.zeros(config.floor_points)])
        points.append(_quant(fp))
        base = np.array(_BASE_COLORS["floor"])
        colors.append(_quant(np.clip(base + rng.uniform(-config.color_noise, config.color_noise,
                                                        size=(config.floor_points, 3)), 0, 1)))
        inst_ids.append(np.full(config.floor_points, -1, dtype=np.int64))
        sem_ids.append(np.full(config.floor_points, CLASSES.index("floor"), dtype=np.int64))
        offset += config.floor_points
    if config.wall_points > 0:
        per = config.wall_points // 4
        segs = []
        for wall in range(4):
            t = rng.uniform(0, rx if wall >= 2 else ry, per)
            z = rng.uniform(0, rz, per)
            if wall == 0:
                segs.append(np.column_stack([np.zeros(per), t, z]))
            elif wall == 1:
                segs.append(np.column_stack([np.full(per, rx), t, z]))
            elif wall == 2:
                segs.append(np.column_stack([t, np.zeros(per), z]))
            else:
                segs.append(np.column_stack([t, np.full(per, ry), z]))
        wp = np.concatenate(segs, axis=0)
        points.append(_quant(wp))
        base = np.array(_BASE_COLORS["wall"])
        colors.append(_quant(np.clip(base + rng.uniform(-config.color_noise, config.color_noise,
                                                        size=(wp.shape[0], 3)), 0, 1)))
        inst_ids.append(np.full(wp.shape[0], -1, dtype=np.int64))
        sem_ids.append(np.full(wp.shape[0], CLASSES.index("wall"), dtype=np.int64))

    scene = Scene(
        points=np.concatenate(points, axis=0),
        colors=np.concatenate(colors, axis=0),
        instance_id=np.concatenate(inst_ids),
        semantic_id=np.concatenate(sem_ids),
        instances=instances,
        camera=_quant(camera),
    )
    return scene


# ---------------------------------------------------------------------------
# referral generation


def _tokens(words) -> list:
    return [VOCAB_INDEX[w] for w in words]


def _relational_options(scene: Scene):
    """All (target_instance, target_cls, anchor_cls) with a unique in-radius target."""
    options = []
    by_class = {}
    for inst in scene.instances:
        by_class.setdefault(inst.semantic, []).append(inst)
    for tgt_sem, group in by_class.items():
        if len(group) < 2:
            continue
        for anc_sem, anchors in by_class.items():
            if anc_sem == tgt_sem or len(anchors) != 1:
                continue
            anchor = anchors[0]
            inside = [i for i in group
                      if float(np.linalg.norm(i.centroid - anchor.centroid)) < RELATION_RADIUS]
            if len(inside) != 1:
                continue
            target = inside[0]
            others_clear = all(
                float(np.linalg.norm(i.centroid - anchor.centroid)) >= RELATION_RADIUS + RELATION_SLACK
                for i in group if i.id != target.id)
            near_enough = float(np.linalg.norm(target.centroid - anchor.centroid)) <= RELATION_RADIUS - RELATION_SLACK
            if others_clear and near_enough:
                options.append((target, CLASSES[tgt_sem], CLASSES[anc_sem]))
    return options


def _view_options(scene: Scene):
    """All (target_instance, target_cls, mode) that are view-unambiguous."""
    options = []
    by_class = {}
    for inst in scene.instances:
        by_class.setdefault(inst.semantic, []).append(inst)
    cam = scene.camera
    for sem, group in by_class.items():
        if len(group) < 2:
            continue
        lat = _pair_laterals([i.centroid for i in group], cam)
        if lat is None:
            continue
        neg = [k for k, v in enumerate(lat) if v < 0]
        pos = [k for k, v in enumerate(lat) if v > 0]
        if len(neg) == 1 and all(lat[k] >= LATERAL_MARGIN for k in pos) and lat[neg[0]] <= -LATERAL_MARGIN:
            options.append((group[neg[0]], CLASSES[sem], "left"))
        if len(pos) == 1 and all(lat[k] <= -LATERAL_MARGIN for k in neg) and lat[pos[0]] >= LATERAL_MARGIN:
            options.append((group[pos[0]], CLASSES[sem], "right"))
        dists = np.array([float(np.linalg.norm(cam - i.centroid)) for i in group])
        order = np.argsort(dists)
        if dists[order[1]] - dists[order[0]] >= CLOSEST_GAP:
            options.append((group[order[0]], CLASSES[sem], "closest"))
    return options


def gen_referral(scene: Scene, kind: str, seed: int, view_mode: str | None = None) -> Referral:
    """Generate one referral of the given kind, or raise ReferralError."""
    if kind not in KINDS:
        raise ValueError(f"unknown referral kind {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence([29] + _seed_words(seed)))
    if kind == KIND_UNIQUE:
        uniques = [inst for inst in scene.instances if scene.class_count(inst.semantic) == 1]
        if not uniques:
            raise ReferralError("scene has no semantically unique instance")
        target = uniques[int(rng.integers(len(uniques)))]
        words = ["the", CLASSES[target.semantic]]
    elif kind == KIND_RELATIONAL:
        options = _relational_options(scene)
        if not options:
            raise ReferralError("no unambiguous relational referral in this scene")
        target, tgt_cls, anc_cls = options[int(rng.integers(len(options)))]
        words = ["the", tgt_cls, "near", "the", anc_cls]
    else:
        options = _view_options(scene)
        if view_mode is not None:
            options = [o for o in options if o[2] == view_mode]
        if not options:
            raise ReferralError("no unambiguous view-dependent referral in this scene")
        target, tgt_cls, mode = options[int(rng.integers(len(options)))]
        if mode == "closest":
            words = ["the", tgt_cls, "closest", "to", "the", "camera"]
        else:
            words = ["the", tgt_cls, "on", "the", mode]
    return Referral(tokens=_tokens(words), text=" ".join(words),
                    target_id=target.id, kind=kind, camera=scene.camera.copy())


def target_noun_positions(referral: Referral, scene: Scene) -> list:
    """Token positions holding the referred object's class noun."""
    noun = VOCAB_INDEX[CLASSES[scene.instance_by_id(referral.target_id).semantic]]
    return [i for i, t in enumerate(referral.tokens) if t == noun]


# ---------------------------------------------------------------------------
# serialization: one JSON object per scene, floats at 9 significant digits


def _f(x) -> str:
    return format(float(x), ".9g")


def _vec(v) -> str:
    return "[" + ", ".join(_f(x) for x in v) + "]"


def _rows(a) -> str:
    return "[\n    " + ",\n    ".join(_vec(r) for r in a) + "\n  ]"


def _ints(a) -> str:
    return "[" + ", ".join(str(int(x)) for x in a) + "]"


def scene_to_text(scene: Scene) -> str:
    inst_parts = []
    for inst in scene.instances:
        inst_parts.append(
            '{"id": %d, "class": %d, "centroid": %s, "aabb_min": %s, "aabb_max": %s}'
            % (inst.id, inst.semantic, _vec(inst.centroid), _vec(inst.aabb_min), _vec(inst.aabb_max)))
    ref_parts = []
    for ref in scene.referrals:
        ref_parts.append(
            '{"tokens": %s, "text": %s, "target_id": %d, "kind": %s}'
            % (_ints(ref.tokens), json.dumps(ref.text), ref.target_id, json.dumps(ref.kind)))
    return (
        "{\n"
        '  "points": ' + _rows(scene.points) + ",\n"
        '  "colors": ' + _rows(scene.colors) + ",\n"
        '  "instance_id": ' + _ints(scene.instance_id) + ",\n"
        '  "semantic_id": ' + _ints(scene.semantic_id) + ",\n"
        '  "instances": [\n    ' + ",\n    ".join(inst_parts) + "\n  ],\n"
        '  "camera": ' + _vec(scene.camera) + ",\n"
        '  "referrals": [\n    ' + (",\n    ".join(ref_parts) if ref_parts else "") + "\n  ]\n"
        "}\n"
    )


def save_scene(scene: Scene, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scene_to_text(scene))


def load_scene(path: str) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return scene_from_text(text)


def scene_from_text(text: str) -> Scene:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"malformed scene file at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        points = np.asarray(obj["points"], dtype=np.float64)
        colors = np.asarray(obj["colors"], dtype=np.float64)
        instance_id = np.asarray(obj["instance_id"], dtype=np.int64)
        semantic_id = np.asarray(obj["semantic_id"], dtype=np.int64)
        camera = np.asarray(obj["camera"], dtype=np.float64)
        raw_instances = obj["instances"]
        raw_referrals = obj["referrals"]
    except KeyError as exc:
        raise SceneFormatError(f"scene file missing field {exc.args[0]!r}") from exc
    if points.ndim != 2 or points.shape[1] != 3 or colors.shape != points.shape:
        raise SceneFormatError("points/colors must be parallel Nx3 arrays")
    n = points.shape[0]
    if instance_id.shape != (n,) or semantic_id.shape != (n,):
        raise SceneFormatError("instance_id/semantic_id length mismatch")

    instances = []
    for rec in raw_instances:
        inst_id = int(rec["id"])
        idx = np.flatnonzero(instance_id == inst_id)
        if idx.size == 0:
            raise SceneFormatError(f"instance {inst_id} has no points")
        pts = points[idx]
        centroid = pts.mean(axis=0)
        aabb_min, aabb_max = pts.min(axis=0), pts.max(axis=0)
        if (np.abs(centroid - np.asarray(rec["centroid"])).max() > 1e-6
                or np.abs(aabb_min - np.asarray(rec["aabb_min"])).max() > 1e-6
                or np.abs(aabb_max - np.asarray(rec["aabb_max"])).max() > 1e-6):
            raise SceneFormatError(f"instance {inst_id} geometry disagrees with its points")
        sem = int(rec["class"])
        if not np.all(semantic_id[idx] == sem):
            raise SceneFormatError(f"instance {inst_id} class disagrees with per-point labels")
        instances.append(InstanceRecord(inst_id, sem, centroid, aabb_min, aabb_max, idx))

    ids = {inst.id for inst in instances}
    if set(np.unique(instance_id[instance_id >= 0]).tolist()) != ids:
        raise SceneFormatError("instance records do not cover the labeled points")

    referrals = []
    for rec in raw_referrals:
        tokens = [int(t) for t in rec["tokens"]]
        if any(t < 0 or t >= len(VOCAB) for t in tokens):
            raise SceneFormatError("referral token id outside the vocabulary")
        kind = str(rec["kind"])
        if kind not in KINDS:
            raise SceneFormatError(f"unknown referral kind {kind!r}")
        target = int(rec["target_id"])
        if target not in ids:
            raise SceneFormatError(f"referral targets missing instance {target}")
        referrals.append(Referral(tokens, str(rec["text"]), target, kind, camera.copy()))

    return Scene(points, colors, instance_id, semantic_id, instances, camera, referrals)


def scenes_equal(a: Scene, b: Scene) -> bool:
    if not (np.array_equal(a.points, b.points) and np.array_equal(a.colors, b.colors)
            and np.array_equal(a.instance_id, b.instance_id)
            and np.array_equal(a.semantic_id, b.semantic_id)
            and np.array_equal(a.camera, b.camera)
            and len(a.instances) == len(b.instances) and len(a.referrals) == len(b.referrals)):
        return False
    for x, y in zip(a.instances, b.instances):
        if x.id != y.id or x.semantic != y.semantic:
            return False
        if not (np.array_equal(x.centroid, y.centroid) and np.array_equal(x.aabb_min, y.aabb_min)
                and np.array_equal(x.aabb_max, y.aabb_max) and np.array_equal(x.point_indices, y.point_indices)):
            return False
    for x, y in zip(a.referrals, b.referrals):
        if x.tokens != y.tokens or x.text != y.text or x.target_id != y.target_id or x.kind != y.kind:
            return False
    return True


def save_vocabulary(path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(VOCAB) + "\n")


def load_vocabulary(path: str) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# datasets: directory of scene files plus a manifest with the split


def _scene_seed(seed: int, index: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _split_names(names, seed: int):
    ranked = sorted(names, key=lambda n: hashlib.md5(f"{seed}:{n}".encode()).hexdigest())
    n_val = max(1, round(0.1 * len(names))) if len(names) > 1 else 0
    val = set(ranked[:n_val])
    return sorted(n for n in names if n not in val), sorted(val)


def referral_kinds_for_family(family: str):
    if family == "relational":
        return [(KIND_RELATIONAL, None)]
    if family == "view":
        return [(KIND_VIEW, "left"), (KIND_VIEW, "right")]
    return [(KIND_UNIQUE, None), (KIND_RELATIONAL, None), (KIND_VIEW, None)]


def generate_dataset(out_dir: str, config: SceneConfig, seed: int, count: int) -> dict:
    """Write `count` scenes plus manifest.json; returns the manifest dict."""
    if count < 1:
        raise ValueError("count must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(count):
        scene_seed = _scene_seed(seed, i)
        scene = gen_scene(config, scene_seed)
        for j, (kind, mode) in enumerate(referral_kinds_for_family(config.family)):
            try:
                scene.referrals.append(
                    gen_referral(scene, kind, _scene_seed(scene_seed, 1000 + j), view_mode=mode))
            except ReferralError:
                continue
        if not scene.referrals:
            raise SceneGenerationError(f"scene {i} admitted no referral of any requested kind")
        name = f"scene_{i:04d}"
        save_scene(scene, os.path.join(out_dir, name + ".json"))
        names.append(name)
    train, val = _split_names(names, seed)
    manifest = {
        "version": 1,
        "seed": seed,
        "family": config.family,
        "count": count,
        "train": train,
        "val": val,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_vocabulary(os.path.join(out_dir, "vocabulary.txt"))
    return manifest


def load_dataset(path: str):
    """Return (train, val) lists of (name, Scene) per the manifest."""
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    def _load(names):
        return [(name, load_scene(os.path.join(path, name + ".json"))) for name in names]
    return _load(manifest["train"]), _load(manifest["val"])
