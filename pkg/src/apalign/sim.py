"""Synthetic desk-scale tabletop benchmark.

Scenes are collections of discs and boxes on a plane.  Rendering is a
z-buffer rasterization of surfaces sampled at millimeter pitch, with
per-pixel features drawn from a controlled embedding bank whose cosine
structure is asserted at construction.  Grasp and place physics are
rule-based (footprint containment and a gripper-corridor sweep), giving
an exact binary reward to train and evaluate against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cloudfuse import (
    CameraModel,
    FusionConfig,
    SampledClouds,
    ViewInputs,
    WorkspaceBounds,
    build_clouds,
    look_at,
    prioritized_sample,
    project_points,
)
from .common import ExpertStuck, ValidationError, stable_rng, stable_seed
from .priors import (
    CandidateSet,
    Footprint,
    GraspAction,
    GraspConfig,
    ObjectRegion,
    PlaceAction,
    PlaceConfig,
    encode_action,
    footprint_intersects_rect,
    region_proposals,
    sample_places,
    synth_grasps,
)

# --------------------------------------------------------------- vocabulary

CLASS_COUNT = 24
SEEN_CLASS_COUNT = 18
KEYWORD_TYPES = ("concrete", "category", "attribute", "function")
KEYWORD_TYPE_WEIGHTS = (4, 2, 2, 2)

PICK_TEMPLATES = (
    "Give me the {kw}.",
    "Pick up the {kw}.",
    "Grab the {kw}.",
    "Fetch the {kw}.",
    "Hand over the {kw}.",
)
PLACE_TEMPLATES = (
    "Put the item {rel} the {kw}.",
    "Place it {rel} the {kw}.",
    "Move it {rel} the {kw}.",
)
RELATION_WORDS = {
    "on top of": "on", "onto": "on", "into": "on",
    "next to": "around", "near": "around", "beside": "around",
}

# surface forms per class: concrete, category, attribute, function
KEYWORD_FORMS = (
    ("mug", "drinkware", "ceramic cup", "thing you drink coffee from"),
    ("block", "toy", "wooden cube", "thing you stack"),
    ("bowl", "dishware", "round dish", "thing you eat soup from"),
    ("battery", "power cell", "small cylinder", "thing that powers a remote"),
    ("plate", "dishware", "flat dish", "thing you serve food on"),
    ("eraser", "stationery", "rubber block", "thing that removes pencil marks"),
    ("can", "container", "metal cylinder", "thing soda comes in"),
    ("soap bar", "toiletry", "waxy block", "thing you wash hands with"),
    ("coaster", "tableware", "cork disc", "thing you rest a glass on"),
    ("sponge", "cleaning supply", "porous block", "thing you scrub dishes with"),
    ("candle", "decoration", "wax cylinder", "thing you light for ambience"),
    ("chalk box", "stationery", "dusty carton", "thing that holds chalk sticks"),
    ("jar lid", "kitchenware", "threaded disc", "thing that seals a jar"),
    ("domino case", "game piece", "tile box", "thing that stores dominoes"),
    ("puck", "sports gear", "rubber disc", "thing you slide on ice"),
    ("soap dish", "toiletry", "curved tray", "thing that holds a soap bar"),
    ("yo-yo", "toy", "spooled disc", "thing you spin on a string"),
    ("matchbox", "household item", "striking carton", "thing that stores matches"),
    ("tin", "container", "round canister", "thing you keep tea leaves in"),
    ("note cube", "stationery", "paper block", "thing you jot reminders on"),
    ("bottle cap", "kitchenware", "ridged disc", "thing that tops a bottle"),
    ("card deck", "game piece", "boxed stack", "thing you deal hands from"),
    ("hockey disc", "sports gear", "weighted disc", "thing you shoot at a goal"),
    ("pencil tray", "stationery", "shallow box", "thing that corrals pencils"),
)


class EmbeddingBank:
    """Deterministic class/keyword/table vectors with known cosine structure.

    Class directions come from one orthonormal basis, keeping them exactly
    orthogonal.  A keyword vector is 0.8 * its class direction plus a 0.6
    residual drawn from the leftover subspace, so cos(keyword, own class)
    is exactly 0.8 and at most 0.3 (asserted) to any other class.
    Instruction embeddings for "around" relations mix in the table
    direction, which is how relation intent reaches the network.
    """

    KEYWORD_COS = 0.8
    RELATION_MIX = 0.8

    def __init__(self, dim: int = 32, key: str = "desk") -> None:
        if dim < CLASS_COUNT + 2:
            raise ValidationError("dim", f"need at least {CLASS_COUNT + 2} dims")
        self.dim = dim
        rng = stable_rng("embedding-bank", key)
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        q = q * np.sign(np.diag(q))[None, :]
        self.class_dirs = q[:, :CLASS_COUNT].T.copy()
        self.table_dir = q[:, CLASS_COUNT].copy()
        rest = q[:, CLASS_COUNT + 1:]
        residual = math.sqrt(1.0 - self.KEYWORD_COS ** 2)
        self.keywords = np.zeros((CLASS_COUNT, len(KEYWORD_TYPES), dim))
        for class_id in range(CLASS_COUNT):
            for kw_type in range(len(KEYWORD_TYPES)):
                mix = rest @ rng.normal(size=rest.shape[1])
                mix /= np.linalg.norm(mix)
                self.keywords[class_id, kw_type] = (
                    self.KEYWORD_COS * self.class_dirs[class_id] + residual * mix)
        cross = self.keywords.reshape(-1, dim) @ self.class_dirs.T
        own = cross.reshape(CLASS_COUNT, len(KEYWORD_TYPES), CLASS_COUNT)
        for class_id in range(CLASS_COUNT):
            matched = own[class_id, :, class_id]
            assert np.allclose(matched, self.KEYWORD_COS, atol=1e-9)
            others = np.delete(own[class_id], class_id, axis=1)
            assert np.abs(others).max() <= 0.3
            assert (np.argmax(own[class_id], axis=1) == class_id).all()

    def class_embedding(self, class_id: int) -> np.ndarray:
        return self.class_dirs[class_id]

    def table_embedding(self) -> np.ndarray:
        return self.table_dir

    def keyword_embedding(self, class_id: int, kw_type: int) -> np.ndarray:
        return self.keywords[class_id, kw_type]

    def instruction_embedding(self, class_id: int, kw_type: int,
                              relation: str | None = None) -> np.ndarray:
        kw = self.keywords[class_id, kw_type]
        if relation == "around":
            mixed = kw + self.RELATION_MIX * self.table_dir
            return mixed / np.linalg.norm(mixed)
        return kw.copy()


# ------------------------------------------------------------------- scenes

@dataclass(frozen=True)
class DeskConfig:
    """Benchmark geometry and sensing knobs (documented desk defaults)."""

    table_height: float = 0.0
    spawn_x: tuple[float, float] = (-0.36, 0.36)
    spawn_y: tuple[float, float] = (-0.22, 0.22)
    bounds_lo: tuple[float, float, float] = (-0.45, -0.30, -0.005)
    bounds_hi: tuple[float, float, float] = (0.45, 0.30, 0.30)
    table_x: tuple[float, float] = (-0.48, 0.48)
    table_y: tuple[float, float] = (-0.33, 0.33)
    image_width: int = 160
    image_height: int = 120
    focal: float = 140.0
    camera_radius: float = 0.7
    feature_dim: int = 32
    feature_noise: float = 0.1
    context_mix: float = 0.35
    context_radius: float = 0.06
    pick_objects: int = 15
    place_objects: int = 8
    combo_pick_objects: int = 10
    combo_place_objects: int = 6
    min_gap: float = 0.008
    place_spacing: float = 0.10
    surface_step: float = 0.002
    table_step: float = 0.004
    n_sample: int = 160
    max_steps: int = 8
    place_jitter: float = 0.003

    def workspace_bounds(self) -> WorkspaceBounds:
        return WorkspaceBounds(lo=self.bounds_lo, hi=self.bounds_hi,
                               table_height=self.table_height)

    def workspace_xy(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return (self.spawn_x, self.spawn_y)


def desk_cameras(desk: DeskConfig | None = None) -> list[CameraModel]:
    """Three fixed cameras: front at 45 degrees down, two diagonals at 50."""
    desk = desk or DeskConfig()
    rigs = []
    for azimuth_deg, tilt_deg in ((-90.0, 45.0), (45.0, 50.0), (135.0, 50.0)):
        azimuth = math.radians(azimuth_deg)
        tilt = math.radians(tilt_deg)
        eye = (desk.camera_radius * math.cos(tilt) * math.cos(azimuth),
               desk.camera_radius * math.cos(tilt) * math.sin(azimuth),
               desk.table_height + desk.camera_radius * math.sin(tilt))
        pose = look_at(eye, (0.0, 0.0, desk.table_height))
        rigs.append(CameraModel(fx=desk.focal, fy=desk.focal,
                                cx=(desk.image_width - 1) / 2.0,
                                cy=(desk.image_height - 1) / 2.0,
                                width=desk.image_width,
                                height=desk.image_height, pose=pose))
    return rigs


@dataclass(frozen=True)
class ObjectSpec:
    """Per-class base geometry; instances add pose and small size jitter."""

    class_id: int
    kind: str                    # "disc" | "box"
    radius: float
    half_extents: tuple[float, float]
    height: float


def class_spec(class_id: int) -> ObjectSpec:
    rng = stable_rng("object-spec", class_id)
    kind = "disc" if class_id % 2 == 0 else "box"
    radius = float(rng.uniform(0.026, 0.042))
    half_extents = (float(rng.uniform(0.022, 0.038)),
                    float(rng.uniform(0.022, 0.038)))
    height = float(rng.uniform(0.035, 0.085))
    return ObjectSpec(class_id=class_id, kind=kind, radius=radius,
                      half_extents=half_extents, height=height)


@dataclass
class SceneObject:
    uid: int
    class_id: int
    footprint: Footprint
    height: float

    def top_z(self, table_height: float) -> float:
        return table_height + self.height


@dataclass
class InstructionSpec:
    text: str
    keyword: str
    keyword_type: int
    class_id: int
    relation: str | None
    relation_word: str | None
    template_id: int
    embedding: np.ndarray


@dataclass
class Scene:
    kind: str                    # "pick" | "place" | "pick-place"
    seed: int
    split: str                   # "seen" | "unseen"
    objects: list[SceneObject]
    target_id: int | None
    ref_id: int | None
    pick_instruction: InstructionSpec | None
    place_instruction: InstructionSpec | None

    def object_by_id(self, uid: int) -> SceneObject:
        for obj in self.objects:
            if obj.uid == uid:
                return obj
        raise ValidationError("uid", f"no object {uid} in scene")


def sample_keyword_type(rng: np.random.Generator, class_id: int,
                        heldout: bool = False,
                        restrict_train: bool = True) -> int:
    """4:2:2:2 draw; training excludes each class's held-out type.

    The held-out keyword type rotates with the class id so 25% of the
    keyword corpus stays unseen while the aggregate training mix keeps
    the 4:2:2:2 shape.
    """
    held = class_id % len(KEYWORD_TYPES)
    if heldout:
        return held
    weights = np.array(KEYWORD_TYPE_WEIGHTS, dtype=np.float64)
    if restrict_train:
        weights[held] = 0.0
    return int(rng.choice(len(KEYWORD_TYPES), p=weights / weights.sum()))


def make_instruction(bank: EmbeddingBank, rng: np.random.Generator,
                     kind: str, class_id: int, kw_type: int,
                     relation: str | None = None) -> InstructionSpec:
    keyword = KEYWORD_FORMS[class_id][kw_type]
    if kind == "pick":
        template_id = int(rng.integers(len(PICK_TEMPLATES)))
        text = PICK_TEMPLATES[template_id].format(kw=keyword)
        rel_word = None
    else:
        template_id = int(rng.integers(len(PLACE_TEMPLATES)))
        words = [w for w, r in RELATION_WORDS.items() if r == relation]
        rel_word = words[int(rng.integers(len(words)))]
        text = PLACE_TEMPLATES[template_id].format(rel=rel_word, kw=keyword)
    return InstructionSpec(
        text=text, keyword=keyword, keyword_type=kw_type, class_id=class_id,
        relation=relation, relation_word=rel_word, template_id=template_id,
        embedding=bank.instruction_embedding(class_id, kw_type, relation))


def _instance_footprint(spec: ObjectSpec, xy: np.ndarray, scale: float,
                        yaw: float) -> Footprint:
    if spec.kind == "disc":
        return Footprint(kind="disc", center=(float(xy[0]), float(xy[1])),
                         radius=spec.radius * scale)
    return Footprint(kind="box", center=(float(xy[0]), float(xy[1])),
                     half_extents=(spec.half_extents[0] * scale,
                                   spec.half_extents[1] * scale), yaw=yaw)


def _clear_of(others: Sequence[SceneObject], fp: Footprint, gap: float) -> bool:
    center = np.asarray(fp.center)
    for other in others:
        dist = float(np.linalg.norm(center - np.asarray(other.footprint.center)))
        if dist < fp.bounding_radius() + other.footprint.bounding_radius() + gap:
            return False
    return True


def _place_object(rng, objects, class_id, uid, x_range, y_range, desk,
                  min_center_dist=None, max_tries=10_000) -> SceneObject:
    spec = class_spec(class_id)
    for _ in range(max_tries):
        xy = np.array([rng.uniform(*x_range), rng.uniform(*y_range)])
        scale = rng.uniform(0.9, 1.1)
        yaw = rng.uniform(0.0, 2 * math.pi)
        fp = _instance_footprint(spec, xy, scale, yaw)
        if min_center_dist is not None:
            centers = [np.asarray(o.footprint.center) for o in objects]
            if any(np.linalg.norm(xy - c) < min_center_dist for c in centers):
                continue
        if _clear_of(objects, fp, desk.min_gap):
            return SceneObject(uid=uid, class_id=class_id, footprint=fp,
                               height=spec.height * scale)
    raise ValidationError("seed", "object placement failed after 10000 tries")


def _cluster_obstacles(rng, objects, target, classes, start_uid, count, desk,
                       x_range, y_range) -> list[SceneObject]:
    """Drop obstacles close around the target so grasp corridors collide.

    A full ring can run out of room before ``count`` is reached; two
    crowding obstacles are enough, fewer is a bad seed.
    """
    placed = []
    uid = start_uid
    tries = 0
    while len(placed) < count:
        tries += 1
        if tries > 10_000:
            if len(placed) >= 2:
                break
            raise ValidationError("seed", "object placement failed after 10000 tries")
        class_id = classes[int(rng.integers(len(classes)))]
        spec = class_spec(class_id)
        scale = rng.uniform(0.9, 1.1)
        yaw = rng.uniform(0.0, 2 * math.pi)
        radius = spec.radius * scale if spec.kind == "disc" \
            else math.hypot(*spec.half_extents) * scale
        ring = (target.footprint.bounding_radius() + radius) * rng.uniform(1.02, 1.12)
        phi = rng.uniform(0.0, 2 * math.pi)
        xy = np.asarray(target.footprint.center) + ring * np.array(
            [math.cos(phi), math.sin(phi)])
        if not (x_range[0] <= xy[0] <= x_range[1]
                and y_range[0] <= xy[1] <= y_range[1]):
            continue
        fp = _instance_footprint(spec, xy, scale, yaw)
        # crowding is the point here, so only a sliver of clearance
        if _clear_of(objects + placed, fp, 0.002):
            placed.append(SceneObject(uid=uid, class_id=class_id, footprint=fp,
                                      height=spec.height * scale))
            uid += 1
    return placed


def spawn_scene(kind: str, seed: int, bank: EmbeddingBank, split: str = "seen",
                desk: DeskConfig | None = None) -> Scene:
    """Rejection-sample a scene of the requested kind.

    Seen scenes draw from the first 18 classes with training keywords;
    unseen scenes alternate novel classes (full keyword mix) and novel
    keywords on familiar classes.
    """
    desk = desk or DeskConfig()
    if kind not in ("pick", "place", "pick-place"):
        raise ValidationError("kind", f"unknown scene kind {kind!r}")
    if split not in ("seen", "unseen"):
        raise ValidationError("split", f"unknown split {split!r}")
    rng = stable_rng("scene", kind, split, seed)

    if split == "seen":
        id_pool = list(range(SEEN_CLASS_COUNT))
        heldout_kw = False
    elif seed % 2 == 0:
        id_pool = list(range(SEEN_CLASS_COUNT, CLASS_COUNT))
        heldout_kw = False
    else:
        id_pool = list(range(SEEN_CLASS_COUNT))
        heldout_kw = True
    distractor_pool = list(range(SEEN_CLASS_COUNT))

    objects: list[SceneObject] = []
    target_id = ref_id = None
    pick_instruction = place_instruction = None

    def fill(count, classes, x_range, y_range, start_uid,
             min_center_dist=None):
        out = []
        for i in range(count):
            class_id = classes[int(rng.integers(len(classes)))]
            out.append(_place_object(rng, objects + out, class_id,
                                     start_uid + i, x_range, y_range, desk,
                                     min_center_dist=min_center_dist))
        return out

    if kind in ("pick", "pick-place"):
        total = desk.pick_objects if kind == "pick" else desk.combo_pick_objects
        x_range = desk.spawn_x if kind == "pick" else (desk.spawn_x[0], -0.04)
        target_class = id_pool[int(rng.integers(len(id_pool)))]
        inner_x = (x_range[0] + 0.08, x_range[1] - 0.08)
        inner_y = (desk.spawn_y[0] + 0.06, desk.spawn_y[1] - 0.06)
        if inner_x[0] >= inner_x[1] or inner_y[0] >= inner_y[1]:
            raise ValidationError("desk", "spawn region too small for a target")
        target = _place_object(rng, objects, target_class, 0, inner_x, inner_y, desk)
        objects.append(target)
        target_id = 0
        distractors = [c for c in distractor_pool if c != target_class]
        blockers = _cluster_obstacles(rng, objects, target, distractors, 1,
                                      int(rng.integers(2, 5)), desk,
                                      x_range, desk.spawn_y)
        objects.extend(blockers)
        rest = total - len(objects)
        objects.extend(fill(rest, distractors, x_range, desk.spawn_y,
                            start_uid=len(objects)))
        kw_type = sample_keyword_type(rng, target_class, heldout=heldout_kw)
        pick_instruction = make_instruction(bank, rng, "pick", target_class, kw_type)

    if kind in ("place", "pick-place"):
        start_uid = len(objects)
        count = desk.place_objects if kind == "place" else desk.combo_place_objects
        x_range = desk.spawn_x if kind == "place" else (0.04, desk.spawn_x[1])
        ref_class = id_pool[int(rng.integers(len(id_pool)))]
        inner_x = (x_range[0] + 0.06, x_range[1] - 0.06)
        objects.append(_place_object(rng, objects, ref_class, start_uid,
                                     inner_x, desk.spawn_y, desk,
                                     min_center_dist=desk.place_spacing))
        objects.extend(fill(count - 1,
                            [c for c in distractor_pool if c != ref_class],
                            x_range, desk.spawn_y, start_uid + 1,
                            min_center_dist=desk.place_spacing))
        ref_id = start_uid
        relation = "on" if rng.uniform() < 0.5 else "around"
        kw_type = sample_keyword_type(rng, ref_class, heldout=heldout_kw)
        place_instruction = make_instruction(bank, rng, "place", ref_class,
                                             kw_type, relation)

    return Scene(kind=kind, seed=seed, split=split, objects=objects,
                 target_id=target_id, ref_id=ref_id,
                 pick_instruction=pick_instruction,
                 place_instruction=place_instruction)


# ---------------------------------------------------------------- rendering

def _disc_surface(fp: Footprint, top: float, table: float, step: float):
    r = fp.radius
    ticks = np.arange(-r, r + step / 2, step)
    gx, gy = np.meshgrid(ticks, ticks)
    keep = gx ** 2 + gy ** 2 <= r ** 2
    top_pts = np.stack([gx[keep] + fp.center[0], gy[keep] + fp.center[1],
                        np.full(keep.sum(), top)], axis=1)
    angles = np.arange(0.0, 2 * math.pi, step / max(r, 1e-6))
    heights = np.arange(table + step, top, step)
    ring = np.stack([fp.center[0] + r * np.cos(angles),
                     fp.center[1] + r * np.sin(angles)], axis=1)
    side = np.concatenate([
        np.column_stack([ring, np.full(len(ring), h)]) for h in heights
    ]) if len(heights) else np.zeros((0, 3))
    return np.concatenate([top_pts, side])


def _box_surface(fp: Footprint, top: float, table: float, step: float):
    hx, hy = fp.half_extents
    xs = np.arange(-hx, hx + step / 2, step)
    ys = np.arange(-hy, hy + step / 2, step)
    gx, gy = np.meshgrid(xs, ys)
    top_local = np.stack([gx.ravel(), gy.ravel(),
                          np.full(gx.size, top)], axis=1)
    heights = np.arange(table + step, top, step)
    sides = []
    for h in heights:
        sides.append(np.stack([xs, np.full(len(xs), -hy),
                               np.full(len(xs), h)], axis=1))
        sides.append(np.stack([xs, np.full(len(xs), hy),
                               np.full(len(xs), h)], axis=1))
        sides.append(np.stack([np.full(len(ys), -hx), ys,
                               np.full(len(ys), h)], axis=1))
        sides.append(np.stack([np.full(len(ys), hx), ys,
                               np.full(len(ys), h)], axis=1))
    local = np.concatenate([top_local] + sides) if sides \
        else top_local
    c, s = math.cos(fp.yaw), math.sin(fp.yaw)
    rot = np.array([[c, -s], [s, c]])
    world = local.copy()
    world[:, :2] = local[:, :2] @ rot.T + np.asarray(fp.center)
    return world


class SimWorld:
    """Mutable episode state: scene, removed objects, phase, caches."""

    def __init__(self, scene: Scene, bank: EmbeddingBank,
                 desk: DeskConfig | None = None,
                 cameras: Sequence[CameraModel] | None = None,
                 fusion: FusionConfig | None = None,
                 cloud_cache: dict | None = None) -> None:
        self.scene = scene
        self.bank = bank
        self.desk = desk or DeskConfig()
        self.cameras = list(cameras) if cameras is not None \
            else desk_cameras(self.desk)
        self.fusion = fusion or FusionConfig()
        # optional cross-episode memo for fused clouds: repeated runs of the
        # same scene share render outcomes, which only depend on the removal
        # set and step, never on the run key (callers must keep one cache per
        # desk/fusion configuration)
        self.cloud_cache = cloud_cache
        self.removed: set[int] = set()
        self.phase = "pick" if scene.kind in ("pick", "pick-place") else "place"
        self.target_grasped = False
        self._surfaces: dict[int, np.ndarray] = {}
        self._projections: dict[tuple[int, int], tuple] = {}
        self._table_cache: np.ndarray | None = None
        self._table_feature_cache: dict[tuple, np.ndarray] = {}
        self._resolve_cache: dict[tuple, tuple] = {}

    # ---- state ----

    def reset(self) -> None:
        """Return to the freshly spawned state; rendering caches survive."""
        self.removed.clear()
        self.phase = "pick" if self.scene.kind in ("pick", "pick-place") \
            else "place"
        self.target_grasped = False

    def active_objects(self) -> list[SceneObject]:
        return [o for o in self.scene.objects if o.uid not in self.removed]

    def instruction(self) -> InstructionSpec:
        spec = self.scene.pick_instruction if self.phase == "pick" \
            else self.scene.place_instruction
        if spec is None:
            raise ValidationError("phase", f"scene has no {self.phase} instruction")
        return spec

    def phase_objects(self) -> list[SceneObject]:
        """Objects relevant to the current phase (combo scenes use halves)."""
        active = self.active_objects()
        if self.scene.kind != "pick-place":
            return active
        if self.phase == "pick":
            return [o for o in active if o.footprint.center[0] < 0]
        return [o for o in active if o.footprint.center[0] > 0]

    # ---- rendering ----

    def _surface(self, obj: SceneObject) -> np.ndarray:
        if obj.uid not in self._surfaces:
            top = obj.top_z(self.desk.table_height)
            if obj.footprint.kind == "disc":
                pts = _disc_surface(obj.footprint, top, self.desk.table_height,
                                    self.desk.surface_step)
            else:
                pts = _box_surface(obj.footprint, top, self.desk.table_height,
                                   self.desk.surface_step)
            self._surfaces[obj.uid] = pts
        return self._surfaces[obj.uid]

    def _table_points(self) -> np.ndarray:
        if self._table_cache is None:
            xs = np.arange(self.desk.table_x[0], self.desk.table_x[1],
                           self.desk.table_step)
            ys = np.arange(self.desk.table_y[0], self.desk.table_y[1],
                           self.desk.table_step)
            gx, gy = np.meshgrid(xs, ys)
            pts = np.stack([gx.ravel(), gy.ravel(),
                            np.full(gx.size, self.desk.table_height)], axis=1)
            self._table_cache = pts
        return self._table_cache

    def _projected(self, key: int, pts: np.ndarray, cam_idx: int):
        cache_key = (key, cam_idx)
        if cache_key not in self._projections:
            cam = self.cameras[cam_idx]
            uv, ell, in_front = project_points(pts, cam)
            u = np.round(uv[:, 0]).astype(np.int64)
            v = np.round(uv[:, 1]).astype(np.int64)
            ok = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
            self._projections[cache_key] = (v[ok] * cam.width + u[ok], ell[ok],
                                            np.flatnonzero(ok))
        return self._projections[cache_key]

    def _table_features(self) -> np.ndarray:
        """Per-table-sample unit features with class context near objects."""
        key = tuple(sorted(self.removed))
        cached = self._table_feature_cache.get(key)
        if cached is not None:
            return cached
        pts = self._table_points()
        dirs = np.tile(self.bank.table_dir.astype(np.float32), (len(pts), 1))
        best = np.full(len(pts), np.inf)
        owner = np.full(len(pts), -1)
        for obj in self.active_objects():
            sd = obj.footprint.signed_distance(pts[:, :2])
            closer = sd < best
            best = np.where(closer, sd, best)
            owner = np.where(closer, obj.uid, owner)
        near = (best > 0) & (best <= self.desk.context_radius)
        for obj in self.active_objects():
            mask = near & (owner == obj.uid)
            if not mask.any():
                continue
            mixed = self.bank.table_dir \
                + self.desk.context_mix * self.bank.class_dirs[obj.class_id]
            dirs[mask] = (mixed / np.linalg.norm(mixed)).astype(np.float32)
        self._table_feature_cache[key] = dirs
        return dirs

    def _resolved_view(self, cam_idx: int):
        """Winning pixel assignment for the current removal state.

        Geometry never moves, so the z-buffer outcome per camera only
        changes when an object is removed; features alone get fresh
        noise every render.
        """
        key = (cam_idx, tuple(sorted(self.removed)))
        cached = self._resolve_cache.get(key)
        if cached is not None:
            return cached
        table_dirs = self._table_features()
        px_parts, ell_parts, id_parts, dir_rows = [], [], [], []
        t_px, t_ell, t_idx = self._projected(-1, self._table_points(), cam_idx)
        px_parts.append(t_px)
        ell_parts.append(t_ell)
        id_parts.append(np.full(len(t_px), -1))
        dir_rows.append(table_dirs[t_idx])
        for obj in self.active_objects():
            o_px, o_ell, _ = self._projected(obj.uid, self._surface(obj),
                                             cam_idx)
            px_parts.append(o_px)
            ell_parts.append(o_ell)
            id_parts.append(np.full(len(o_px), obj.uid))
            dir_rows.append(np.tile(
                self.bank.class_dirs[obj.class_id].astype(np.float32),
                (len(o_px), 1)))
        px = np.concatenate(px_parts)
        ell = np.concatenate(ell_parts)
        ids = np.concatenate(id_parts)
        dirs = np.concatenate(dir_rows)
        order = np.lexsort((ell, px))
        keep = np.ones(len(order), dtype=bool)
        keep[1:] = px[order[1:]] != px[order[:-1]]
        sel = order[keep]
        resolved = (px[sel], ell[sel], ids[sel],
                    np.ascontiguousarray(dirs[sel]))
        self._resolve_cache[key] = resolved
        return resolved

    def render_views(self, step: int) -> tuple[list[ViewInputs], np.ndarray]:
        """Z-buffer views plus the front view's per-pixel object ids."""
        rng = stable_rng("render", self.scene.kind, self.scene.seed,
                         self.scene.split, step, len(self.removed))
        width, height = self.desk.image_width, self.desk.image_height
        dim = self.desk.feature_dim
        views = []
        front_ids = None
        for cam_idx, cam in enumerate(self.cameras):
            px_sel, ell_sel, ids_sel, dirs_sel = self._resolved_view(cam_idx)
            depth = np.zeros(width * height)
            depth[px_sel] = ell_sel
            feats = np.zeros((width * height, dim), dtype=np.float32)
            noisy = dirs_sel + self.desk.feature_noise * rng.standard_normal(
                size=dirs_sel.shape, dtype=np.float32)
            noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
            feats[px_sel] = noisy
            views.append(ViewInputs(camera=cam,
                                    depth=depth.reshape(height, width),
                                    features=feats.reshape(height, width, dim)))
            if cam_idx == 0:
                id_img = np.full(width * height, -1, dtype=np.int64)
                id_img[px_sel] = ids_sel
                front_ids = id_img.reshape(height, width)
        return views, front_ids

    # ---- perception ----

    def regions(self, front_ids: np.ndarray) -> list[ObjectRegion]:
        by_uid = {o.uid: o for o in self.phase_objects()}
        out = []
        for uid, bbox in region_proposals(front_ids, min_size=5):
            obj = by_uid.get(uid)
            if obj is None:
                continue
            out.append(ObjectRegion(object_id=uid, footprint=obj.footprint,
                                    top_z=obj.top_z(self.desk.table_height),
                                    bbox_px=bbox))
        return out

    def _front_ids(self) -> np.ndarray:
        px_sel, _, ids_sel, _ = self._resolved_view(0)
        id_img = np.full(self.desk.image_width * self.desk.image_height, -1,
                         dtype=np.int64)
        id_img[px_sel] = ids_sel
        return id_img.reshape(self.desk.image_height, self.desk.image_width)

    def observe(self, step: int, run_key: int = 0,
                place_jitter: bool = False) -> "Observation":
        instruction = self.instruction()
        cache_key = None
        views: list[ViewInputs] = []
        sampled = None
        if self.cloud_cache is not None:
            cache_key = (self.scene.kind, self.scene.seed, self.scene.split,
                         self.phase, step, tuple(sorted(self.removed)))
            sampled = self.cloud_cache.get(cache_key)
        if sampled is not None:
            front_ids = self._front_ids()
        else:
            views, front_ids = self.render_views(step)
            clouds = build_clouds(views, self.desk.workspace_bounds(),
                                  lang=instruction.embedding,
                                  mode="pick" if self.phase == "pick" else "place",
                                  config=self.fusion)
            sampled = prioritized_sample(clouds, self.desk.n_sample)
            if cache_key is not None:
                self.cloud_cache[cache_key] = sampled
        regions = self.regions(front_ids)
        # the prior generator is deterministic given scene geometry, so
        # candidates only change when the object set does (or per run)
        rng = stable_rng("candidates", self.scene.kind, self.scene.seed,
                         self.scene.split, run_key, len(self.removed))
        if self.phase == "pick":
            candidates = synth_grasps(regions, self.desk.table_height,
                                      self.desk.workspace_xy(), rng)
        else:
            candidates = sample_places(regions, self.desk.table_height,
                                       self.desk.workspace_xy(), rng)
            if place_jitter and not candidates.empty:
                jitter = rng.normal(scale=self.desk.place_jitter,
                                    size=(len(candidates), 2))
                for action, dxy in zip(candidates.actions, jitter):
                    action.position[:2] += dxy
                candidates = CandidateSet.from_actions(
                    "place", candidates.actions, flags=candidates.flags)
        return Observation(views=views, front_ids=front_ids, regions=regions,
                           sampled=sampled, candidates=candidates,
                           instruction=instruction)

    # ---- physics rules ----

    def grasp_source(self, grasp: GraspAction) -> SceneObject | None:
        """The object actually under the gripper: deepest containment, 5 mm slack.

        Physics never trusts ``source_id`` (decoded candidates lack it);
        the grabbed object is inferred from position alone.
        """
        xy = np.asarray(grasp.position[:2])[None, :]
        best = None
        best_sd = 0.005
        for obj in self.active_objects():
            sd = float(obj.footprint.signed_distance(xy)[0])
            if sd < best_sd:
                best = obj
                best_sd = sd
        return best

    def grasp_feasible(self, grasp: GraspAction) -> bool:
        """Footprint containment, a sane grasp height, and a clear corridor.

        A grasp hovering above the object (or digging into the table) is
        a free-space grasp: the jaws close on nothing.
        """
        source = self.grasp_source(grasp)
        if source is None:
            return False
        z = float(grasp.position[2])
        if not (self.desk.table_height + 0.002 <= z
                <= source.top_z(self.desk.table_height) + 0.005):
            return False
        xy = np.asarray(grasp.position[:2])
        closing = np.asarray(grasp.rotation[:2, 0], dtype=np.float64)
        norm = np.linalg.norm(closing)
        if norm < 1e-9:
            return False
        closing = closing / norm
        half_u = (grasp.width + 0.010) / 2.0
        half_v = 0.040 / 2.0
        for other in self.active_objects():
            if other.uid == source.uid:
                continue
            if footprint_intersects_rect(other.footprint, xy, closing,
                                         half_u, half_v):
                return False
        return True

    def place_valid(self, position: np.ndarray) -> bool:
        instruction = self.instruction()
        ref = self.scene.object_by_id(self.scene.ref_id)
        xy = np.asarray(position[:2])
        if instruction.relation == "on":
            return bool(ref.footprint.contains(xy[None, :])[0])
        sd = float(ref.footprint.signed_distance(xy[None, :])[0])
        if not 0.0 < sd <= PlaceConfig().annulus_width:
            return False
        for obj in self.active_objects():
            if obj.footprint.contains(xy[None, :])[0]:
                return False
        return True

    # ---- transitions ----

    def step_pick(self, grasp: GraspAction) -> "StepOutcome":
        feasible = self.grasp_feasible(grasp)
        removed_id = None
        if feasible:
            removed_id = self.grasp_source(grasp).uid
            self.removed.add(removed_id)
            if removed_id == self.scene.target_id:
                self.target_grasped = True
                if self.scene.kind == "pick-place":
                    self.phase = "place"
        return StepOutcome(kind="pick", action=grasp,
                           reward=1 if feasible else 0,
                           removed_id=removed_id,
                           on_target=removed_id == self.scene.target_id)

    def step_place(self, place: PlaceAction) -> "StepOutcome":
        valid = self.place_valid(place.position)
        return StepOutcome(kind="place", action=place,
                           reward=1 if valid else 0,
                           placed_position=np.asarray(place.position).copy(),
                           on_target=valid)


@dataclass
class Observation:
    views: list[ViewInputs]
    front_ids: np.ndarray
    regions: list[ObjectRegion]
    sampled: SampledClouds
    candidates: CandidateSet
    instruction: InstructionSpec


@dataclass
class StepOutcome:
    kind: str
    action: GraspAction | PlaceAction
    reward: int
    removed_id: int | None = None
    placed_position: np.ndarray | None = None
    on_target: bool = False


@dataclass
class DemoStep:
    """One recorded expert step: observation data plus the executed action."""

    kind: str
    encoded: np.ndarray
    points: np.ndarray
    features: np.ndarray
    similarities: np.ndarray
    action_row: np.ndarray
    instruction_text: str
    instruction_embedding: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)


@dataclass
class EpisodeLog:
    kind: str
    seed: int
    split: str
    instruction_text: str
    outcomes: list[StepOutcome] = field(default_factory=list)
    success: bool = False
    stuck: bool = False
    steps: int = 0
    demo_steps: list[DemoStep] = field(default_factory=list)


# ------------------------------------------------------------------ experts

def expert_pick(world: SimWorld, candidates: CandidateSet) -> int:
    """Feasible candidate nearest the target centroid; target grasps first.

    Ties break to the lower index.  No feasible candidate means the
    expert is stuck.
    """
    if candidates.empty:
        raise ExpertStuck("no pick candidates")
    target = world.scene.object_by_id(world.scene.target_id)
    center = np.asarray(target.footprint.center)
    # scan in preference order so feasibility (the expensive test) stops
    # at the first hit; ties stay with the lower index
    positions = np.array([a.position[:2] for a in candidates.actions])
    dists = np.linalg.norm(positions - center[None, :], axis=1)
    prefs = np.array([0 if a.source_id == world.scene.target_id else 1
                      for a in candidates.actions])
    order = np.lexsort((np.arange(len(dists)), dists, prefs))
    for idx in order:
        if world.grasp_feasible(candidates.actions[idx]):
            return int(idx)
    raise ExpertStuck("no feasible pick candidate")


def expert_place(world: SimWorld, candidates: CandidateSet,
                 rng: np.random.Generator) -> int:
    """Seeded-uniform choice among candidates the relation test accepts."""
    if candidates.empty:
        raise ExpertStuck("no place candidates")
    valid = [i for i, action in enumerate(candidates.actions)
             if world.place_valid(action.position)]
    if not valid:
        raise ExpertStuck("no valid place candidate")
    return valid[int(rng.integers(len(valid)))]


def make_expert(run_key: int = 0) -> Callable:
    def choose(world: SimWorld, obs: Observation, step: int) -> int:
        if world.phase == "pick":
            return expert_pick(world, obs.candidates)
        rng = stable_rng("expert-place", world.scene.kind, world.scene.seed,
                         world.scene.split, run_key, step)
        return expert_place(world, obs.candidates, rng)
    return choose


# ------------------------------------------------------------------ rollout

def _record_demo(world: SimWorld, obs: Observation, idx: int,
                 phase: str) -> DemoStep:
    return DemoStep(
        kind=phase,
        encoded=obs.candidates.encoded.copy(),
        points=obs.sampled.points.copy(),
        features=obs.sampled.features.copy(),
        similarities=obs.sampled.similarities.copy(),
        action_row=obs.candidates.encoded[idx].copy(),
        instruction_text=obs.instruction.text,
        instruction_embedding=obs.instruction.embedding.copy(),
        meta={"seed": str(world.scene.seed), "split": world.scene.split,
              "scene_kind": world.scene.kind})


def rollout(world: SimWorld, choose: Callable, run_key: int = 0,
            collect: bool = False, place_jitter: bool = False,
            max_steps: int | None = None) -> EpisodeLog:
    """Closed-loop episode: observe, choose a candidate, apply the rule.

    Pick phases run until the target is grasped or the step cap; a place
    phase is a single attempt.  Combo scenes chain the two and succeed
    only when both parts do.
    """
    scene = world.scene
    log = EpisodeLog(kind=scene.kind, seed=scene.seed, split=scene.split,
                     instruction_text=(scene.pick_instruction
                                       or scene.place_instruction).text)
    cap = max_steps if max_steps is not None else world.desk.max_steps
    step = 0
    pick_steps = 0
    try:
        while True:
            if world.phase == "pick" and pick_steps >= cap:
                break
            obs = world.observe(step, run_key=run_key,
                                place_jitter=place_jitter)
            phase = world.phase
            if obs.candidates.empty:
                step += 1
                if phase == "pick":
                    pick_steps += 1
                    continue
                break
            idx = choose(world, obs, step)
            action = obs.candidates.actions[idx]
            if phase == "pick":
                outcome = world.step_pick(action)
                pick_steps += 1
            else:
                outcome = world.step_place(action)
            log.outcomes.append(outcome)
            if collect and outcome.reward == 1:
                log.demo_steps.append(_record_demo(world, obs, idx, phase))
            step += 1
            if phase == "place":
                log.success = outcome.reward == 1
                break
            if world.target_grasped and scene.kind == "pick":
                log.success = True
                break
    except ExpertStuck:
        log.stuck = True
    log.steps = step
    if scene.kind == "pick-place" and not log.stuck:
        picked = world.target_grasped
        placed = log.outcomes and log.outcomes[-1].kind == "place" \
            and log.outcomes[-1].reward == 1
        log.success = bool(picked and placed)
    if log.stuck or not log.success:
        log.demo_steps = []
    return log


def demo_yield(logs: Sequence[EpisodeLog]) -> tuple[int, int, int]:
    """(episodes, successes, demo steps) over a batch of expert logs."""
    successes = sum(1 for log in logs if log.success)
    steps = sum(len(log.demo_steps) for log in logs)
    return len(logs), successes, steps
