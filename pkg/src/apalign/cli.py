"""Experiment driver: demo collection, training, adaptation, evaluation.

Subcommands: gen-data, train, adapt, eval, fuse, rank, ablate.  Settings
come from a flat key=value config file plus ``--set key=value``
overrides; every run is fully seeded, so reports regenerate
bit-for-bit.  Exit codes: 0 success, 2 invalid input, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .align import (
    AlignConfig,
    desk_config,
    forward,
    init_params,
    load_policy,
    save_policy,
    select_action,
)
from .cloudfuse import SampledClouds
from .common import NumericError, ValidationError
from .interchange import SceneBundle
from .sim import (
    DeskConfig,
    EmbeddingBank,
    SimWorld,
    rollout,
    make_expert,
    spawn_scene,
)
from .train import (
    ScoreSample,
    TrainConfig,
    adapt_policy,
    build_score_dataset,
    train_policy,
)

# held-out arrangements per (kind, split): ten seen pick cases, five
# unseen, and so on down the benchmark table
EVAL_CASES = {
    ("pick", "seen"): 10, ("pick", "unseen"): 5,
    ("place", "seen"): 20, ("place", "unseen"): 10,
    ("pick-place", "seen"): 8, ("pick-place", "unseen"): 4,
}

NO_STEPS = "--"   # planning-steps cell for a case with zero successes


@dataclass
class ExperimentConfig:
    """Flat experiment settings shared by every subcommand.

    Defaults describe the full-scale protocol (5,000 expert episodes
    per task, 15 evaluation runs per case); the desk-scale ablation
    suite overrides the episode counts through the ``suite_*`` fields.
    """

    out_dir: str = "runs"
    data_dir: str = ""              # empty: <out_dir>/data
    tasks: str = "pick,place,pick-place"
    episodes: int = 5000            # expert episodes per task (gen-data)
    seed: int = 0                   # first episode seed
    split: str = "seen"
    epochs: int = 48
    lr: float = 2e-3
    lr_min: float = 1e-4
    schedule: str = "cosine"
    micro_batch: int = 8
    train_dtype: str = "float32"    # training compute dtype ("float64" to widen)
    train_seed: int = 0
    adapt_samples: int = 100
    adapt_epochs: int = 60
    adapt_seed: int = 20000
    runs_per_case: int = 15         # runs per evaluation case
    eval_seed: int = 5000           # first case seed
    eval_case_cap: int = 0          # 0: benchmark case counts; else cap them
    eval_kinds: str = "pick,place,pick-place"
    eval_splits: str = "seen,unseen"
    suite_pick_episodes: int = 800
    suite_place_episodes: int = 500
    suite_combo_episodes: int = 250
    suite_seeds: str = "0,1,2"

    def __post_init__(self) -> None:
        if self.runs_per_case < 1:
            raise ValidationError("runs_per_case", "need at least one run per case")
        splits = self.split_list("eval_splits")
        if len(splits) != len(set(splits)):
            raise ValidationError("eval_splits", "splits must be distinct")
        for split in splits:
            if split not in ("seen", "unseen"):
                raise ValidationError("eval_splits", f"unknown split {split!r}")
        kinds = self.split_list("eval_kinds")
        if len(kinds) != len(set(kinds)):
            raise ValidationError("eval_kinds", "kinds must be distinct")
        for kind in kinds + self.split_list("tasks"):
            if kind not in ("pick", "place", "pick-place"):
                raise ValidationError("tasks", f"unknown task kind {kind!r}")

    def split_list(self, name: str) -> list[str]:
        raw = getattr(self, name)
        return [part.strip() for part in raw.split(",") if part.strip()]

    def seed_list(self) -> list[int]:
        try:
            return [int(part) for part in self.split_list("suite_seeds")]
        except ValueError as err:
            raise ValidationError("suite_seeds", str(err)) from None

    def resolved_data_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.out_dir) / "data"

    def train_config(self, **overrides) -> TrainConfig:
        base = dict(epochs=self.epochs, lr=self.lr, lr_min=self.lr_min,
                    schedule=self.schedule, micro_batch=self.micro_batch,
                    dtype=self.train_dtype, seed=self.train_seed)
        base.update(overrides)
        return TrainConfig(**base)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read a flat key=value file; blank lines and #-comments skipped."""
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError("config", f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def build_config(path: str | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Config file plus command-line overrides, coerced to field types."""
    raw: dict[str, str] = {}
    if path:
        raw.update(parse_config_file(path))
    for item in overrides:
        if "=" not in item:
            raise ValidationError("override", f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()

    types = {f.name: f.type for f in fields(ExperimentConfig)}
    coerced: dict = {}
    for key, value in raw.items():
        if key not in types:
            raise ValidationError("config", f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind == "int":
                coerced[key] = int(value)
            elif kind == "float":
                coerced[key] = float(value)
            else:
                coerced[key] = value
        except ValueError as err:
            raise ValidationError("config", f"{key}: {err}") from None
    return ExperimentConfig(**coerced)


# --------------------------------------------------------------- baseline

def grounding_baseline(sampled: SampledClouds, candidates) -> int:
    """Similarity-density grounding: nearest candidate to the hottest region.

    For each sampled point, average the similarity of its K nearest
    neighbours (K = 5% of the cloud, at least one); the candidate whose
    position lies closest to the argmax point wins.  All ties resolve
    to the lowest index, so equal similarities pick the candidate
    nearest point 0's neighbourhood.
    """
    encoded = np.asarray(getattr(candidates, "encoded", candidates), dtype=np.float64)
    points = np.asarray(sampled.points, dtype=np.float64)
    sims = np.asarray(sampled.similarities, dtype=np.float64)
    n = points.shape[0]
    if n < 1 or encoded.shape[0] < 1:
        raise ValidationError("grounding", "need a non-empty cloud and candidates")
    k = max(1, round(0.05 * n))
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    near = np.argsort(d2, axis=1, kind="stable")[:, :k]
    density = sims[near].mean(axis=1)
    peak = points[int(np.argmax(density))]
    dist = np.linalg.norm(encoded[:, :3] - peak, axis=1)
    return int(np.argmin(dist))


# --------------------------------------------------------------- choosers

def policy_chooser(params: dict, config: AlignConfig,
                   adapted: bool = False) -> Callable:
    def choose(world, obs, step):
        dist, _ = forward(params, config, obs.candidates.encoded, obs.sampled,
                          adapted=adapted)
        return select_action(dist)
    return choose


def grounding_chooser(world, obs, step) -> int:
    return grounding_baseline(obs.sampled, obs.candidates)


# -------------------------------------------------------------- evaluation

@dataclass
class CaseResult:
    case_id: str
    kind: str
    split: str
    seed: int
    successes: int
    runs: int
    step_total: int     # summed steps over successful runs only

    @property
    def success_rate(self) -> float:
        return 100.0 * self.successes / self.runs

    @property
    def planning_steps(self) -> str:
        if self.successes == 0:
            return NO_STEPS
        return f"{self.step_total / self.successes:.2f}"


@dataclass
class MetricsReport:
    """Per-case rows plus pooled per-(kind, split) aggregates."""

    rows: list[CaseResult]

    def aggregate(self, kind: str, split: str) -> tuple[float, str]:
        rows = [r for r in self.rows if r.kind == kind and r.split == split]
        runs = sum(r.runs for r in rows)
        succ = sum(r.successes for r in rows)
        if runs == 0:
            raise ValidationError("report", f"no rows for {kind}/{split}")
        steps = sum(r.step_total for r in rows)
        rate = 100.0 * succ / runs
        mean = NO_STEPS if succ == 0 else f"{steps / succ:.2f}"
        return rate, mean

    def to_csv(self) -> str:
        lines = ["case_id,kind,split,success_rate,planning_steps,seed"]
        for r in self.rows:
            lines.append(f"{r.case_id},{r.kind},{r.split},"
                         f"{r.success_rate:.1f},{r.planning_steps},{r.seed}")
        return "\n".join(lines) + "\n"

    def render(self) -> str:
        pairs = sorted({(r.kind, r.split) for r in self.rows})
        lines = [f"{'kind':<12}{'split':<9}{'success':>9}{'steps':>8}"]
        for kind, split in pairs:
            rate, steps = self.aggregate(kind, split)
            lines.append(f"{kind:<12}{split:<9}{rate:>8.1f}%{steps:>8}")
        return "\n".join(lines)


def evaluate_cases(choose: Callable, kind: str, split: str, cases: int,
                   runs: int, bank: EmbeddingBank, desk: DeskConfig,
                   eval_seed: int, cloud_cache: dict | None = None,
                   ) -> list[CaseResult]:
    """Closed-loop success over fixed arrangements with per-case seeds.

    Each case is an independent scene evaluated ``runs`` times under
    distinct run keys; place-phase candidates get the standard 3 mm
    evaluation jitter.  Cases share ``cloud_cache`` when given (safe:
    rendering depends only on scene state, never the run key).
    """
    jitter = kind != "pick"
    results = []
    for idx in range(cases):
        seed = eval_seed + idx
        scene = spawn_scene(kind, seed, bank, split=split, desk=desk)
        world = SimWorld(scene, bank, desk=desk, cloud_cache=cloud_cache)
        successes = 0
        step_total = 0
        for run_key in range(runs):
            world.reset()
            log = rollout(world, choose, run_key=run_key, place_jitter=jitter)
            if log.success:
                successes += 1
                step_total += log.steps
        results.append(CaseResult(case_id=f"{kind}-{split}-{idx:02d}",
                                  kind=kind, split=split, seed=seed,
                                  successes=successes, runs=runs,
                                  step_total=step_total))
    return results


# ------------------------------------------------------------- generation

def generate_task_demos(kind: str, episodes: int, seed0: int, split: str,
                        bank: EmbeddingBank, desk: DeskConfig,
                        ) -> tuple[list, dict[str, int]]:
    """Expert rollouts for one task; stuck episodes are skipped, not fatal."""
    demos = []
    stats = {"episodes": episodes, "successes": 0, "stuck": 0, "demos": 0}
    for offset in range(episodes):
        scene = spawn_scene(kind, seed0 + offset, bank, split=split, desk=desk)
        world = SimWorld(scene, bank, desk=desk)
        log = rollout(world, make_expert(), collect=True)
        if log.stuck:
            stats["stuck"] += 1
            continue
        if log.success:
            stats["successes"] += 1
            demos.extend(log.demo_steps)
    stats["demos"] = len(demos)
    return demos, stats


def demos_to_samples(demos: Sequence) -> list[ScoreSample]:
    samples, rejected = build_score_dataset(demos)
    if rejected:
        raise ValidationError("demos",
                              f"{len(rejected)} demo steps match no candidate row")
    return samples


def load_dataset(data_dir: Path) -> list[ScoreSample]:
    """Read every .apa2 bundle under ``data_dir`` in manifest order."""
    manifest = data_dir / "manifest.csv"
    if manifest.exists():
        names = [line.split(",")[0] for line
                 in manifest.read_text(encoding="utf-8").splitlines()[1:] if line]
    else:
        names = sorted(p.name for p in data_dir.glob("*.apa2"))
    if not names:
        raise ValidationError("data", f"no bundles under {data_dir}")
    return [ScoreSample.from_bundle(SceneBundle.load(data_dir / name))
            for name in names]


def relation_samples(count: int, seed0: int, split: str, bank: EmbeddingBank,
                     desk: DeskConfig) -> list[ScoreSample]:
    """Multi-labeled place scenes: every relation-valid candidate marked 1.

    Scenes whose candidate set has no valid entry are skipped (the seed
    walk continues), so the returned samples always carry signal.
    """
    out: list[ScoreSample] = []
    seed = seed0
    while len(out) < count:
        scene = spawn_scene("place", seed, bank, split=split, desk=desk)
        world = SimWorld(scene, bank, desk=desk)
        obs = world.observe(0)
        seed += 1
        if obs.candidates.empty:
            continue
        labels = np.array([1 if world.place_valid(a.position) else 0
                           for a in obs.candidates.actions], dtype=np.uint8)
        if labels.sum() == 0:
            continue
        out.append(ScoreSample(
            kind="place", encoded=obs.candidates.encoded.copy(),
            points=obs.sampled.points.copy(),
            features=obs.sampled.features.copy(),
            similarities=obs.sampled.similarities.copy(),
            labels=labels, instruction_text=obs.instruction.text,
            instruction_embedding=obs.instruction.embedding.copy(),
            meta={"seed": str(scene.seed), "split": split,
                  "scene_kind": "place"}))
    return out


# ------------------------------------------------------------ subcommands

def cmd_gen_data(args) -> int:
    config = build_config(args.config, args.set)
    bank = EmbeddingBank()
    desk = DeskConfig()
    data_dir = config.resolved_data_dir()
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest = ["file,scene_kind,phase,seed,split"]
    for kind in config.split_list("tasks"):
        demos, stats = generate_task_demos(kind, config.episodes, config.seed,
                                           config.split, bank, desk)
        samples = demos_to_samples(demos)
        counters: dict[str, int] = {}
        for sample in samples:
            seed = sample.meta["seed"]
            index = counters.get(seed, 0)
            counters[seed] = index + 1
            name = f"{kind}-{seed}-{index:02d}.apa2"
            sample.to_bundle().save(data_dir / name)
            manifest.append(f"{name},{kind},{sample.kind},{seed},{config.split}")
        yield_ratio = stats["demos"] / max(stats["episodes"], 1)
        print(f"{kind}: {stats['episodes']} episodes -> {stats['successes']} "
              f"successes, {stats['stuck']} expert-stuck skipped, "
              f"{stats['demos']} demos ({yield_ratio:.2f} per episode)")
    (data_dir / "manifest.csv").write_text("\n".join(manifest) + "\n",
                                           encoding="utf-8")
    print(f"dataset written to {data_dir}")
    return 0


def cmd_train(args) -> int:
    config = build_config(args.config, args.set)
    samples = load_dataset(config.resolved_data_dir())
    pick_count = sum(1 for s in samples if s.kind == "pick")
    place_count = len(samples) - pick_count
    if args.pick_only and args.place_only:
        raise ValidationError("train", "--pick-only and --place-only conflict")
    if args.pick_only:
        samples = [s for s in samples if s.kind == "pick"]
    elif args.place_only:
        samples = [s for s in samples if s.kind == "place"]
    if not samples:
        raise ValidationError("train", "dataset is empty after filtering")
    print(f"dataset: {pick_count} pick / {place_count} place samples, "
          f"training on {len(samples)}")

    align = desk_config(use_rope=not args.no_rope, attn_scale=args.attn_scale)
    t0 = time.perf_counter()
    params, curve = train_policy(init_params(align, seed=config.train_seed),
                                 align, samples, config.train_config())
    elapsed = time.perf_counter() - t0
    meta = {
        "adapted": "none",
        "samples": str(len(samples)),
        "pick_samples": str(sum(1 for s in samples if s.kind == "pick")),
        "place_samples": str(sum(1 for s in samples if s.kind == "place")),
        "epochs": str(config.epochs),
        "seed": str(config.train_seed),
        "rope": "off" if args.no_rope else "on",
        "attn_scale": args.attn_scale,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_policy(out, params, align, training_meta=meta, loss_curve=curve)
    print(f"final loss {curve[-1]:.4f} after {config.epochs} epochs "
          f"({elapsed:.1f}s); snapshot -> {out}")
    return 0


def cmd_adapt(args) -> int:
    config = build_config(args.config, args.set)
    params, align, _ = load_policy(args.snapshot)
    bank = EmbeddingBank()
    desk = DeskConfig()
    samples = relation_samples(config.adapt_samples, config.adapt_seed,
                               config.split, bank, desk)
    train_cfg = config.train_config(epochs=config.adapt_epochs)
    t0 = time.perf_counter()
    adapted, curve = adapt_policy(params, align, samples, train_cfg,
                                  full_finetune=args.full_finetune)
    elapsed = time.perf_counter() - t0
    base_mass, new_mass = valid_mass_shift(params, adapted, align, samples)
    mode = "full" if args.full_finetune else "residual"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"adapted": mode, "adapt_samples": str(len(samples)),
            "adapt_epochs": str(config.adapt_epochs)}
    save_policy(out, adapted, align, training_meta=meta, loss_curve=curve)
    print(f"{mode} adaptation on {len(samples)} place samples took "
          f"{elapsed:.1f}s; valid-candidate mass {base_mass:.3f} -> {new_mass:.3f}; "
          f"snapshot -> {out}")
    return 0


def valid_mass_shift(base_params: dict, adapted_params: dict,
                     align: AlignConfig, samples: Sequence[ScoreSample],
                     ) -> tuple[float, float]:
    """Mean score fraction on valid candidates, before vs after adaptation.

    The blended scores are renormalized per scene so the two numbers are
    comparable fractions of the total mass; inflating every candidate's
    residual equally would leave the fraction unchanged.
    """
    before = []
    after = []
    for sample in samples:
        mask = np.asarray(sample.labels, dtype=bool)
        dist, _ = forward(base_params, align, sample.encoded, sample.sampled())
        before.append(float(dist.omegas[mask].sum() / dist.omegas.sum()))
        dist, _ = forward(adapted_params, align, sample.encoded,
                          sample.sampled(), adapted=True)
        after.append(float(dist.omega_prime[mask].sum() / dist.omega_prime.sum()))
    return float(np.mean(before)), float(np.mean(after))


def cmd_eval(args) -> int:
    config = build_config(args.config, args.set)
    bank = EmbeddingBank()
    desk = DeskConfig()
    if args.grounding:
        choose = grounding_chooser
        label = "grounding baseline"
    else:
        if not args.snapshot:
            raise ValidationError("eval", "need --snapshot or --grounding")
        params, align, snapshot = load_policy(args.snapshot)
        adapted = snapshot.training_meta.get("adapted", "none") != "none"
        choose = policy_chooser(params, align, adapted=adapted)
        label = f"policy {args.snapshot}"
    rows: list[CaseResult] = []
    cache: dict = {}
    for split in config.split_list("eval_splits"):
        for kind in config.split_list("eval_kinds"):
            cases = EVAL_CASES[(kind, split)]
            if config.eval_case_cap > 0:
                cases = min(cases, config.eval_case_cap)
            rows.extend(evaluate_cases(choose, kind, split, cases,
                                       config.runs_per_case, bank, desk,
                                       config.eval_seed, cloud_cache=cache))
    report = MetricsReport(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv(), encoding="utf-8")
    print(f"evaluated {label}")
    print(report.render())
    print(f"per-case rows -> {out}")
    return 0


def cmd_fuse(args) -> int:
    config = build_config(args.config, args.set)
    bank = EmbeddingBank()
    desk = DeskConfig()
    scene = spawn_scene(args.kind, args.seed, bank, split=config.split,
                        desk=desk)
    world = SimWorld(scene, bank, desk=desk)
    obs = world.observe(0)
    bundle = SceneBundle(
        points=obs.sampled.points.astype(np.float32),
        features=obs.sampled.features.astype(np.float32),
        similarities=np.clip(obs.sampled.similarities, -1, 1).astype(np.float32),
        candidates=obs.candidates.encoded.astype(np.float32),
        candidate_kind=world.phase,
        instruction_text=obs.instruction.text,
        instruction_embedding=obs.instruction.embedding.astype(np.float32),
        meta={"seed": str(args.seed), "split": config.split,
              "scene_kind": args.kind})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bundle.save(out)
    sims = obs.sampled.similarities
    print(f"fused {args.kind} scene seed {args.seed}: "
          f"{obs.sampled.points.shape[0]} points, "
          f"{obs.candidates.encoded.shape[0]} candidates, "
          f"similarity range [{sims.min():.3f}, {sims.max():.3f}] -> {out}")
    return 0


def cmd_rank(args) -> int:
    bundle = SceneBundle.load(args.bundle)
    params, align, snapshot = load_policy(args.snapshot)
    encoded = np.asarray(bundle.candidates, dtype=np.float64)
    sampled = SampledClouds(
        points=np.asarray(bundle.points, dtype=np.float64),
        features=np.asarray(bundle.features, dtype=np.float64),
        similarities=np.asarray(bundle.similarities, dtype=np.float64),
        indices=np.arange(bundle.points.shape[0]))
    adapted = snapshot.training_meta.get("adapted", "none") != "none"
    dist, _ = forward(params, align, encoded, sampled, adapted=adapted)
    total = float(dist.omegas.sum())
    if abs(total - 1.0) > 1e-6:
        raise NumericError("rank", f"score mass {total} deviates from 1")
    scores = dist.omega_prime if adapted else dist.omegas
    order = np.argsort(-scores, kind="stable")
    print(f"{bundle.candidate_kind} candidates, score mass {total:.9f}")
    header = f"{'rank':<6}{'index':<7}{'score':<12}{'blended':<12}position"
    print(header)
    for rank, idx in enumerate(order, start=1):
        pos = encoded[idx, :3]
        blended = f"{dist.omega_prime[idx]:.6f}" if adapted else NO_STEPS
        print(f"{rank:<6}{idx:<7}{dist.omegas[idx]:<12.6f}{blended:<12}"
              f"({pos[0]:+.3f}, {pos[1]:+.3f}, {pos[2]:+.3f})")
    return 0


# ----------------------------------------------------------------- ablate

def _median(values: Sequence[float]) -> float:
    return float(statistics.median(values))


def ablation_suite(config: ExperimentConfig, progress: Callable[[str], None] = print,
                   ) -> dict:
    """Desk-scale trend suite: shared-vs-single-task, grounding baseline,
    rotary ablation, residual adaptation, and the unseen split.

    Demo data is generated once; each training seed in ``suite_seeds``
    retrains every arm on it.  Returns per-seed numbers and medians;
    the wall clock for the whole suite lands in ``elapsed_s``.
    """
    t_start = time.perf_counter()
    bank = EmbeddingBank()
    desk = DeskConfig()
    cache: dict = {}
    runs = config.runs_per_case
    # one case count across arms so every compared pair shares its scenes
    suite_cases = EVAL_CASES[("pick", "seen")]

    def eval_rate(choose, kind, split) -> float:
        rows = evaluate_cases(choose, kind, split, suite_cases, runs, bank,
                              desk, config.eval_seed, cloud_cache=cache)
        return MetricsReport(rows).aggregate(kind, split)[0]

    demo_sets = {}
    demo_counts = {}
    for kind, episodes in (("pick", config.suite_pick_episodes),
                           ("place", config.suite_place_episodes),
                           ("pick-place", config.suite_combo_episodes)):
        demos, stats = generate_task_demos(kind, episodes, config.seed,
                                           "seen", bank, desk)
        demo_sets[kind] = demos_to_samples(demos)
        demo_counts[kind] = stats["demos"]
        progress(f"[data] {kind}: {episodes} episodes -> {stats['demos']} demos "
                 f"({stats['stuck']} stuck)")
    shared_set = demo_sets["pick"] + demo_sets["place"] + demo_sets["pick-place"]
    pick_set = [s for s in shared_set if s.kind == "pick"]
    place_set = [s for s in shared_set if s.kind == "place"]
    demo_counts["total"] = len(shared_set)
    progress(f"[data] shared dataset: {len(pick_set)} pick + "
             f"{len(place_set)} place samples")

    knn_pick = eval_rate(grounding_chooser, "pick", "seen")
    progress(f"[baseline] grounding pick seen: {knn_pick:.1f}%")

    adapt_set = relation_samples(config.adapt_samples, config.adapt_seed,
                                 "seen", bank, desk)

    align = desk_config()
    no_rope = desk_config(use_rope=False)
    per_seed: list[dict] = []
    for seed in config.seed_list():
        tc = config.train_config(seed=seed)
        numbers: dict = {"seed": seed}

        t0 = time.perf_counter()
        shared, _ = train_policy(init_params(align, seed=seed), align,
                                 shared_set, tc)
        numbers["shared_pick_seen"] = eval_rate(
            policy_chooser(shared, align), "pick", "seen")
        numbers["shared_place_seen"] = eval_rate(
            policy_chooser(shared, align), "place", "seen")
        numbers["shared_pick_unseen"] = eval_rate(
            policy_chooser(shared, align), "pick", "unseen")
        numbers["shared_place_unseen"] = eval_rate(
            policy_chooser(shared, align), "place", "unseen")

        pick_only, _ = train_policy(init_params(align, seed=seed), align,
                                    pick_set, tc)
        numbers["pick_only_pick_seen"] = eval_rate(
            policy_chooser(pick_only, align), "pick", "seen")

        place_only, _ = train_policy(init_params(align, seed=seed), align,
                                     place_set, tc)
        numbers["place_only_place_seen"] = eval_rate(
            policy_chooser(place_only, align), "place", "seen")

        bare, _ = train_policy(init_params(no_rope, seed=seed), no_rope,
                               shared_set, tc)
        numbers["no_rope_pick_seen"] = eval_rate(
            policy_chooser(bare, no_rope), "pick", "seen")

        adapt_tc = config.train_config(seed=seed, epochs=config.adapt_epochs)
        residual, _ = adapt_policy(shared, align, adapt_set, adapt_tc)
        mass_before, mass_after = valid_mass_shift(shared, residual, align,
                                                   adapt_set)
        numbers["valid_mass_before"] = mass_before
        numbers["valid_mass_after"] = mass_after
        numbers["residual_place_seen"] = eval_rate(
            policy_chooser(residual, align, adapted=True), "place", "seen")
        finetuned, _ = adapt_policy(shared, align, adapt_set, adapt_tc,
                                    full_finetune=True)
        numbers["finetune_place_seen"] = eval_rate(
            policy_chooser(finetuned, align, adapted=True), "place", "seen")

        numbers["wall_s"] = time.perf_counter() - t0
        per_seed.append(numbers)
        progress(f"[seed {seed}] shared pick {numbers['shared_pick_seen']:.1f}% "
                 f"place {numbers['shared_place_seen']:.1f}% | pick-only "
                 f"{numbers['pick_only_pick_seen']:.1f}% place-only "
                 f"{numbers['place_only_place_seen']:.1f}% | no-rope "
                 f"{numbers['no_rope_pick_seen']:.1f}% | adapt "
                 f"{numbers['residual_place_seen']:.1f}%/"
                 f"{numbers['finetune_place_seen']:.1f}% "
                 f"({numbers['wall_s']:.0f}s)")

    metrics = [key for key in per_seed[0] if key != "seed"]
    median = {key: _median([n[key] for n in per_seed]) for key in metrics}
    return {
        "demo_counts": demo_counts,
        "grounding_pick_seen": knn_pick,
        "per_seed": per_seed,
        "median": median,
        "elapsed_s": time.perf_counter() - t_start,
    }


def ablation_csv(result: dict) -> str:
    seeds = [n["seed"] for n in result["per_seed"]]
    header = "metric," + ",".join(f"seed{s}" for s in seeds) + ",median"
    lines = [header]
    for key, med in result["median"].items():
        cells = ",".join(f"{n[key]:.2f}" for n in result["per_seed"])
        lines.append(f"{key},{cells},{med:.2f}")
    lines.append(f"grounding_pick_seen,"
                 + ",".join(f"{result['grounding_pick_seen']:.2f}" for _ in seeds)
                 + f",{result['grounding_pick_seen']:.2f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    config = build_config(args.config, args.set)
    result = ablation_suite(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(ablation_csv(result), encoding="utf-8")
    med = result["median"]
    print(f"{'metric':<28}{'median':>8}")
    for key, value in med.items():
        print(f"{key:<28}{value:>8.2f}")
    print(f"grounding pick seen: {result['grounding_pick_seen']:.1f}%")
    print(f"suite wall clock: {result['elapsed_s']:.0f}s; table -> {out}")
    return 0


# ------------------------------------------------------------------ entry

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apalign",
        description="Desk-scale action-prior alignment experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key=value file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry")

    g = sub.add_parser("gen-data", help="collect expert demos into .apa2 bundles")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="imitation-train a scoring policy")
    common(t)
    t.add_argument("--out", default="runs/policy.apa2")
    t.add_argument("--pick-only", action="store_true",
                   help="train on pick-phase samples only")
    t.add_argument("--place-only", action="store_true",
                   help="train on place-phase samples only")
    t.add_argument("--no-rope", action="store_true",
                   help="disable the rotary relative-position rotation")
    t.add_argument("--attn-scale", choices=("scaled", "paper"), default="scaled",
                   help="attention logit scaling variant")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="fit the residual decoder on place validity")
    common(a)
    a.add_argument("--snapshot", required=True, help="base policy snapshot")
    a.add_argument("--out", default="runs/adapted.apa2")
    a.add_argument("--full-finetune", action="store_true",
                   help="update every parameter instead of the residual head")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="closed-loop benchmark -> CSV report")
    common(e)
    e.add_argument("--snapshot", default=None, help="policy snapshot to evaluate")
    e.add_argument("--grounding", action="store_true",
                   help="evaluate the similarity-grounding baseline instead")
    e.add_argument("--out", default="runs/eval.csv")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="fuse one scene into an .apa2 bundle")
    common(f)
    f.add_argument("--kind", choices=("pick", "place", "pick-place"),
                   default="pick")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", default="runs/scene.apa2")
    f.set_defaults(func=cmd_fuse)

    r = sub.add_parser("rank", help="score a bundle's candidates with a snapshot")
    r.add_argument("bundle", help="path to an .apa2 scene bundle")
    r.add_argument("--snapshot", required=True, help="policy snapshot")
    r.set_defaults(func=cmd_rank)

    b = sub.add_parser("ablate", help="run the desk-scale trend suite")
    common(b)
    b.add_argument("--out", default="runs/ablation.csv")
    b.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
