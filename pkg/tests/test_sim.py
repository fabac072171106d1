"""Desk benchmark: embeddings, spawning, rendering, physics, experts."""

import math

import numpy as np
import pytest

from apalign.common import ExpertStuck, ValidationError
from apalign.priors import CandidateSet, Footprint, GraspAction, PlaceAction
from apalign.sim import (
    CLASS_COUNT,
    KEYWORD_FORMS,
    KEYWORD_TYPES,
    SEEN_CLASS_COUNT,
    DeskConfig,
    EmbeddingBank,
    Scene,
    SceneObject,
    SimWorld,
    class_spec,
    desk_cameras,
    expert_pick,
    expert_place,
    make_expert,
    rollout,
    sample_keyword_type,
    spawn_scene,
)

BANK = EmbeddingBank()
DESK = DeskConfig()


def top_down(closing_phi=0.0):
    x = np.array([math.cos(closing_phi), math.sin(closing_phi), 0.0])
    z = np.array([0.0, 0.0, -1.0])
    return np.stack([x, np.cross(z, x), z], axis=1)


def tiny_world(objects, kind="pick", target_id=0, ref_id=None,
               relation=None, desk=None):
    """A hand-built scene; instructions point at the target/ref class."""
    desk = desk or DESK
    pick = place = None
    if kind in ("pick", "pick-place"):
        target = next(o for o in objects if o.uid == target_id)
        from apalign.sim import make_instruction
        pick = make_instruction(BANK, np.random.default_rng(0), "pick",
                                target.class_id, 0)
    if kind in ("place", "pick-place"):
        ref = next(o for o in objects if o.uid == ref_id)
        from apalign.sim import make_instruction
        place = make_instruction(BANK, np.random.default_rng(0), "place",
                                 ref.class_id, 0, relation or "on")
    scene = Scene(kind=kind, seed=0, split="seen", objects=list(objects),
                  target_id=target_id if kind != "place" else None,
                  ref_id=ref_id, pick_instruction=pick,
                  place_instruction=place)
    return SimWorld(scene, BANK, desk=desk)


def disc_obj(uid, class_id, center, radius=0.03, height=0.06):
    return SceneObject(uid=uid, class_id=class_id,
                       footprint=Footprint("disc", center, radius=radius),
                       height=height)


# ------------------------------------------------------------- embeddings

def test_keyword_cosines_match_their_class():
    sims = BANK.keywords.reshape(-1, BANK.dim) @ BANK.class_dirs.T
    sims = sims.reshape(CLASS_COUNT, len(KEYWORD_TYPES), CLASS_COUNT)
    for class_id in range(CLASS_COUNT):
        np.testing.assert_allclose(sims[class_id, :, class_id], 0.8, atol=1e-9)
        others = np.delete(sims[class_id], class_id, axis=1)
        assert np.abs(others).max() <= 0.3


def test_class_directions_orthonormal():
    gram = BANK.class_dirs @ BANK.class_dirs.T
    np.testing.assert_allclose(gram, np.eye(CLASS_COUNT), atol=1e-9)
    assert abs(np.linalg.norm(BANK.table_dir) - 1.0) < 1e-9
    np.testing.assert_allclose(BANK.class_dirs @ BANK.table_dir, 0.0, atol=1e-9)


def test_around_instruction_leans_toward_table():
    on = BANK.instruction_embedding(3, 1, "on")
    around = BANK.instruction_embedding(3, 1, "around")
    assert abs(np.linalg.norm(around) - 1.0) < 1e-9
    assert float(around @ BANK.table_dir) > float(on @ BANK.table_dir) + 0.3
    # both still point at the same class
    assert int(np.argmax(BANK.class_dirs @ on)) == 3
    assert int(np.argmax(BANK.class_dirs @ around)) == 3


def test_bank_rejects_tight_dimensions():
    with pytest.raises(ValidationError):
        EmbeddingBank(dim=CLASS_COUNT)


def test_keyword_type_sampling_respects_holdout():
    rng = np.random.default_rng(0)
    class_id = 5
    held = class_id % len(KEYWORD_TYPES)
    draws = {sample_keyword_type(rng, class_id) for _ in range(200)}
    assert held not in draws
    assert draws == set(range(len(KEYWORD_TYPES))) - {held}
    assert sample_keyword_type(rng, class_id, heldout=True) == held


# ----------------------------------------------------------------- spawning

def test_class_spec_is_deterministic_with_sane_ranges():
    for class_id in range(CLASS_COUNT):
        a = class_spec(class_id)
        b = class_spec(class_id)
        assert a == b
        assert a.kind == ("disc" if class_id % 2 == 0 else "box")
        assert 0.026 <= a.radius <= 0.042
        assert 0.035 <= a.height <= 0.085


def test_spawn_counts_and_determinism():
    a = spawn_scene("pick", 11, BANK)
    b = spawn_scene("pick", 11, BANK)
    assert len(a.objects) == DESK.pick_objects
    assert a.target_id == 0
    for oa, ob in zip(a.objects, b.objects):
        assert oa.footprint.center == ob.footprint.center
        assert oa.class_id == ob.class_id
    assert a.pick_instruction.text == b.pick_instruction.text

    place = spawn_scene("place", 11, BANK)
    assert len(place.objects) == DESK.place_objects
    assert place.ref_id is not None
    combo = spawn_scene("pick-place", 11, BANK)
    assert len(combo.objects) == (DESK.combo_pick_objects
                                  + DESK.combo_place_objects)


def test_spawn_pick_scene_has_a_crowded_target():
    scene = spawn_scene("pick", 3, BANK)
    target = scene.object_by_id(scene.target_id)
    center = np.asarray(target.footprint.center)
    factors = []
    for obj in scene.objects:
        if obj.uid == scene.target_id:
            continue
        dist = float(np.linalg.norm(np.asarray(obj.footprint.center) - center))
        factors.append(dist / (target.footprint.bounding_radius()
                               + obj.footprint.bounding_radius()))
    # at least two obstacles hug the target inside the crowding ring
    assert sum(f <= 1.125 for f in factors) >= 2


def test_spawn_place_scene_keeps_objects_apart():
    scene = spawn_scene("place", 7, BANK)
    centers = [np.asarray(o.footprint.center) for o in scene.objects]
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            assert np.linalg.norm(centers[i] - centers[j]) >= DESK.place_spacing


def test_spawn_combo_splits_halves():
    scene = spawn_scene("pick-place", 5, BANK)
    pick_half = scene.objects[:DESK.combo_pick_objects]
    place_half = scene.objects[DESK.combo_pick_objects:]
    assert all(o.footprint.center[0] < 0 for o in pick_half)
    assert all(o.footprint.center[0] > 0 for o in place_half)
    assert scene.ref_id == DESK.combo_pick_objects


def test_spawn_unseen_split_alternates_novelty():
    novel_class = spawn_scene("pick", 4, BANK, split="unseen")
    assert novel_class.pick_instruction.class_id >= SEEN_CLASS_COUNT
    novel_kw = spawn_scene("pick", 5, BANK, split="unseen")
    cls = novel_kw.pick_instruction.class_id
    assert cls < SEEN_CLASS_COUNT
    assert novel_kw.pick_instruction.keyword_type == cls % len(KEYWORD_TYPES)
    # training draws never use the held-out type, so this exact pairing
    # is genuinely new at evaluation time
    assert novel_kw.pick_instruction.keyword \
        == KEYWORD_FORMS[cls][cls % len(KEYWORD_TYPES)]


def test_spawn_rejects_unknown_kind_and_split():
    with pytest.raises(ValidationError):
        spawn_scene("stack", 0, BANK)
    with pytest.raises(ValidationError):
        spawn_scene("pick", 0, BANK, split="test")


def test_spawn_impossible_layout_reports_seed():
    cramped = DeskConfig(spawn_x=(-0.10, 0.10), spawn_y=(-0.07, 0.07))
    with pytest.raises(ValidationError, match="seed"):
        spawn_scene("pick", 0, BANK, desk=cramped)
    inverted = DeskConfig(spawn_x=(-0.05, 0.05), spawn_y=(-0.05, 0.05))
    with pytest.raises(ValidationError, match="desk"):
        spawn_scene("pick", 0, BANK, desk=inverted)


# ---------------------------------------------------------------- rendering

def test_empty_table_renders_only_table_plane():
    world = tiny_world([disc_obj(0, 2, (0.0, 0.0))])
    world.removed.add(0)
    views, front_ids = world.render_views(0)
    assert (front_ids == -1).all()
    assert (views[0].depth > 0).any()
    from apalign.cloudfuse import build_clouds
    clouds = build_clouds(views, DESK.workspace_bounds(),
                          lang=BANK.table_dir, mode="place")
    # pixel-center quantization leaves a couple millimeters of z wobble
    np.testing.assert_allclose(clouds.points[:, 2], DESK.table_height,
                               atol=0.004)
    assert np.median(clouds.similarities) > 0.8


def test_single_object_pixels_carry_class_features():
    world = tiny_world([disc_obj(0, 4, (0.0, 0.0), radius=0.04)])
    views, front_ids = world.render_views(0)
    assert (front_ids == 0).any()
    mask = (front_ids == 0).ravel()
    feats = views[0].features.reshape(-1, DESK.feature_dim)[mask]
    sims = feats @ BANK.class_dirs[4]
    assert np.median(sims) > 0.8


def test_occlusion_prefers_the_nearer_surface():
    # a tall disc in front of a short one along the front camera's view;
    # the short one should lose most of its pixels
    near = disc_obj(0, 2, (0.0, -0.08), radius=0.03, height=0.08)
    far = disc_obj(1, 4, (0.0, 0.02), radius=0.03, height=0.03)
    world = tiny_world([near, far])
    _, both = world.render_views(0)
    solo_world = tiny_world([disc_obj(99, 4, (0.0, 0.02), radius=0.03,
                                      height=0.03)], target_id=99)
    _, solo = solo_world.render_views(0)
    assert (both == 1).sum() < 0.7 * (solo == 99).sum()


def test_table_features_blend_context_near_objects():
    world = tiny_world([disc_obj(0, 6, (0.0, 0.0), radius=0.03)])
    pts = world._table_points()
    dirs = world._table_features()
    sd = world.scene.objects[0].footprint.signed_distance(pts[:, :2])
    near = (sd > 0) & (sd <= DESK.context_radius)
    far = sd > DESK.context_radius + 0.02
    near_sim = dirs[near] @ BANK.class_dirs[6]
    far_sim = dirs[far] @ BANK.class_dirs[6]
    assert near_sim.min() > 0.3
    np.testing.assert_allclose(far_sim, 0.0, atol=1e-6)


def test_observation_is_deterministic_per_run_key():
    world = tiny_world([disc_obj(0, 2, (0.0, 0.0)),
                        disc_obj(1, 4, (0.15, 0.05))])
    a = world.observe(0, run_key=7)
    b = world.observe(0, run_key=7)
    c = world.observe(0, run_key=8)
    np.testing.assert_array_equal(a.candidates.encoded, b.candidates.encoded)
    np.testing.assert_array_equal(a.sampled.points, b.sampled.points)
    assert not np.array_equal(a.candidates.encoded, c.candidates.encoded)
    np.testing.assert_array_equal(a.sampled.points, c.sampled.points)


def test_cloud_cache_and_reset_reproduce_fresh_worlds():
    scene = spawn_scene("pick", 21, BANK)
    shared = SimWorld(scene, BANK, cloud_cache={})
    logs = []
    for run in range(3):
        shared.reset()
        logs.append(rollout(shared, make_expert(0), run_key=run))
    for run in range(3):
        fresh = SimWorld(spawn_scene("pick", 21, BANK), BANK)
        log = rollout(fresh, make_expert(0), run_key=run)
        assert log.success == logs[run].success
        assert log.steps == logs[run].steps
        for a, b in zip(log.outcomes, logs[run].outcomes):
            np.testing.assert_array_equal(a.action.position, b.action.position)


# ------------------------------------------------------------------ physics

def test_grasp_source_picks_deepest_containment():
    world = tiny_world([disc_obj(0, 2, (0.0, 0.0), radius=0.03),
                        disc_obj(1, 4, (0.2, 0.0), radius=0.04)])
    grasp = GraspAction(position=np.array([0.2, 0.0, 0.02]),
                        rotation=top_down(), width=0.08)
    assert world.grasp_source(grasp).uid == 1
    nowhere = GraspAction(position=np.array([0.1, 0.1, 0.02]),
                          rotation=top_down(), width=0.08)
    assert world.grasp_source(nowhere) is None


def test_hovering_grasp_is_infeasible():
    world = tiny_world([disc_obj(0, 2, (0.0, 0.0), radius=0.03, height=0.05)])
    grip = dict(rotation=top_down(), width=0.068)
    assert world.grasp_feasible(GraspAction(
        position=np.array([0.0, 0.0, 0.03]), **grip))
    # jaws close above the body: nothing between them
    assert not world.grasp_feasible(GraspAction(
        position=np.array([0.0, 0.0, 0.07]), **grip))
    # and digging into the table is no better
    assert not world.grasp_feasible(GraspAction(
        position=np.array([0.0, 0.0, 0.001]), **grip))


def test_corridor_blockage_depends_on_closing_direction():
    target = disc_obj(0, 2, (0.0, 0.0), radius=0.03, height=0.06)
    blocker = disc_obj(1, 4, (0.062, 0.0), radius=0.03, height=0.06)
    world = tiny_world([target, blocker])
    width = 2 * 0.03 + 0.008
    toward = GraspAction(position=np.array([0.0, 0.0, 0.03]),
                         rotation=top_down(0.0), width=width)
    across = GraspAction(position=np.array([0.0, 0.0, 0.03]),
                         rotation=top_down(math.pi / 2), width=width)
    # oracle: the corridor reaches half the jaw span plus clearance
    half_u = (width + 0.010) / 2.0
    assert 0.062 - 0.03 < half_u          # toward the blocker: inside reach
    assert 0.062 - 0.03 > 0.020           # sideways: outside the lateral arm
    assert not world.grasp_feasible(toward)
    assert world.grasp_feasible(across)
    world.removed.add(1)
    assert world.grasp_feasible(toward)


def test_place_validity_rules():
    ref = disc_obj(0, 2, (0.0, 0.0), radius=0.04)
    other = disc_obj(1, 4, (0.09, 0.0), radius=0.03)
    world = tiny_world([ref, other], kind="place", ref_id=0, relation="on")
    assert world.place_valid(np.array([0.01, 0.0, 0.06]))
    assert not world.place_valid(np.array([0.06, 0.0, 0.0]))

    around = tiny_world([ref, other], kind="place", ref_id=0,
                        relation="around")
    assert around.place_valid(np.array([0.0, 0.06, 0.0]))      # in the ring
    assert not around.place_valid(np.array([0.01, 0.0, 0.0]))  # on the ref
    assert not around.place_valid(np.array([0.0, 0.11, 0.0]))  # past the ring
    assert not around.place_valid(np.array([0.07, 0.0, 0.0]))  # inside other


def test_step_pick_removes_and_flags_target():
    world = tiny_world([disc_obj(0, 2, (0.0, 0.0), radius=0.03),
                        disc_obj(1, 4, (0.2, 0.0), radius=0.03)])
    grasp = GraspAction(position=np.array([0.2, 0.0, 0.03]),
                        rotation=top_down(), width=0.068)
    out = world.step_pick(grasp)
    assert out.reward == 1 and out.removed_id == 1 and not out.on_target
    assert world.removed == {1}
    target_grasp = GraspAction(position=np.array([0.0, 0.0, 0.03]),
                               rotation=top_down(), width=0.068)
    out = world.step_pick(target_grasp)
    assert out.reward == 1 and out.on_target and world.target_grasped


def test_failed_pick_changes_nothing():
    world = tiny_world([disc_obj(0, 2, (0.0, 0.0), radius=0.03)])
    hover = GraspAction(position=np.array([0.0, 0.0, 0.09]),
                        rotation=top_down(), width=0.068)
    out = world.step_pick(hover)
    assert out.reward == 0 and out.removed_id is None
    assert world.removed == set() and not world.target_grasped


# ------------------------------------------------------------------ experts

def test_expert_pick_prefers_feasible_target_grasp():
    target = disc_obj(0, 2, (0.0, 0.0), radius=0.03)
    far = disc_obj(1, 4, (0.2, 0.1), radius=0.03)
    world = tiny_world([target, far])
    cands = CandidateSet.from_actions("pick", [
        GraspAction(position=np.array([0.2, 0.1, 0.03]), rotation=top_down(),
                    width=0.068, source_id=1),
        GraspAction(position=np.array([0.0, 0.0, 0.09]), rotation=top_down(),
                    width=0.068, source_id=0),     # hover on the target
        GraspAction(position=np.array([0.0, 0.0, 0.03]), rotation=top_down(),
                    width=0.068, source_id=0),
    ])
    assert expert_pick(world, cands) == 2


def test_expert_pick_clears_blocker_when_target_is_walled():
    target = disc_obj(0, 2, (0.0, 0.0), radius=0.03)
    blocker = disc_obj(1, 4, (0.062, 0.0), radius=0.03)
    world = tiny_world([target, blocker])
    width = 0.068
    cands = CandidateSet.from_actions("pick", [
        GraspAction(position=np.array([0.0, 0.0, 0.03]),
                    rotation=top_down(0.0), width=width, source_id=0),
        GraspAction(position=np.array([0.062, 0.0, 0.03]),
                    rotation=top_down(math.pi / 2), width=width, source_id=1),
    ])
    # the only target grasp closes straight into the blocker, so the
    # expert grabs the blocker out of the way instead
    assert expert_pick(world, cands) == 1


def test_expert_pick_breaks_ties_by_index():
    world = tiny_world([disc_obj(0, 2, (0.0, 0.0), radius=0.03)])
    same = GraspAction(position=np.array([0.0, 0.0, 0.03]),
                       rotation=top_down(), width=0.068, source_id=0)
    cands = CandidateSet.from_actions("pick", [same, same])
    assert expert_pick(world, cands) == 0


def test_expert_raises_when_nothing_is_feasible():
    world = tiny_world([disc_obj(0, 2, (0.0, 0.0), radius=0.03)])
    hover = GraspAction(position=np.array([0.0, 0.0, 0.09]),
                        rotation=top_down(), width=0.068, source_id=0)
    with pytest.raises(ExpertStuck):
        expert_pick(world, CandidateSet.from_actions("pick", [hover]))
    with pytest.raises(ExpertStuck):
        expert_pick(world, CandidateSet.from_actions("pick", []))


def test_expert_place_is_seeded_uniform_over_valid():
    ref = disc_obj(0, 2, (0.0, 0.0), radius=0.04)
    world = tiny_world([ref], kind="place", ref_id=0, relation="on")
    cands = CandidateSet.from_actions("place", [
        PlaceAction(position=np.array([0.0, 0.2, 0.0]), relation="on"),
        PlaceAction(position=np.array([0.01, 0.0, 0.06]), relation="on"),
        PlaceAction(position=np.array([-0.01, 0.01, 0.06]), relation="on"),
    ])
    picks = {expert_place(world, cands, np.random.default_rng(s))
             for s in range(40)}
    assert picks == {1, 2}


# ------------------------------------------------------------------ rollout

def test_expert_rollouts_succeed_across_kinds():
    for kind in ("pick", "place", "pick-place"):
        world = SimWorld(spawn_scene(kind, 31, BANK), BANK)
        log = rollout(world, make_expert(3), run_key=3, collect=True)
        assert log.success and not log.stuck
        assert log.demo_steps
        kinds = [d.kind for d in log.demo_steps]
        if kind == "pick-place":
            assert kinds[-1] == "place" and set(kinds[:-1]) == {"pick"}
        else:
            assert set(kinds) == {kind if kind != "pick-place" else "pick"}


def test_rollout_absorbs_on_a_stubborn_chooser():
    scene = spawn_scene("pick", 41, BANK)
    world = SimWorld(scene, BANK)
    probe = world.observe(0, run_key=0)
    hover_idx = next(i for i, a in enumerate(probe.candidates.actions)
                     if a.source_id is None)

    def stubborn(w, obs, step):
        return hover_idx

    log = rollout(world, stubborn, run_key=0)
    assert not log.success
    assert log.steps == DESK.max_steps
    assert all(o.reward == 0 for o in log.outcomes)
    assert world.removed == set()


def test_rollout_is_deterministic_per_run_key():
    a = rollout(SimWorld(spawn_scene("pick", 51, BANK), BANK),
                make_expert(9), run_key=9)
    b = rollout(SimWorld(spawn_scene("pick", 51, BANK), BANK),
                make_expert(9), run_key=9)
    assert a.success == b.success and a.steps == b.steps
    for oa, ob in zip(a.outcomes, b.outcomes):
        np.testing.assert_array_equal(oa.action.position, ob.action.position)


def test_demo_steps_replay_to_the_same_rewards():
    from apalign.priors import decode_action
    for seed in range(6):
        for kind in ("pick", "place", "pick-place"):
            world = SimWorld(spawn_scene(kind, 60 + seed, BANK), BANK)
            log = rollout(world, make_expert(seed), run_key=seed, collect=True)
            if not log.success:
                continue
            replay = SimWorld(spawn_scene(kind, 60 + seed, BANK), BANK)
            for demo in log.demo_steps:
                action = decode_action(demo.action_row, demo.kind)
                if demo.kind == "pick":
                    out = replay.step_pick(action)
                else:
                    out = replay.step_place(action)
                assert out.reward == 1
