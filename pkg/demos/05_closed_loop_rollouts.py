"""
Closed-loop episodes: expert, baseline, and recorded demonstrations
===================================================================

A rollout alternates observe -> choose -> act until the task resolves.
The scripted expert defines the data-collection policy; the grounding
baseline needs no training (it picks the candidate closest to the most
instruction-similar cloud region); recorded demonstrations replay
deterministically on a fresh copy of the same scene.
"""

from apalign.cli import grounding_chooser
from apalign.priors import decode_action
from apalign.sim import EmbeddingBank, SimWorld, make_expert, rollout, spawn_scene

bank = EmbeddingBank()

# 1. Watch the expert work a few cluttered scenes end to end.
for seed in range(3):
    world = SimWorld(spawn_scene("pick-place", seed, bank), bank)
    log = rollout(world, make_expert(seed), run_key=seed, collect=True)
    print(f"scene {seed}: {log.instruction_text!r}")
    print(f"  expert: success={log.success} in {log.steps} steps, "
          f"{len(log.demo_steps)} demo steps recorded")

    # 2. Replay the recorded actions on a fresh world. Rewards must
    #    reproduce exactly: demonstrations are stored as raw action
    #    rows, not internal object references.
    if log.success:
        replay = SimWorld(spawn_scene("pick-place", seed, bank), bank)
        rewards = []
        for demo in log.demo_steps:
            action = decode_action(demo.action_row, demo.kind)
            out = (replay.step_pick(action) if demo.kind == "pick"
                   else replay.step_place(action))
            rewards.append(out.reward)
        print(f"  replay rewards: {rewards}")

    # 3. The grounding baseline on the same scene, no learning at all.
    fresh = SimWorld(spawn_scene("pick-place", seed, bank), bank)
    base_log = rollout(fresh, grounding_chooser, run_key=seed)
    print(f"  grounding baseline: success={base_log.success} "
          f"in {base_log.steps} steps")
