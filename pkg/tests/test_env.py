import json

import numpy as np
import pytest

from vtam.env import (EnvConfig, WorldState, episode_success, generate_dataset,
                      init_state, load_dataset, load_episode, normalize,
                      denormalize, observe, render_tactile, render_view1,
                      render_view2, rollout_policy, run_episode, scripted_expert,
                      step)

CFG = EnvConfig()


def grasp_state(force, width=0.40, gain=1.0, wc=0.49, k=4.0):
    """A mid-grasp state with every camera-relevant field pinned."""
    return WorldState(
        ee=np.array([0.4, 0.5, 0.05]), width=width, grasp_force=force,
        obj=np.array([0.4, 0.5, 0.0]), contact=True, attached=False,
        phase="grasp", step_index=20, stiffness=k, contact_width=wc,
        sensor_gain=gain,
    )


class TestInformationBarrier:
    def test_ambiguous_forces_render_identical_cameras(self):
        lo = grasp_state(0.3 * CFG.force_high)
        hi = grasp_state(0.8 * CFG.force_high)
        assert np.array_equal(render_view1(lo, CFG), render_view1(hi, CFG))
        assert np.array_equal(render_view2(lo, CFG), render_view2(hi, CFG))

    def test_ambiguous_forces_differ_in_tactile(self):
        lo = render_tactile(grasp_state(0.3 * CFG.force_high), CFG)
        hi = render_tactile(grasp_state(0.8 * CFG.force_high), CFG)
        frac = np.mean(np.abs(lo - hi) > 1e-6)
        assert frac >= 0.01, f"only {frac:.3%} of tactile pixels differ"

    def test_tactile_is_reference_grid_without_contact(self):
        s = grasp_state(0.0)
        s.contact = False
        ref = render_tactile(s, CFG)
        rng = np.random.default_rng(0)
        fresh = init_state(CFG, rng)
        assert np.array_equal(render_tactile(fresh, CFG), ref)


class TestDynamics:
    def test_full_determinism(self):
        e1 = run_episode(CFG, seed=42)
        e2 = run_episode(CFG, seed=42)
        for a, b in ((e1.view1, e2.view1), (e1.tactile, e2.tactile),
                     (e1.action, e2.action), (e1.state, e2.state)):
            assert np.array_equal(a, b)

    def test_break_is_absorbing(self):
        s = grasp_state(0.0, width=0.48, wc=0.50, k=50.0)
        s.contact = False
        s, _ = step(s, np.array([0, 0, 0, 0.0]), CFG)  # slam shut on stiff object
        assert s.broken
        for _ in range(5):
            s, _ = step(s, np.array([0, 0, 0, 0.8]), CFG)
            assert s.broken
        assert not episode_success(s, CFG)

    def test_undergrasp_lift_slips_and_absorbs(self):
        s = grasp_state(0.0, width=0.6, wc=0.50, k=1.2)
        s.contact = False
        for _ in range(4):  # close to a feather grip, force < F_low
            s, _ = step(s, np.array([0, 0, 0, 0.45]), CFG)
        assert s.contact and s.grasp_force < CFG.force_low
        for _ in range(4):
            s, _ = step(s, np.array([0, 0, 0.08, 0.45]), CFG)
        assert s.slipped
        for _ in range(3):
            s, _ = step(s, np.zeros(4), CFG)
            assert s.slipped
        assert not episode_success(s, CFG)

    def test_invalid_action_clamped_and_recorded(self):
        rng = np.random.default_rng(1)
        s = init_state(CFG, rng)
        s2, _ = step(s, np.array([9.0, -9.0, 9.0, 2.0]), CFG)
        assert s2.clamped
        assert abs(s2.ee[0] - s.ee[0]) <= CFG.max_step_xy + 1e-12
        s3, _ = step(s, np.array([np.nan, 0, 0, 0.5]), CFG)
        assert np.all(np.isfinite(s3.ee))

    def test_observation_in_range(self):
        ep = run_episode(CFG, seed=9)
        for arr in (ep.view1, ep.view2, ep.tactile):
            assert arr.min() >= 0.0 and arr.max() <= 1.0


class TestExpert:
    def test_expert_succeeds_with_noise(self):
        assert all(run_episode(CFG, seed=5000 + s).success for s in range(20))

    def test_expert_noise_free_identical(self):
        e1 = run_episode(CFG, seed=3, noise=False)
        e2 = run_episode(CFG, seed=3, noise=False)
        assert np.array_equal(e1.action, e2.action)

    def test_open_loop_expert_fails_sometimes(self):
        succ = [run_episode(CFG, seed=2000 + s, open_loop=True).success
                for s in range(20)]
        assert sum(succ) < len(succ)

    def test_terminal_state_zero_action(self):
        ep = run_episode(CFG, seed=4)
        done = ep.hidden_states[CFG.done_start + 1]
        assert np.array_equal(scripted_expert(done, CFG), np.zeros(4))


class TestRollout:
    def test_zero_action_policy_fails(self):
        rep = rollout_policy(lambda h: np.zeros((24, 4)), 5, seed=3, cfg=CFG)
        assert rep.success_rate == 0.0

    def test_expert_through_chunk_interface(self):
        rep = rollout_policy("expert", 5, seed=3, cfg=CFG)
        assert rep.success_rate == 1.0

    def test_rates_are_exact_fractions(self):
        rep = rollout_policy("expert", 4, seed=1, cfg=CFG)
        assert rep.success_rate == rep.successes / 4

    def test_nan_policy_counted_as_failure_with_diagnostic(self):
        rep = rollout_policy(lambda h: np.full((24, 4), np.nan), 2, seed=0, cfg=CFG)
        assert rep.success_rate == 0.0
        assert all(t.diagnostic for t in rep.trials)

    def test_zero_trials_rejected(self):
        with pytest.raises(ValueError):
            rollout_policy("expert", 0, seed=0, cfg=CFG)


class TestDataset:
    @pytest.fixture(scope="class")
    def dataset(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("data")
        episodes, manifest = generate_dataset(6, 123, CFG, out, config_hash="h0")
        return out, episodes, manifest

    def test_regeneration_is_byte_identical(self, dataset, tmp_path):
        out, _, _ = dataset
        out2 = tmp_path / "again"
        generate_dataset(6, 123, CFG, out2, config_hash="h0")
        for f in sorted(out.glob("episode_*.bin")):
            assert (out2 / f.name).read_bytes() == f.read_bytes()
        assert json.loads((out2 / "manifest.json").read_text()) == \
            json.loads((out / "manifest.json").read_text())

    def test_manifest_reports_all_success(self, dataset):
        _, _, manifest = dataset
        assert manifest["n_episodes"] == 6
        assert manifest["all_success"] is True
        assert len(manifest["seeds"]) == 6

    def test_episode_roundtrip(self, dataset):
        out, episodes, manifest = dataset
        ep = load_episode(out / manifest["files"][0], seed=manifest["seeds"][0])
        assert np.array_equal(ep.view1, episodes[0].view1)
        assert ep.success

    def test_normalization_roundtrip(self, dataset):
        _, _, manifest = dataset
        stats = manifest["normalization"]["action"]
        rng = np.random.default_rng(0)
        a = rng.standard_normal((10, 4))
        np.testing.assert_allclose(denormalize(normalize(a, stats), stats), a,
                                   atol=1e-6)

    def test_bad_episode_count_rejected(self):
        with pytest.raises(ValueError):
            generate_dataset(0, 1, CFG, "/tmp/unused")
