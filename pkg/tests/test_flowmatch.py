import numpy as np
import pytest
import scipy.linalg

from strikeflow import flowmatch as fm
from strikeflow import liegroup as lg


def random_sequence(rng, n=16, scale=1.0):
    return fm.ActionSequence(
        rng.normal(size=(n, 3)) * scale,
        lg.quat_exp(rng.normal(size=(n, 3)) * 0.8),
    )


class TestSampleNoise:
    def test_deterministic_under_seed(self):
        a = fm.sample_noise(np.random.default_rng(42), 16)
        b = fm.sample_noise(np.random.default_rng(42), 16)
        assert a.translations.tobytes() == b.translations.tobytes()
        assert a.rotations.tobytes() == b.rotations.tobytes()

    def test_translation_moments(self):
        a = fm.sample_noise(np.random.default_rng(0), 100_000)
        mean = a.translations.mean(axis=0)
        var = a.translations.var(axis=0)
        assert np.all(np.abs(mean) < 0.02)
        assert np.all((var > 0.96) & (var < 1.04))

    def test_zero_sigma_rot_gives_identity_rotations(self):
        a = fm.sample_noise(np.random.default_rng(1), 16, sigma_rot=0.0)
        assert np.allclose(a.rotations, [1.0, 0.0, 0.0, 0.0])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            fm.sample_noise(np.random.default_rng(0), 0)


class TestInterpolate:
    def test_endpoints(self):
        rng = np.random.default_rng(2)
        a0, a1 = random_sequence(rng), random_sequence(rng)
        at0 = fm.interpolate(a0, a1, 0.0)
        at1 = fm.interpolate(a0, a1, 1.0)
        assert np.array_equal(at0.translations, a0.translations)
        assert np.max(np.abs(at1.translations - a1.translations)) < 1e-10
        for i in range(16):
            assert at0.pose(i).rotation.angle_to(a0.pose(i).rotation) < 1e-10
            assert at1.pose(i).rotation.angle_to(a1.pose(i).rotation) < 1e-10

    def test_translation_midpoint(self):
        a0 = fm.ActionSequence.identity(1)
        a1 = fm.ActionSequence(np.array([[1.0, 0.0, 0.0]]), a0.rotations.copy())
        mid = fm.interpolate(a0, a1, 0.5)
        assert np.allclose(mid.translations, [[0.5, 0.0, 0.0]])

    def test_translation_path_collinear(self):
        rng = np.random.default_rng(3)
        a0, a1 = random_sequence(rng), random_sequence(rng)
        direction = a1.translations - a0.translations
        for t in np.linspace(0.05, 0.95, 7):
            at = fm.interpolate(a0, a1, float(t))
            offset = at.translations - a0.translations
            # offset must be exactly t * direction -> cross product vanishes
            cross = np.cross(offset, direction)
            assert np.max(np.abs(cross)) < 1e-12

    def test_length_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            fm.interpolate(random_sequence(rng, 16), random_sequence(rng, 8), 0.5)


class TestTargetVelocity:
    def test_linear_constant_on_path(self):
        rng = np.random.default_rng(5)
        a0, a1 = random_sequence(rng), random_sequence(rng)
        expected = a1.translations - a0.translations
        for t in (0.0, 0.25, 0.5, 0.9):
            at = fm.interpolate(a0, a1, t)
            vel = fm.target_velocity(at, a1, t)
            assert np.max(np.abs(vel.linear - expected)) < 1e-9

    def test_angular_constant_same_axis(self):
        w = np.array([np.pi / 2, 0.0, 0.0])
        a0 = fm.ActionSequence.identity(1)
        a1 = fm.ActionSequence(np.zeros((1, 3)), lg.quat_exp(w[None, :]))
        for t in (0.0, 0.3, 0.7, 0.95):
            at = fm.interpolate(a0, a1, t)
            vel = fm.target_velocity(at, a1, t)
            assert np.max(np.abs(vel.angular[0] - w)) < 1e-9

    def test_off_path_matches_direct_formula(self):
        # independent oracle: scipy matrix logarithm for the angular part,
        # plain python arithmetic for the linear part
        rng = np.random.default_rng(6)
        a_t, a1 = random_sequence(rng), random_sequence(rng)
        t = 0.37
        vel = fm.target_velocity(a_t, a1, t)
        for i in range(16):
            lin_oracle = (a1.translations[i] - a_t.translations[i]) / (1.0 - t)
            assert np.max(np.abs(vel.linear[i] - lin_oracle)) < 1e-12
            rel = a_t.pose(i).rotation.as_matrix().T @ a1.pose(i).rotation.as_matrix()
            log_m = scipy.linalg.logm(rel)
            ang_oracle = np.array([log_m[2, 1], log_m[0, 2], log_m[1, 0]]) / (1.0 - t)
            assert np.max(np.abs(vel.angular[i] - ang_oracle)) < 1e-10

    def test_rejects_t_near_one(self):
        rng = np.random.default_rng(7)
        a = random_sequence(rng)
        with pytest.raises(ValueError):
            fm.target_velocity(a, a, 1.0 - 1e-9)

    def test_path_constancy_invariant(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            a0, a1 = random_sequence(rng), random_sequence(rng)
            ref_lin = ref_ang = None
            for t in np.arange(0.05, 0.96, 0.1):
                at = fm.interpolate(a0, a1, float(t))
                vel = fm.target_velocity(at, a1, float(t))
                if ref_lin is None:
                    ref_lin, ref_ang = vel.linear, vel.angular
                else:
                    assert np.max(np.abs(vel.linear - ref_lin)) < 1e-8
                    assert np.max(np.abs(vel.angular - ref_ang)) < 1e-8


class TestFlowLoss:
    def test_zero_when_equal(self):
        rng = np.random.default_rng(9)
        v = fm.VelocitySequence(rng.normal(size=(16, 3)), rng.normal(size=(16, 3)))
        assert fm.flow_loss(v, v) == 0.0

    def test_unit_linear_error_single_pose(self):
        pred = fm.VelocitySequence(np.array([[1.0, 0.0, 0.0]]), np.zeros((1, 3)))
        target = fm.VelocitySequence(np.zeros((1, 3)), np.zeros((1, 3)))
        assert fm.flow_loss(pred, target) == pytest.approx(1.0, abs=1e-15)

    def test_matches_elementwise_sum(self):
        rng = np.random.default_rng(10)
        a = fm.VelocitySequence(rng.normal(size=(16, 3)), rng.normal(size=(16, 3)))
        b = fm.VelocitySequence(rng.normal(size=(16, 3)), rng.normal(size=(16, 3)))
        brute = 0.0
        for i in range(16):
            for j in range(3):
                brute += (a.linear[i, j] - b.linear[i, j]) ** 2
                brute += (a.angular[i, j] - b.angular[i, j]) ** 2
        assert fm.flow_loss(a, b) == pytest.approx(brute / 16, rel=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = fm.VelocitySequence(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
            b = fm.VelocitySequence(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
            assert fm.flow_loss(a, b) >= 0.0


def oracle_velocity_model(a1):
    """True rectified-flow field toward a fixed endpoint a1."""

    def model(actions, obs, t):
        vel = fm.target_velocity(actions, a1, t)
        return vel.linear, vel.angular

    return model


class TestSampleActions:
    @pytest.mark.parametrize("k", [1, 2, 5, 10])
    def test_oracle_field_reaches_endpoint(self, k):
        rng = np.random.default_rng(12)
        a1 = random_sequence(rng)
        out = fm.sample_actions(oracle_velocity_model(a1), None, k, np.random.default_rng(13))
        assert np.max(np.abs(out.translations - a1.translations)) < 1e-9
        for i in range(16):
            assert out.pose(i).rotation.angle_to(a1.pose(i).rotation) < 1e-9

    def test_k5_and_k10_agree_on_constant_field(self):
        rng = np.random.default_rng(14)
        a1 = random_sequence(rng)
        out5 = fm.sample_actions(oracle_velocity_model(a1), None, 5, np.random.default_rng(15))
        out10 = fm.sample_actions(oracle_velocity_model(a1), None, 10, np.random.default_rng(15))
        assert np.max(np.abs(out5.translations - out10.translations)) < 1e-9

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(16)
        a1 = random_sequence(rng)
        model = oracle_velocity_model(a1)
        out1 = fm.sample_actions(model, None, 5, np.random.default_rng(17))
        out2 = fm.sample_actions(model, None, 5, np.random.default_rng(17))
        assert out1.translations.tobytes() == out2.translations.tobytes()
        assert out1.rotations.tobytes() == out2.rotations.tobytes()

    def test_denormalizes_output(self):
        rng = np.random.default_rng(18)
        a1 = random_sequence(rng)
        norm = fm.ActionNormalizer(np.array([1.0, -2.0, 0.5]), np.array([2.0, 0.1, 3.0]))
        out = fm.sample_actions(
            oracle_velocity_model(a1), None, 5, np.random.default_rng(19), normalizer=norm
        )
        assert np.max(np.abs(out.translations - norm.denormalize(a1.translations))) < 1e-8


class TestBcLoss:
    def test_zero_for_identical(self):
        rng = np.random.default_rng(20)
        a = random_sequence(rng)
        assert fm.bc_loss(a, a) == pytest.approx(0.0, abs=1e-15)

    def test_single_offset_pose(self):
        a = fm.ActionSequence.identity(16)
        b = a.copy()
        b.translations[3] = [0.0, 1.0, 0.0]
        assert fm.bc_loss(b, a) == pytest.approx(1.0 / 16.0, rel=1e-12)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(21)
        a, b = random_sequence(rng), random_sequence(rng)
        brute = 0.0
        for i in range(16):
            brute += np.sum((a.translations[i] - b.translations[i]) ** 2)
            rel = a.pose(i).rotation.inverse().compose(b.pose(i).rotation)
            brute += np.sum(lg.log_so3(rel) ** 2)
        assert fm.bc_loss(a, b) == pytest.approx(brute / 16, rel=1e-12)


class TestDdpm:
    def test_near_data_at_step_zero(self):
        rng = np.random.default_rng(22)
        a1 = random_sequence(rng)
        sched = fm.CosineSchedule()
        noised, _ = fm.ddpm_target(a1, 0, np.random.default_rng(23), sched)
        # alpha_bar[0] ~ 1, so deviations are bounded by the first noise scale
        tol = 6.0 * np.sqrt(1.0 - sched.alpha_bar[0])
        assert np.max(np.abs(noised.translations - a1.translations)) < tol
        for i in range(16):
            assert noised.pose(i).rotation.angle_to(a1.pose(i).rotation) < tol

    def test_reproducible(self):
        rng = np.random.default_rng(24)
        a1 = random_sequence(rng)
        sched = fm.CosineSchedule()
        n1, e1 = fm.ddpm_target(a1, 50, np.random.default_rng(25), sched)
        n2, e2 = fm.ddpm_target(a1, 50, np.random.default_rng(25), sched)
        assert n1.translations.tobytes() == n2.translations.tobytes()
        assert e1.linear.tobytes() == e2.linear.tobytes()

    def test_terminal_translation_variance(self):
        sched = fm.CosineSchedule()
        a1 = fm.ActionSequence.identity(1)
        rng = np.random.default_rng(26)
        samples = np.stack(
            [fm.ddpm_target(a1, len(sched) - 1, rng, sched)[0].translations[0] for _ in range(10_000)]
        )
        var = samples.var(axis=0)
        # data is zero here, so the variance equals 1 - alpha_bar[T-1] ~ 1
        assert np.all(np.abs(var - 1.0) < 0.05)

    def test_rejects_bad_index(self):
        sched = fm.CosineSchedule()
        with pytest.raises(ValueError):
            fm.ddpm_target(fm.ActionSequence.identity(1), len(sched), np.random.default_rng(0), sched)


def ddim_epsilon_oracle(a1, schedule, sigma_rot=1.0):
    """Returns the noise that would map a1 onto the current sample."""

    def model(actions, obs, t_norm):
        tau = int(round(t_norm * (len(schedule) - 1)))
        ab = schedule.alpha_bar[tau]
        eps_lin = (actions.translations - np.sqrt(ab) * a1.translations) / np.sqrt(1.0 - ab)
        rel = lg.quat_multiply(lg.quat_conjugate(a1.rotations), actions.rotations)
        eps_ang = lg.quat_log(rel) / (np.sqrt(1.0 - ab) * sigma_rot)
        return eps_lin, eps_ang

    return model


class TestDdim:
    def test_epsilon_oracle_reconstructs_data(self):
        rng = np.random.default_rng(27)
        a1 = random_sequence(rng, scale=0.5)
        sched = fm.CosineSchedule()
        out = fm.ddim_sample(
            ddim_epsilon_oracle(a1, sched), None, len(sched), np.random.default_rng(28), sched
        )
        assert np.max(np.abs(out.translations - a1.translations)) < 1e-6
        for i in range(16):
            assert out.pose(i).rotation.angle_to(a1.pose(i).rotation) < 1e-6

    def test_deterministic(self):
        rng = np.random.default_rng(29)
        a1 = random_sequence(rng)
        sched = fm.CosineSchedule()
        model = ddim_epsilon_oracle(a1, sched)
        o1 = fm.ddim_sample(model, None, 5, np.random.default_rng(30), sched)
        o2 = fm.ddim_sample(model, None, 5, np.random.default_rng(30), sched)
        assert o1.translations.tobytes() == o2.translations.tobytes()

    def test_single_step_finite(self):
        rng = np.random.default_rng(31)
        a1 = random_sequence(rng)
        sched = fm.CosineSchedule()
        out = fm.ddim_sample(ddim_epsilon_oracle(a1, sched), None, 1, np.random.default_rng(32), sched)
        assert np.all(np.isfinite(out.translations))
        assert np.all(np.isfinite(out.rotations))
