import numpy as np
import pytest

from actvae import pipeline, training
from actvae.core import DiagonalGaussian, Rng, kl_to_standard_normal
from actvae.metrics import diversity_std
from actvae.model import (ABLATIONS, ACTVAE, ModelConfig, RolloutTrace, check_label, elbo_report,
                          one_hot, param_shapes, vae_loss)
from actvae.recurrent import CellState

from conftest import finite_difference_check, tiny_batch, tiny_config


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def scripted_lstm(W, b, x, h, c):
    H = h.shape[0]
    a = W @ np.concatenate([x, h]) + b
    i, f, g, o = sig(a[:H]), sig(a[H:2 * H]), np.tanh(a[2 * H:3 * H]), sig(a[3 * H:])
    c1 = f * c + i * g
    return o * np.tanh(c1), c1


def scripted_rollout(p, cfg, seed_pose, label, z0, eps_list):
    """Independent re-implementation of one rollout for a single sequence."""
    lab = label if cfg.use_action_label else np.zeros_like(label)
    pose = seed_pose.reshape(-1)
    z_prev = z0
    he, ce = np.zeros(cfg.enc_hidden), np.zeros(cfg.enc_hidden)
    hd, cd = np.zeros(cfg.dec_hidden), np.zeros(cfg.dec_hidden)
    poses, mus, lvs = [], [], []
    for eps in eps_list:
        if not cfg.temporal_coherence:
            he, ce = np.zeros_like(he), np.zeros_like(ce)
        zin = z_prev if (cfg.condition_on_past_latents and cfg.temporal_coherence) \
            else np.zeros_like(z_prev)
        he, ce = scripted_lstm(p["enc.W"], p["enc.b"], np.concatenate([pose, lab, zin]), he, ce)
        mu = p["mu.W"] @ he + p["mu.b"]
        lv = p["logvar.W"] @ he + p["logvar.b"]
        z = mu + np.exp(0.5 * lv) * eps
        hd, cd = scripted_lstm(p["dec.W"], p["dec.b"], np.concatenate([pose, lab, z]), hd, cd)
        out = p["out.W"] @ hd + p["out.b"]
        pose = pose + out if cfg.residual else out
        poses.append(pose.reshape(cfg.J, 2))
        mus.append(mu)
        lvs.append(lv)
        z_prev = z
    return np.stack(poses), np.stack(mus), np.stack(lvs)


def scripted_loss(poses, mus, lvs, targets, l1, l2):
    dis = sum(abs(poses[t] - targets[t]).sum() for t in range(len(poses)))
    div = 0.0
    for mu, lv in zip(mus, lvs):
        div += kl_to_standard_normal(DiagonalGaussian(mu, np.exp(0.5 * lv)))
    return l1 * dis + l2 * div, dis, div


class TestConfig:
    def test_full_size_dimensions(self):
        cfg = ModelConfig(J=13, C=9)
        assert cfg.enc_input_dim == 547 and cfg.dec_input_dim == 547
        assert cfg.dec_hidden == 26 and cfg.d_z == 512 and cfg.enc_hidden == 1024

    def test_round_trip_and_validation(self):
        cfg = ModelConfig.ablation("wo_az", J=3, C=4, d_z=5)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        assert not cfg.use_action_label and not cfg.condition_on_past_latents
        with pytest.raises(ValueError):
            ModelConfig(J=0, C=2)
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"J": 2, "C": 2, "width": 3})
        with pytest.raises(ValueError):
            ModelConfig.ablation("wo_everything", J=2, C=2)

    def test_param_shapes_and_count(self):
        cfg = tiny_config()
        m = ACTVAE.init(cfg, Rng(0))
        assert {k: v.shape for k, v in m.params.items()} == param_shapes(cfg)
        assert m.num_parameters() == sum(int(np.prod(s)) for s in param_shapes(cfg).values())

    def test_labels(self):
        np.testing.assert_array_equal(one_hot(2, 4), [0, 0, 1, 0])
        with pytest.raises(ValueError):
            one_hot(4, 4)
        with pytest.raises(ValueError):
            check_label(np.array([1.0, 1.0]), 2)
        with pytest.raises(ValueError):
            check_label(np.array([0.5, 0.5]), 2)


class TestSteps:
    def test_zero_params_encoder_is_prior(self):
        cfg = tiny_config()
        m = ACTVAE.zeros(cfg, np.float64)
        g, _ = m.encoder_step(np.full((2, 2), 0.3), np.ones(3), None, one_hot(1, 2))
        np.testing.assert_array_equal(g.mean, 0.0)
        np.testing.assert_array_equal(g.stddev, 1.0)

    def test_zero_params_decoder_is_identity(self):
        cfg = tiny_config()
        m = ACTVAE.zeros(cfg, np.float64)
        prev = np.array([[0.1, -0.2], [0.5, 0.7]])
        pose, _ = m.decoder_step(prev, np.ones(3), None, one_hot(0, 2))
        np.testing.assert_array_equal(pose, prev)

    def test_steps_are_deterministic(self):
        m = ACTVAE.init(tiny_config(), Rng(3), np.float64)
        args = (np.full((2, 2), 0.2), np.array([0.1, 0.2, 0.3]), None, one_hot(0, 2))
        (g1, s1), (g2, s2) = m.encoder_step(*args), m.encoder_step(*args)
        assert np.array_equal(g1.mean, g2.mean) and np.array_equal(s1.hidden, s2.hidden)
        p1, _ = m.decoder_step(*args)
        p2, _ = m.decoder_step(*args)
        assert np.array_equal(p1, p2)

    def test_steps_match_scripted(self):
        cfg = ModelConfig(J=2, C=2, d_z=3, enc_hidden=4, dec_hidden=4, n_steps=1)
        m = ACTVAE.init(cfg, Rng(5), np.float64)
        p = m.params
        r = np.random.default_rng(0)
        pose, z = r.uniform(-1, 1, (2, 2)), r.normal(size=3)
        st = CellState(r.uniform(-0.5, 0.5, 4), r.normal(size=4))
        lab = one_hot(1, 2, np.float64)
        g, s = m.encoder_step(pose, z, st, lab)
        h, c = scripted_lstm(p["enc.W"], p["enc.b"], np.concatenate([pose.ravel(), lab, z]),
                             st.hidden, st.memory)
        np.testing.assert_allclose(g.mean, p["mu.W"] @ h + p["mu.b"], atol=1e-10)
        np.testing.assert_allclose(g.stddev, np.exp(0.5 * (p["logvar.W"] @ h + p["logvar.b"])),
                                   atol=1e-10)
        np.testing.assert_allclose(s.memory, c, atol=1e-10)
        out, s = m.decoder_step(pose, z, st, lab)
        h, c = scripted_lstm(p["dec.W"], p["dec.b"], np.concatenate([pose.ravel(), lab, z]),
                             st.hidden, st.memory)
        np.testing.assert_allclose(out.ravel(), pose.ravel() + p["out.W"] @ h + p["out.b"],
                                   atol=1e-10)

    def test_dimension_errors(self):
        m = ACTVAE.init(tiny_config(), Rng(0))
        with pytest.raises(ValueError):
            m.encoder_step(np.zeros((3, 2)), np.zeros(3), None, one_hot(0, 2))
        with pytest.raises(ValueError):
            m.encoder_step(np.zeros((2, 2)), np.zeros(4), None, one_hot(0, 2))
        with pytest.raises(ValueError):
            m.decoder_step(np.zeros((2, 2)), np.zeros(3), None, np.array([1.0, 1.0]))


class TestRollout:
    @pytest.mark.parametrize("ablation", sorted(ABLATIONS))
    @pytest.mark.parametrize("residual", [True, False])
    def test_matches_scripted(self, ablation, residual):
        cfg = ModelConfig.ablation(ablation, J=2, C=2, d_z=3, enc_hidden=4, dec_hidden=4,
                                   n_steps=4, residual=residual)
        m = ACTVAE.init(cfg, Rng(1), np.float64)
        seed, lab = np.array([[0.2, -0.4], [0.6, 0.1]]), one_hot(1, 2, np.float64)
        tr = m.rollout(seed, lab, rng=Rng(9), sample=True)
        poses, mus, lvs = scripted_rollout(m.params, cfg, seed, lab, tr.z_init[0], tr.eps[:, 0])
        np.testing.assert_allclose(tr.pose_sequence(), poses, atol=1e-10)
        np.testing.assert_allclose(tr.mu[:, 0], mus, atol=1e-10)
        np.testing.assert_allclose(tr.logvar[:, 0], lvs, atol=1e-10)
        tgt = np.random.default_rng(2).uniform(-1, 1, (4, 2, 2))
        want = scripted_loss(poses, mus, lvs, tgt, 200.0, 0.002)
        np.testing.assert_allclose(vae_loss(tr, tgt), want, rtol=1e-10, atol=1e-10)

    def test_noise_drawn_from_rng(self):
        m = ACTVAE.init(tiny_config(n_steps=3), Rng(0), np.float64)
        tr = m.rollout(np.zeros((2, 2)), one_hot(0, 2), rng=Rng(4), sample=True)
        r = Rng(4)
        np.testing.assert_array_equal(tr.z_init[0], r.normal((1, 3))[0])
        for k in range(3):
            np.testing.assert_array_equal(tr.eps[k, 0], r.normal((1, 3))[0])
        # latents[i] is a draw from gaussians[i]
        for k, g in enumerate(tr.gaussians):
            np.testing.assert_allclose(tr.latent_sequence()[k], g.mean + g.stddev * tr.eps[k, 0])

    def test_mean_rollout_ignores_rng(self):
        m = ACTVAE.init(tiny_config(), Rng(0))
        seed, lab = np.full((2, 2), 0.1), one_hot(1, 2)
        a = m.rollout(seed, lab, rng=Rng(1), sample=False)
        b = m.rollout(seed, lab, rng=Rng(2), sample=False)
        c = m.rollout(seed, lab, rng=None, sample=False)
        for x in (b, c):
            assert np.array_equal(a.poses, x.poses) and np.array_equal(a.latents, x.latents)

    def test_seeded_sampling(self):
        m = ACTVAE.init(tiny_config(), Rng(0))
        seed, lab = np.full((2, 2), 0.1), one_hot(1, 2)
        a = m.rollout(seed, lab, rng=Rng(1))
        b = m.rollout(seed, lab, rng=Rng(1))
        c = m.rollout(seed, lab, rng=Rng(2))
        assert np.array_equal(a.poses, b.poses) and np.array_equal(a.latents, b.latents)
        assert not np.array_equal(a.latents, c.latents)

    def test_one_step_equals_manual_composition(self):
        m = ACTVAE.init(tiny_config(), Rng(2), np.float64)
        seed, lab = np.array([[0.3, 0.1], [-0.2, 0.5]]), one_hot(0, 2, np.float64)
        tr = m.rollout(seed, lab, n_steps=1, rng=Rng(6))
        r = Rng(6)
        z0 = r.normal((1, 3))[0]
        eps = r.normal((1, 3))[0]
        g, s_enc = m.encoder_step(seed, z0, None, lab)
        z = g.mean + g.stddev * eps
        pose, s_dec = m.decoder_step(seed, z, None, lab)
        np.testing.assert_allclose(tr.pose_sequence()[0], pose, atol=1e-14)
        np.testing.assert_allclose(tr.latent_sequence()[0], z, atol=1e-14)
        np.testing.assert_allclose(tr.encoder_states()[0].hidden, s_enc.hidden, atol=1e-14)
        np.testing.assert_allclose(tr.decoder_states()[0].memory, s_dec.memory, atol=1e-14)

    def test_batched_rows_match_single(self):
        m = ACTVAE.init(tiny_config(), Rng(2), np.float64)
        seeds = np.array([[[0.3, 0.1], [-0.2, 0.5]], [[0.0, 0.0], [0.4, -0.4]]])
        labs = np.stack([one_hot(0, 2), one_hot(1, 2)])
        tr = m.rollout(seeds, labs, sample=False)
        for i in range(2):
            one = m.rollout(seeds[i], labs[i], sample=False)
            np.testing.assert_allclose(tr.pose_sequence()[i], one.pose_sequence(), atol=1e-14)

    def test_label_ignored_without_action_label(self):
        m = ACTVAE.init(ModelConfig.ablation("wo_a", J=2, C=3, d_z=3, enc_hidden=4,
                                             dec_hidden=4, n_steps=3), Rng(0))
        seed = np.full((2, 2), 0.2)
        a = m.rollout(seed, one_hot(0, 3), rng=Rng(5))
        b = m.rollout(seed, one_hot(2, 3), rng=Rng(5))
        assert np.array_equal(a.poses, b.poses)
        full = ACTVAE(ModelConfig(J=2, C=3, d_z=3, enc_hidden=4, dec_hidden=4, n_steps=3),
                      m.params)
        assert not np.array_equal(full.rollout(seed, one_hot(0, 3), rng=Rng(5)).poses,
                                  full.rollout(seed, one_hot(2, 3), rng=Rng(5)).poses)

    def test_mean_rollout_has_zero_diversity(self):
        m = ACTVAE.init(tiny_config(), Rng(0))
        s = np.stack([pipeline.sample_sequences(m, np.full((2, 2), 0.1), 1, 1, Rng(i),
                                                sample=False)[0] for i in range(5)])
        assert diversity_std(s) == 0.0

    def test_training_and_sampling_share_rollout(self, monkeypatch):
        calls = []
        original = ACTVAE.rollout

        def spy(self, *a, **kw):
            calls.append(kw.get("sample"))
            return original(self, *a, **kw)

        monkeypatch.setattr(ACTVAE, "rollout", spy)
        cfg = tiny_config()
        m = ACTVAE.init(cfg, Rng(0))
        pipeline.sample_sequences(m, np.zeros((2, 2)), 0, 2, Rng(0))
        ds_recs = _tiny_records(cfg)
        training.train(ds_recs, cfg, training.Hyper(max_steps=1, batch=2))
        assert calls == [True, True]

    def test_errors(self):
        m = ACTVAE.init(tiny_config(), Rng(0))
        with pytest.raises(ValueError):
            m.rollout(np.zeros((2, 2)), one_hot(0, 2), n_steps=0, rng=Rng(0))
        with pytest.raises(ValueError):
            m.rollout(np.zeros((2, 2)), one_hot(0, 2), rng=None, sample=True)
        tr = m.rollout(np.zeros((2, 2)), one_hot(0, 2), rng=Rng(0))
        with pytest.raises(ValueError):
            vae_loss(tr, np.zeros((2, 2, 2)))


def _tiny_records(cfg):
    from actvae.data import PoseSequenceRecord

    r = np.random.default_rng(0)
    return [PoseSequenceRecord(f"r{i}", "a", i % cfg.C, r.uniform(10, 100, (cfg.n_steps + 2, cfg.J, 2)),
                               (128, 128)) for i in range(4)]


def _trace(cfg, poses, mu, lv):
    """Hand-built single-sequence trace."""
    N = poses.shape[0]
    z = np.zeros((N, 1, cfg.d_z))
    return RolloutTrace(batched=False, seed=np.zeros((1, cfg.pose_dim)),
                        label=np.zeros((1, cfg.C)), z_init=np.zeros((1, cfg.d_z)),
                        poses=poses.reshape(N, 1, -1), latents=z, mu=mu.reshape(N, 1, -1),
                        logvar=lv.reshape(N, 1, -1), eps=z, enc_h=z, enc_c=z, dec_h=z, dec_c=z)


class TestLoss:
    def test_perfect_prior_matching_is_zero(self):
        cfg = ModelConfig(J=2, C=2, d_z=3, n_steps=2)
        poses = np.random.default_rng(0).uniform(-1, 1, (2, 2, 2))
        tr = _trace(cfg, poses, np.zeros((2, 3)), np.zeros((2, 3)))
        assert vae_loss(tr, poses) == (0.0, 0.0, 0.0)

    def test_hand_case(self):
        cfg = ModelConfig(J=1, C=2, d_z=2, n_steps=1)
        tr = _trace(cfg, np.array([[[0.5, 0.0]]]), np.zeros((1, 2)), np.zeros((1, 2)))
        total, dis, div = vae_loss(tr, np.zeros((1, 1, 2)), 200.0, 0.002)
        assert (dis, div) == (0.5, 0.0)
        assert total == pytest.approx(100.0, abs=1e-12)

    def test_batch_mean(self):
        m = ACTVAE.init(tiny_config(), Rng(0), np.float64)
        seeds, labs, tgt = tiny_batch(m.config, B=4)
        tr = m.rollout(seeds, labs, rng=Rng(3))
        parts = []
        for i in range(4):
            one = _trace(m.config, tr.pose_sequence()[i], tr.mu[:, i], tr.logvar[:, i])
            parts.append(vae_loss(one, tgt[i]))
        np.testing.assert_allclose(vae_loss(tr, tgt), np.mean(parts, axis=0), rtol=1e-12)

    def test_nonnegative(self):
        r = np.random.default_rng(1)
        cfg = ModelConfig(J=2, C=2, d_z=3, n_steps=3)
        for _ in range(20):
            tr = _trace(cfg, r.uniform(-1, 1, (3, 2, 2)), r.normal(size=(3, 3)),
                        r.normal(size=(3, 3)))
            assert min(vae_loss(tr, r.uniform(-1, 1, (3, 2, 2)))) >= 0.0


class TestElbo:
    def test_maximum_at_perfect_fit(self):
        cfg = ModelConfig(J=3, C=2, d_z=2, n_steps=4)
        poses = np.random.default_rng(0).uniform(-1, 1, (4, 3, 2))
        tr = _trace(cfg, poses, np.zeros((4, 2)), np.zeros((4, 2)))
        b = 0.05
        assert elbo_report(tr, poses, b) == pytest.approx(4 * 3 * 2 * np.log(1 / (2 * b)),
                                                          rel=1e-12)

    def test_decreases_with_error(self):
        cfg = ModelConfig(J=2, C=2, d_z=2, n_steps=2)
        r = np.random.default_rng(1)
        tgt = r.uniform(-1, 1, (2, 2, 2))
        mu, lv = r.normal(size=(2, 2)), r.normal(size=(2, 2))
        prev = None
        for delta in (0.0, 0.01, 0.1, 0.5):
            pred = tgt.copy()
            pred[1, 0, 1] += delta
            v = elbo_report(_trace(cfg, pred, mu, lv), tgt)
            if prev is not None:
                assert v < prev
            prev = v

    def test_scripted(self):
        cfg = ModelConfig(J=2, C=2, d_z=3, n_steps=3)
        r = np.random.default_rng(2)
        pred, tgt = r.uniform(-1, 1, (3, 2, 2)), r.uniform(-1, 1, (3, 2, 2))
        mu, lv = r.normal(size=(3, 3)), r.normal(size=(3, 3))
        b = 0.1
        want = 0.0
        for t in range(3):
            for v in (pred[t] - tgt[t]).ravel():
                want += -np.log(2 * b) - abs(v) / b
            want -= kl_to_standard_normal(DiagonalGaussian(mu[t], np.exp(0.5 * lv[t])))
        assert elbo_report(_trace(cfg, pred, mu, lv), tgt, b) == pytest.approx(want, abs=1e-10)


class TestGradients:
    @pytest.mark.parametrize("ablation", sorted(ABLATIONS))
    def test_ablations_match_finite_differences(self, kernel_backend, ablation):
        cfg = ModelConfig.ablation(ablation, J=2, C=2, d_z=3, enc_hidden=5, dec_hidden=4,
                                   n_steps=3)
        m = ACTVAE.init(cfg, Rng(1), np.float64)
        seeds, labs, tgt = tiny_batch(cfg)
        worst, where = finite_difference_check(m, seeds, labs, tgt)
        assert worst < 1e-3, f"{where}: {worst:.2e}"

    def test_direct_emission(self):
        cfg = tiny_config(residual=False)
        m = ACTVAE.init(cfg, Rng(1), np.float64)
        seeds, labs, tgt = tiny_batch(cfg)
        worst, where = finite_difference_check(m, seeds, labs, tgt)
        assert worst < 1e-3, f"{where}: {worst:.2e}"

    def test_float32_gradients_close_to_float64(self):
        cfg = tiny_config()
        m64 = ACTVAE.init(cfg, Rng(1), np.float64)
        m32 = m64.astype(np.float32)
        seeds, labs, tgt = tiny_batch(cfg)
        g64 = m64.loss_and_grads(m64.rollout(seeds, labs, rng=Rng(2)), tgt)[3]
        g32 = m32.loss_and_grads(m32.rollout(seeds, labs, rng=Rng(2)), tgt)[3]
        for k in g64:
            assert g32[k].dtype == np.float32
            np.testing.assert_allclose(g32[k], g64[k], rtol=1e-3, atol=1e-3 * np.abs(g64[k]).max())
