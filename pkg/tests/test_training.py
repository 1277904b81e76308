from math import comb

import numpy as np
import pytest

from pctgan.labels import make_timing_label
from pctgan.ndgrad import Linear, Tensor, backward, graph_ops, leaky_relu, matmul, reshape
from pctgan.training import (
    NonFiniteLossError,
    TrainConfig,
    build_state,
    critic_step,
    discriminator_loss,
    gather_selected,
    generator_step,
    gp_interpolate,
    sample_batch,
    sample_triple,
    select_channels,
    train,
    triple_indices,
)

from oracles import central_diff, rel_errors


def _sequence(T=12, size=16, seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.uniform(-1, 1, (T, 5, size, size)).astype(np.float32)
    bounds = [0, 4, 8, T - 1]
    timings = np.zeros((T, 4))
    for n in range(1, 4):
        a, b = bounds[n - 1], bounds[n]
        for s in range(0, b - a + 1):
            timings[a + s] = make_timing_label(n, s, b - a, 3).values
    return {"frames": frames, "timings": timings, "boundaries": bounds, "seed": seed}


TINY = dict(image_size=16, m=3, z_dim=8, iterations=2, log_every=1)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.n_disc, c.n_step, c.n_ch, c.m, c.beta1, c.beta2) == (5, 3, 5, 128, 0.5, 0.9)
        assert (c.lam, c.nd, c.lr_d, c.lr_eg, c.z_dim) == (10.0, 2, 2e-4, 5e-5, 128)

    def test_text_roundtrip(self):
        c = TrainConfig(nd=3, cond_mode="concat", critic_sigmoid=False, lr_d=1e-3)
        assert TrainConfig.from_text(c.to_text()) == c

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_text("gamma=3\n")

    @pytest.mark.parametrize("kw", [dict(nd=6), dict(nd=0), dict(m=0), dict(lam=-1.0), dict(n_step=4)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestSampling:
    def test_three_frames_forced(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert triple_indices(3, rng).tolist() == [0, 1, 2]

    def test_too_short(self):
        with pytest.raises(ValueError):
            triple_indices(2, np.random.default_rng(0))

    def test_order_statistics(self):
        n, draws = 80, 10_000
        rng = np.random.default_rng(1)
        samples = np.array([triple_indices(n, rng) for _ in range(draws)])
        assert np.all(np.diff(samples, axis=1) > 0)
        total = comb(n, 3)
        j = np.arange(n)
        expected = [
            np.array([comb(n - 1 - k, 2) for k in j]) / total,
            j * (n - 1 - j) / total,
            np.array([comb(k, 2) for k in j]) / total,
        ]
        for pos in range(3):
            freq = np.bincount(samples[:, pos], minlength=n) / draws
            p = expected[pos]
            se = np.sqrt(p * (1 - p) / draws)
            assert np.all(np.abs(freq - p) <= 5 * se + 1e-12)

    def test_triple_sample_labels(self):
        seq = _sequence()
        t = sample_triple(seq, np.random.default_rng(2))
        np.testing.assert_array_equal(t.frames, seq["frames"][t.indices])
        np.testing.assert_array_equal(t.timings, seq["timings"][t.indices])

    def test_channel_selection_uniform(self):
        rng = np.random.default_rng(3)
        draws = 10_000
        counts = np.zeros(5)
        for _ in range(draws):
            sel = select_channels(5, 2, rng)
            assert len(set(sel.tolist())) == 2
            counts[sel] += 1
        p = 2 / 5
        se = np.sqrt(p * (1 - p) / draws)
        assert np.all(np.abs(counts / draws - p) <= 5 * se)

    def test_batch_packing(self):
        seqs = [_sequence(seed=0), _sequence(seed=1)]
        b = sample_batch(seqs, 6, 2, 5, np.random.default_rng(4))
        assert b.real.shape == (6, 6, 16, 16)
        assert np.all(b.channel_label.sum(axis=1) == 2)
        pair, labels = b.encoder_inputs()
        assert pair.shape == (18, 2, 16, 16) and labels.shape == (18, 3, 4)
        for k in range(3):
            rows = slice(6 * k, 6 * k + 6)
            np.testing.assert_array_equal(labels[rows, 0], b.timings[:, 0])
            np.testing.assert_array_equal(labels[rows, 1], b.timings[:, 2])
            np.testing.assert_array_equal(labels[rows, 2], b.timings[:, k])
            np.testing.assert_array_equal(pair[rows, 0], b.begin)

    def test_gather_matches_real_packing(self):
        rng = np.random.default_rng(5)
        m, C = 4, 5
        gen = rng.standard_normal((3 * m, C, 2, 2))
        sel = np.stack([select_channels(C, 2, rng) for _ in range(m)])
        out = gather_selected(Tensor(gen), sel).data
        for i in range(m):
            for k in range(3):
                for j in range(2):
                    np.testing.assert_array_equal(out[i, 2 * k + j], gen[k * m + i, sel[i, j]])


class TestInterpolation:
    def test_endpoints_and_midpoint(self):
        rng = np.random.default_rng(6)
        real, gen = rng.standard_normal((2, 3, 4, 5, 5))
        assert np.array_equal(gp_interpolate(real, gen, np.ones(3)), real)
        assert np.array_equal(gp_interpolate(real, gen, np.zeros(3)), gen)
        mid = gp_interpolate(np.full((2, 3), 2.0), np.zeros((2, 3)), np.full(2, 0.5))
        assert np.all(mid == 1.0)

    def test_per_element_eps(self):
        out = gp_interpolate(np.ones((2, 3)), np.zeros((2, 3)), np.array([0.25, 0.75]))
        np.testing.assert_array_equal(out, [[0.25] * 3, [0.75] * 3])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gp_interpolate(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2))


class TestCriticLoss:
    def test_constant_critic(self):
        x = np.random.default_rng(7).standard_normal((4, 3))
        const = lambda t: Tensor(np.full(t.shape[0], 0.3))
        loss, _ = discriminator_loss(const, x, x + 1, np.full(4, 0.5), 10.0)
        assert float(loss.data) == pytest.approx(10.0, abs=1e-6)

    def test_zero_penalty_coincident(self):
        w = Tensor(np.random.default_rng(8).standard_normal((3, 1)), requires_grad=True)
        critic = lambda t: reshape(matmul(t, w), (t.shape[0],))
        x = np.random.default_rng(9).standard_normal((5, 3))
        loss, _ = discriminator_loss(critic, x, x.copy(), np.full(5, 0.3), 0.0)
        assert abs(float(loss.data)) <= 1e-7
        assert "sqrt" not in graph_ops(loss)
        assert "matmul" in graph_ops(loss)

    def test_linear_critic_closed_form(self):
        rng = np.random.default_rng(10)
        w = Tensor(rng.standard_normal((6, 1)), requires_grad=True)
        critic = lambda t: reshape(matmul(t, w), (t.shape[0],))
        x = rng.standard_normal((4, 6))
        lam = 10.0
        loss, _ = discriminator_loss(critic, x, x.copy(), rng.uniform(size=4), lam)
        backward(loss)
        wv = w.data[:, 0]
        nw = np.linalg.norm(wv)
        want = 2 * lam * (nw - 1) * wv / nw
        np.testing.assert_allclose(w.grad.data[:, 0], want, rtol=0, atol=1e-8)

    def test_tiny_critic_finite_differences(self):
        rng = np.random.default_rng(11)
        l1 = Linear(6, 8, rng=rng, dtype=np.float64)
        l2 = Linear(8, 1, rng=rng, dtype=np.float64)
        for layer in (l1, l2):
            layer.weight.data = rng.standard_normal(layer.weight.shape) * 0.7
            layer.bias.data = rng.standard_normal(layer.bias.shape) * 0.1
        params = l1.parameters() + l2.parameters()
        assert sum(p.size for p in params) <= 1000
        critic = lambda t: reshape(l2(leaky_relu(l1(t), 0.2)), (t.shape[0],))
        x_real, x_gen = rng.standard_normal((2, 5, 6))
        eps = rng.uniform(size=5)
        loss, _ = discriminator_loss(critic, x_real, x_gen, eps, 10.0)
        backward(loss)
        analytic = [p.grad.data.copy() for p in params]
        numeric = central_diff(lambda: float(discriminator_loss(critic, x_real, x_gen, eps, 10.0)[0].data),
                               [p.data for p in params], h=1e-6)
        scale = max(np.max(np.abs(a)) for a in analytic)
        for a, n in zip(analytic, numeric):
            assert np.all(rel_errors(a, n, 1e-3 * scale) <= 1e-4)


class TestUpdates:
    def test_gradient_isolation(self):
        cfg = TrainConfig(**TINY)
        state = build_state(cfg)
        data = [_sequence()]
        rng = np.random.default_rng(12)
        critic_step(state, cfg, data, rng)
        m = state.model
        assert all(p.grad is None for p in m.encoder.parameters() + m.generator.parameters())
        assert any(p.grad is not None and np.any(p.grad.data) for p in m.discriminator.parameters())
        m.discriminator.zero_grad()
        generator_step(state, cfg, data, rng)
        assert all(p.grad is None for p in m.discriminator.parameters())
        assert all(p.requires_grad for p in m.discriminator.parameters())
        assert any(p.grad is not None and np.any(p.grad.data) for p in m.generator.parameters())
        assert any(p.grad is not None and np.any(p.grad.data) for p in m.encoder.parameters())

    def test_update_counts(self):
        cfg = TrainConfig(**TINY, n_disc=5)
        res = train(cfg, [_sequence()])
        opts = res.state.optimizers
        assert opts["discriminator"].state.step == 10
        assert opts["encoder"].state.step == 2 and opts["generator"].state.step == 2


def test_metrics_log_deterministic(tmp_path):
    cfg = TrainConfig(**TINY)
    data, val = [_sequence(seed=0), _sequence(seed=1)], [_sequence(seed=2)]
    train(cfg, data, tmp_path / "a", val=val)
    train(cfg, data, tmp_path / "b", val=val)
    a = (tmp_path / "a" / "metrics.tsv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.tsv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0] == "iteration\td_loss\tg_score\tgp_term\tfrechet_val"
    assert len(lines) == 3
    assert all(np.isfinite(float(v)) for ln in lines[1:] for v in ln.split("\t"))
    for tag in ("init", "final", "best"):
        assert (tmp_path / "a" / f"{tag}.pctc").is_file()


def test_non_finite_loss_aborts_with_snapshot(tmp_path):
    seq = _sequence()
    seq["frames"][:] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        train(TrainConfig(**TINY), [seq], tmp_path)
    assert info.value.snapshot["iteration"] == 1
    assert "d_grad_norm" in info.value.snapshot
    assert info.value.path.read_text().startswith("iteration\t1")


def test_rejects_bad_data():
    with pytest.raises(ValueError):
        train(TrainConfig(**TINY), [])
    seq = _sequence()
    seq["frames"] = seq["frames"] * 3
    with pytest.raises(ValueError, match="normalized"):
        train(TrainConfig(**TINY), [seq])
