"""End-to-end acceptance checks, one test (or group) per criterion.

Verdicts are collected by the ``record`` fixture and printed as one line per
criterion in the terminal summary.  The training experiments (criteria 8-10)
take roughly 40 minutes on one CPU core.
"""

import itertools
import time

import numpy as np
import pytest

from pctgan import containers
from pctgan.checkpoint import load_checkpoint, load_model, save_checkpoint
from pctgan.cli import main as cli_main
from pctgan.data import make_splits, process_seeds
from pctgan.evaluation import (
    GaussianStats,
    evaluate_model,
    fit_gaussian,
    frechet_distance,
    predict_span,
    psd_matrix_sqrt,
)
from pctgan.forging import fit_normalization, generate_process, solid_volume
from pctgan.labels import make_timing_label
from pctgan.models import ModelConfig, PCTGAN
from pctgan.ndgrad import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Linear,
    Tensor,
    activation,
    backward,
    concat,
    global_sum_pool,
    gradient_penalty,
    input_gradient_norm,
    leaky_relu,
    matmul,
    power_iteration,
    reshape,
    tsum,
)
from pctgan.training import TrainConfig, discriminator_loss, gp_interpolate, train

from oracles import central_diff, percentile_full_sort, rel_errors


# -- 1. gradient correctness ----------------------------------------------------------

class _RandomNet:
    """conv -> batch norm -> activation -> transposed conv -> spectral conv, a linear skip
    branch concatenated onto the pooled features, then a linear head."""

    def __init__(self, rng):
        c0, c1, c2 = (int(v) for v in rng.integers(1, 3, size=3))
        k = int(rng.choice([2, 3]))
        self.size = int(rng.choice([5, 6]))
        self.c0 = c0
        self.conv = Conv2d(c0, c1, kernel=k, stride=int(rng.integers(1, 3)), padding=int(rng.integers(0, 2)),
                           rng=rng, dtype=np.float64)
        self.bn = BatchNorm2d(c1, np.float64)
        self.act = str(rng.choice(["leaky_relu", "tanh", "sigmoid"]))
        self.slope = float(rng.uniform(0.05, 0.5))
        self.deconv = ConvTranspose2d(c1, c2, kernel=int(rng.choice([2, 3])), stride=int(rng.integers(1, 3)),
                                      padding=0, rng=rng, dtype=np.float64)
        self.sconv = Conv2d(c2, 3, kernel=2, stride=1, padding=0, spectral=True, rng=rng, dtype=np.float64)
        self.skip = Linear(c0 * self.size * self.size, 2, rng=rng, dtype=np.float64)
        self.head = Linear(5, 1, rng=rng, dtype=np.float64)
        self.layers = [self.conv, self.bn, self.deconv, self.sconv, self.skip, self.head]
        for layer in self.layers:
            for p in layer.parameters():
                p.data = rng.standard_normal(p.shape) * 0.5
        self.sconv.effective_weight()
        self.sconv.sn.frozen = True

    def params(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def __call__(self, x):
        h = activation(self.bn(self.conv(x)), self.act, self.slope)
        h = leaky_relu(self.sconv(self.deconv(h)), 0.2)
        pooled = global_sum_pool(h)
        flat = reshape(x, (x.shape[0], -1))
        feats = concat([pooled, self.skip(flat)], axis=1)
        return self.head(feats)


def test_c1_gradient_correctness(record):
    start = time.perf_counter()
    total = bad = 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        net = _RandomNet(rng)
        x = Tensor(rng.standard_normal((3, net.c0, net.size, net.size)), requires_grad=True)
        wts = rng.standard_normal((3, 1))
        loss_of = lambda: tsum(net(x) * Tensor(wts))
        backward(loss_of())
        leaves = [x] + net.params()
        analytic = [t.grad.data.copy() for t in leaves]
        numeric = central_diff(lambda: float(loss_of().data), [t.data for t in leaves], h=1e-6)
        scale = max(float(np.max(np.abs(a))) for a in analytic)
        errs = np.concatenate([rel_errors(a, n, 1e-6 * scale) for a, n in zip(analytic, numeric)])
        total += errs.size
        bad += int(np.sum(errs > 1e-5))
    elapsed = time.perf_counter() - start
    frac = 1 - bad / total
    ok = frac >= 0.99 and elapsed <= 120
    record(1, ok, f"{frac:.4%} of {total} coordinates within 1e-5 over 20 networks, {elapsed:.1f}s")
    assert ok


# -- 2. second-order penalty ---------------------------------------------------------

def test_c2_penalty_gradient(record):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    c1 = Conv2d(2, 4, kernel=3, stride=2, padding=1, spectral=True, rng=rng, dtype=np.float64)
    c2 = Conv2d(4, 6, kernel=3, stride=2, padding=1, spectral=True, rng=rng, dtype=np.float64)
    fc = Linear(6, 1, spectral=True, rng=rng, dtype=np.float64)
    layers = [c1, c2, fc]
    for layer in layers:
        for p in layer.parameters():
            p.data = rng.standard_normal(p.shape) * 0.5
        layer.effective_weight()
        layer.sn.frozen = True
    params = [p for layer in layers for p in layer.parameters()]
    n_params = sum(p.size for p in params)

    def critic(x):
        h = leaky_relu(c2(leaky_relu(c1(x), 0.2)), 0.2)
        return reshape(fc(global_sum_pool(h)), (x.shape[0],))

    x_hat = rng.standard_normal((4, 2, 8, 8))
    lam = 10.0
    penalty = lambda: gradient_penalty(input_gradient_norm(critic, Tensor(x_hat)), lam)
    backward(penalty())
    # the head bias cannot influence an input gradient, so it never receives one
    analytic = [p.grad.data.copy() if p.grad is not None else np.zeros(p.shape) for p in params]
    numeric = central_diff(lambda: float(penalty().data), [p.data for p in params], h=1e-6)
    scale = max(float(np.max(np.abs(a))) for a in analytic)
    worst = max(float(np.max(rel_errors(a, n, 1e-6 * scale))) for a, n in zip(analytic, numeric))

    w = Tensor(rng.standard_normal((10, 1)), requires_grad=True)
    lin = lambda x: reshape(matmul(x, w), (x.shape[0],))
    backward(gradient_penalty(input_gradient_norm(lin, Tensor(rng.standard_normal((5, 10)))), lam))
    wv = w.data[:, 0]
    nw = np.linalg.norm(wv)
    closed = 2 * lam * (nw - 1) * wv / nw
    lin_err = float(np.max(np.abs(w.grad.data[:, 0] - closed)))
    elapsed = time.perf_counter() - start
    ok = n_params <= 10_000 and worst <= 1e-4 and lin_err <= 1e-8 and elapsed <= 120
    record(2, ok, f"critic {n_params} params: max rel err {worst:.2e}; linear case abs err {lin_err:.1e}; "
                  f"{elapsed:.1f}s")
    assert ok


# -- 3. spectral norm ----------------------------------------------------------------

def test_c3_spectral_estimate(record):
    mats = []
    for cfg, seed in [(ModelConfig(), 0), (ModelConfig(cond_mode="concat", nd=5), 1)]:
        D = PCTGAN(cfg, seed).discriminator
        for layer in list(D.convs) + [D.fc] + ([D.embed] if D.embed is not None else []):
            mats.append((layer.weight.data.reshape(layer.weight.shape[0], -1).astype(np.float64),
                         layer.sn.u.astype(np.float64)))
    mats = mats[:10]
    errs = []
    for M, u in mats:
        sigma, _ = power_iteration(M, u, 50)
        exact = np.linalg.svd(M, compute_uv=False)[0]
        errs.append(abs(sigma - exact) / exact)
    ok = max(errs) <= 0.01
    record(3, ok, f"max relative error {max(errs):.2e} over {len(mats)} critic weight matrices")
    assert ok


# -- 4. labels -------------------------------------------------------------------------

def test_c4_labels_exhaustive(record):
    checked = 0
    failures = []
    for N in range(1, 5):
        for S in range(1, 51):
            for n in range(1, N + 1):
                prev = None
                for s in range(S + 1):
                    v = make_timing_label(n, s, S, N).values
                    nz = np.flatnonzero(v)
                    if abs(v.sum() - 1) > 1e-12 or nz.size > 2 or (nz.size == 2 and nz[1] - nz[0] != 1):
                        failures.append((N, S, n, s))
                    if prev is not None:
                        d = np.abs(v - prev)
                        if abs(d[n - 1] - 1 / S) > 1e-12 or abs(d[n] - 1 / S) > 1e-12 or d.sum() - 2 / S > 1e-12:
                            failures.append((N, S, n, s, "step"))
                    prev = v
                    checked += 1
            for n, S2 in itertools.product(range(1, N), range(1, 51)):
                if not np.array_equal(make_timing_label(n, S, S, N).values, make_timing_label(n + 1, 0, S2, N).values):
                    failures.append((N, S, n, S2, "boundary"))
    ok = not failures
    record(4, ok, f"{checked} labels checked, {len(failures)} failures")
    assert ok, failures[:5]


# -- 5. synthetic data -------------------------------------------------------------------

def test_c5_synthetic_data(record):
    seeds = process_seeds(2024, 14)
    procs = [generate_process(s) for s in seeds]
    boundary_ok = all(np.array_equal(p.sub_processes[k][-1].channels, p.sub_processes[k + 1][0].channels)
                      for p in procs for k in range(len(p.sub_processes) - 1))
    drift = 0.0
    outside_ok = True
    stacks = []
    for p in procs:
        frames, _ = p.arrays()
        stacks.append(frames)
        vols = np.array([solid_volume(f[0]) for f in frames])
        drift = max(drift, float(np.max(np.abs(vols - vols[0]) / vols[0])))
        outside = frames[:, 0] == 0
        outside_ok &= not np.any(frames[:, 1:][np.broadcast_to(outside[:, None], frames[:, 1:].shape)])
    determinism_ok = all(generate_process(s).arrays()[0].tobytes() == st.tobytes() for s, st in zip(seeds, stacks))
    allf = np.concatenate(stacks)
    stats = fit_normalization(allf)
    mask = allf[:, 0] > 0
    thr_err = 0.0
    for c in range(4):
        oracle = percentile_full_sort(np.abs(allf[:, c + 1][mask]), 99.7)
        thr_err = max(thr_err, abs(stats.thresholds[c] - oracle) / max(oracle, 1e-300))
    ok = boundary_ok and drift <= 0.03 and outside_ok and determinism_ok and thr_err <= 1e-6
    record(5, ok, f"boundaries {'equal' if boundary_ok else 'DIFFER'}; max volume drift {drift:.2%}; "
                  f"physics outside material {'zero' if outside_ok else 'NONZERO'}; "
                  f"deterministic {determinism_ok}; threshold rel err {thr_err:.1e}")
    assert ok


# -- 6. Fréchet metric ---------------------------------------------------------------

def test_c6_frechet(record):
    rng = np.random.default_rng(3)
    p = fit_gaussian(rng.standard_normal((40, 12)))
    self_d = frechet_distance(p, p)
    shift = frechet_distance(GaussianStats(np.zeros(4), np.eye(4)), GaussianStats(np.ones(4), np.eye(4)))
    sr, sg = rng.uniform(0.1, 4, 8), rng.uniform(0.1, 4, 8)
    mr, mg = rng.standard_normal(8), rng.standard_normal(8)
    diag = frechet_distance(GaussianStats(mr, np.diag(sr)), GaussianStats(mg, np.diag(sg)))
    diag_want = np.sum((mr - mg) ** 2) + np.sum((np.sqrt(sr) - np.sqrt(sg)) ** 2)
    A = rng.standard_normal((16, 16))
    A = A @ A.T
    S = psd_matrix_sqrt(A)
    recon = np.linalg.norm(S @ S - A) / np.linalg.norm(A)
    ok = abs(self_d) <= 1e-6 and abs(shift - 4.0) <= 1e-8 and abs(diag - diag_want) <= 1e-8 and recon <= 1e-6
    record(6, ok, f"d(P,P)={self_d:.1e}; shift case {shift:.10f}; diagonal err {abs(diag - diag_want):.1e}; "
                  f"sqrt recon {recon:.1e}")
    assert ok


# -- 7. loss identities ----------------------------------------------------------------

def test_c7_loss_identities(record):
    rng = np.random.default_rng(4)
    x_real, x_gen = rng.standard_normal((2, 6, 3, 4, 4))
    const = lambda t: Tensor(np.full(t.shape[0], -0.7))
    l_const = float(discriminator_loss(const, x_real, x_gen, rng.uniform(size=6), 10.0)[0].data)
    w = Tensor(rng.standard_normal((48, 1)), requires_grad=True)
    lin = lambda t: reshape(matmul(reshape(t, (t.shape[0], -1)), w), (t.shape[0],))
    l_zero = float(discriminator_loss(lin, x_real, x_real.copy(), rng.uniform(size=6), 0.0)[0].data)
    ends = (np.array_equal(gp_interpolate(x_real, x_gen, np.ones(6)), x_real)
            and np.array_equal(gp_interpolate(x_real, x_gen, np.zeros(6)), x_gen))
    ok = abs(l_const - 10.0) <= 1e-6 and abs(l_zero) <= 1e-7 and ends
    record(7, ok, f"constant critic loss {l_const:.9f}; coincident lam=0 loss {l_zero:.1e}; endpoints exact {ends}")
    assert ok


# -- 8/9. smoke-scale training -------------------------------------------------------------

SMOKE = dict(image_size=16, m=16, n_disc=5, iterations=200, nd=2, log_every=50)
SMOKE_SEEDS = (0, 1, 2, 3, 4)
PROBE_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def smoke_data():
    splits, _ = make_splits(0, {"train": 4, "val": 1, "test": 2}, image_size=16)
    return splits


@pytest.fixture(scope="module")
def smoke_runs(smoke_data, tmp_path_factory):
    cache = {}

    def run(mode: str, seed: int) -> dict:
        key = (mode, seed)
        if key not in cache:
            cfg = TrainConfig(**SMOKE, cond_mode=mode, seed=seed)
            out = tmp_path_factory.mktemp(f"{mode}_{seed}")
            t0 = time.perf_counter()
            res = train(cfg, smoke_data["train"], out, val=smoke_data["val"])
            elapsed = time.perf_counter() - t0
            init, _ = load_model(res.checkpoints["init"])
            final, _ = load_model(res.checkpoints["final"])
            cache[key] = {
                "elapsed": elapsed, "history": res.history, "out": out, "final": final,
                "score_init": evaluate_model(init, smoke_data["test"]),
                "score_final": evaluate_model(final, smoke_data["test"]),
            }
        return cache[key]

    return run


def _timing_spread(model, seq) -> float:
    """Smallest mean absolute difference between predictions at the four boundary timings."""
    b = seq["boundaries"]
    pred = predict_span(model, seq["frames"], seq["timings"], b[0], b[-1])
    picks = [pred[i - b[0]] for i in b]
    return min(float(np.mean(np.abs(p - q))) for p, q in itertools.combinations(picks, 2))


@pytest.mark.slow
def test_c8_smoke_training(record, smoke_runs, smoke_data):
    wins = 0
    finite = True
    slowest = 0.0
    spreads = []
    lines = []
    for seed in SMOKE_SEEDS:
        r = smoke_runs("projection", seed)
        slowest = max(slowest, r["elapsed"])
        finite &= all(np.isfinite(h[k]) for h in r["history"] for k in ("d_loss", "g_score", "gp_term"))
        wins += r["score_final"] < r["score_init"]
        spreads.append(_timing_spread(r["final"], smoke_data["test"][0]))
        lines.append(f"s{seed}:{r['score_init']:.3f}->{r['score_final']:.3f}")
    ok = finite and slowest <= 1800 and min(spreads) >= 0.01 and wins >= 4
    record(8, ok, f"final<init in {wins}/5 ({' '.join(lines)}); losses finite {finite}; "
                  f"min timing spread {min(spreads):.3f}; slowest run {slowest:.0f}s")
    assert ok


@pytest.mark.slow
def test_c9_ordering_probe(record, smoke_runs):
    cond = np.mean([smoke_runs("projection", s)["score_final"] for s in PROBE_SEEDS])
    none = np.mean([smoke_runs("none", s)["score_final"] for s in PROBE_SEEDS])
    ok = cond < none
    record(9, ok, f"soft: projection mean {cond:.4f} vs none mean {none:.4f} over {len(PROBE_SEEDS)} seeds")
    assert ok


# -- 10. persistence and CLI ---------------------------------------------------------------

def test_c10_persistence_and_cli(record, tmp_path):
    cfg = TrainConfig(image_size=16, m=4, z_dim=16, iterations=3, log_every=1)
    splits, _ = make_splits(5, {"train": 2, "val": 1}, image_size=16)
    res = train(cfg, splits["train"], tmp_path / "run", val=splits["val"])
    path = res.checkpoints["final"]
    model = res.state.model.eval()
    seq = splits["val"][0]
    before = predict_span(model, seq["frames"], seq["timings"], 0, 10)
    loaded, _ = load_model(path)
    after = predict_span(loaded, seq["frames"], seq["timings"], 0, 10)
    bit_exact = before.tobytes() == after.tobytes()
    state, cfg2 = load_checkpoint(path)
    save_checkpoint(tmp_path / "again.pctc", state, cfg2)
    byte_identical = (tmp_path / "again.pctc").read_bytes() == path.read_bytes()

    data_dir, run_dir = tmp_path / "data", tmp_path / "cli_run"
    smoke_cfg = tmp_path / "smoke.cfg"
    smoke_cfg.write_text("m=16\nn_disc=5\niterations=50\nlog_every=25\n")
    codes = {"gen-data": cli_main(["gen-data", "--out", str(data_dir), "--train-processes", "4",
                                   "--val-processes", "1", "--test-processes", "1", "--image-size", "16"])}
    codes["train"] = cli_main(["train", "--data", str(data_dir), "--out", str(run_dir), "--cond", "projection",
                               "--nd", "2", "--config", str(smoke_cfg)])
    test_seq = containers.load_sequence(data_dir / "test_000.pctd")
    containers.write_png(tmp_path / "b.png", test_seq["frames"][0, 0])
    containers.write_png(tmp_path / "e.png", test_seq["frames"][-1, 0])
    codes["predict"] = cli_main(["predict", "--ckpt", str(run_dir / "final.pctc"), "--begin", str(tmp_path / "b.png"),
                                 "--end", str(tmp_path / "e.png"), "--timings", "1:0/1,2:0/1,3:0/1,3:1/1",
                                 "--out", str(tmp_path / "frames")])
    codes["eval"] = cli_main(["eval", "--real", str(data_dir), "--ckpt", str(run_dir / "final.pctc"),
                              "--out", str(tmp_path / "report.tsv")])
    pipeline_ok = all(c == 0 for c in codes.values()) and len(list((tmp_path / "frames").glob("*.png"))) == 4
    ok = bit_exact and byte_identical and pipeline_ok
    record(10, ok, f"forward bit-exact {bit_exact}; re-save byte-identical {byte_identical}; exit codes {codes}")
    assert ok
