"""Acceptance suite: eleven numbered end-to-end checks.

Each test prints exactly one [criterion N] PASS/FAIL line (visible with -s or
on failure) and enforces a fixed numeric bound. Everything is seeded; the
training criteria (5-8) use small fixed budgets tuned to run on one core.
"""

import math
import time

import numpy as np
import pytest

import gtno.tensor as T
from gtno.attention import (
    GTBlockParams, RopeConfig, graph_self_attention, kernel_oracle,
    rope_apply, rope_tables,
)
from gtno.cli import main
from gtno.graph import (
    PointSet, assemble_node_features, build_knn_graph, build_radius_graph,
    uniform_grid,
)
from gtno.model import ModelConfig, OperatorModel, load_checkpoint, rollout_to_array, save_checkpoint
from gtno.pde_data import (
    as_samples, gen_darcy, gen_darcy_family, gen_diffreact, gen_swe,
    read_dataset, simulate_diffreact, simulate_swe, solve_darcy, write_dataset,
)
from gtno.tensor import Tensor
from gtno.training import (
    TrainConfig, constant_baseline_nrmse, evaluate, mse_loss,
    nearest_neighbor_baseline_nrmse, train,
)


UNIT = ((0.0, 1.0), (0.0, 1.0))


def check(num, detail, ok):
    line = f"[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    assert ok, line


def attn_label(h, graph, params, rope=None, avg=True):
    """Run the attention layer in its rank-order convention, return rows in
    the caller's labeling so they line up with the label-space oracle."""
    _, _, _, rank_of, _ = graph.edge_arrays()
    order = graph.rank_order()
    with T.no_grad():
        out = graph_self_attention(Tensor(h[order]), graph, params,
                                   rope=rope, avg=avg).data
    return out[rank_of]


# ---------------------------------------------------------------------------
# 1. sparse attention equals the kernel-integral oracle


def test_criterion_1_attention_matches_kernel_oracle():
    rng = np.random.default_rng(101)
    t0 = time.monotonic()
    worst = 0.0
    for i in range(100):
        L = int(rng.integers(2, 13))
        H = int(rng.choice([1, 2, 4]))
        d = int(rng.choice([8, 16]))
        pts = PointSet(rng.uniform(0.0, 1.0, size=(L, 2)), UNIT)
        if rng.random() < 0.5:
            graph = build_radius_graph(pts, float(rng.uniform(0.3, 0.9)))
        else:
            graph = build_knn_graph(pts, int(rng.integers(1, min(6, L))) if L > 1 else 1)
        rope = None
        if (d // H) % 4 == 0 and rng.random() < 0.5:
            rope = RopeConfig()
        avg = bool(rng.random() < 0.5)
        h = rng.standard_normal((L, d))
        params = GTBlockParams.init(d, H, np.random.default_rng([101, i]))
        fast = attn_label(h, graph, params, rope=rope, avg=avg)
        slow = kernel_oracle(h, graph, params, rope=rope, avg=avg)
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    elapsed = time.monotonic() - t0
    check(1, f"100 instances, max |fast - oracle| = {worst:.2e} (tol 1e-10), "
             f"{elapsed:.1f}s (< 10s)", worst <= 1e-10 and elapsed < 10.0)


# ---------------------------------------------------------------------------
# 2. gradients: every primitive, then the full steady model


def _primitive_cases():
    """(name, scalar f, input) triples covering every differentiable op.

    Each f contracts the op output against a fixed random weight so every
    output coordinate influences the scalar; relu/sqrt inputs are kept away
    from their kinks.
    """
    rng = np.random.default_rng(202)
    mk = lambda *s: Tensor(rng.standard_normal(s), requires_grad=True)
    pos = lambda *s: Tensor(rng.uniform(0.5, 2.0, size=s), requires_grad=True)
    away = lambda *s: Tensor(rng.uniform(0.2, 1.0, size=s) *
                             rng.choice([-1.0, 1.0], size=s), requires_grad=True)
    w = lambda *s: Tensor(rng.standard_normal(s))
    wsum = lambda wt: (lambda y: T.mul(y, wt).sum())
    B = w(3, 4)
    M = w(4, 5)
    gain, bias = Tensor(np.ones(6)), Tensor(np.zeros(6))
    x6 = mk(4, 6)
    idx = np.array([0, 2, 2, 1])
    seg = np.array([0, 0, 1, 2, 2, 2])
    cos, sin = rope_tables(PointSet(rng.uniform(0, 1, (4, 2)), UNIT), 4, 1, RopeConfig())
    w34, w35, w43, w25, w38, w42 = w(3, 4), w(3, 5), w(4, 3), w(2, 5), w(3, 8), w(4, 2)
    w32, w62, w46, w4, w31, w44 = w(3, 2), w(6, 2), w(4, 6), w(4), w(3, 1), w(4, 4)
    return [
        ("add", lambda x: wsum(w34)(T.add(x, B)), mk(3, 4)),
        ("sub", lambda x: wsum(w34)(T.sub(x, B)), mk(3, 4)),
        ("mul", lambda x: wsum(w34)(T.mul(x, B)), mk(3, 4)),
        ("div", lambda x: wsum(w34)(T.div(x, B)), pos(3, 4)),
        ("neg", lambda x: wsum(w34)(T.neg(x)), mk(3, 4)),
        ("matmul", lambda x: wsum(w35)(T.matmul(x, M)), mk(3, 4)),
        ("transpose", lambda x: wsum(w43)(T.transpose(x)), mk(3, 4)),
        ("relu", lambda x: wsum(w34)(T.relu(x)), away(3, 4)),
        ("sqrt", lambda x: wsum(w34)(T.sqrt(x)), pos(3, 4)),
        ("reshape", lambda x: wsum(w25)(T.reshape(x, (2, 5))), mk(5, 2)),
        ("concat", lambda x: wsum(w38)(T.concat([x, B])), mk(3, 4)),
        ("slice_cols", lambda x: wsum(w25)(T.slice_cols(x, 1, 6)), mk(2, 8)),
        ("gather_rows", lambda x: wsum(w42)(T.gather_rows(x, idx)), mk(3, 2)),
        ("segment_sum", lambda x: wsum(w32)(T.segment_sum(x, seg, 3)), mk(6, 2)),
        ("segment_softmax", lambda x: wsum(w62)(T.segment_softmax(x, seg, 3)),
         mk(6, 2)),
        ("softmax", lambda x: wsum(w4)(T.softmax(x)), mk(4)),
        ("layer_norm_x", lambda x: wsum(w46)(T.layer_norm(x, gain, bias)), mk(4, 6)),
        ("layer_norm_gain", lambda g: wsum(w46)(T.layer_norm(x6, g, bias)),
         Tensor(np.ones(6), requires_grad=True)),
        ("layer_norm_bias", lambda b: wsum(w46)(T.layer_norm(x6, gain, b)),
         Tensor(np.zeros(6), requires_grad=True)),
        ("sum", lambda x: wsum(w4)(x.sum(axis=0)), mk(3, 4)),
        ("mean", lambda x: wsum(w31)(x.mean(axis=1, keepdims=True)), mk(3, 4)),
        ("rope_apply", lambda x: wsum(w44)(rope_apply(x, cos, sin)), mk(4, 4)),
    ]


def test_criterion_2_gradients_check_out():
    t0 = time.monotonic()
    worst_prim, worst_name = 0.0, ""
    for name, f, x in _primitive_cases():
        err = T.grad_check(f, x)
        if err > worst_prim:
            worst_prim, worst_name = err, name

    # full steady model on an 8-node instance, checked parameter by parameter
    # at each tensor's largest-gradient coordinate
    cfg = ModelConfig(d_model=8, n_heads=2, d_dec=8, gf_dim=4, radius=0.6)
    model = OperatorModel(cfg, seed=3)
    rng = np.random.default_rng(203)
    pts = uniform_grid(4, 2, ((0.0, 1.0), (0.0, 1.0)))
    graph = model.build_graph(pts)
    graph = assemble_node_features(graph, rng.normal(size=(8, 1)), with_coords=True)
    queries = PointSet(rng.uniform(0.0, 1.0, size=(5, 2)), bounds=pts.bounds)
    target = rng.normal(size=(5, 1))

    def loss_value():
        return mse_loss(model.forward_on_graph(graph, queries), target)

    model.zero_grads()
    with T.Tape():
        T.backward(loss_value())
    worst_model = 0.0
    step = 1e-5
    with T.no_grad():
        for name, p in model.named_parameters().items():
            flat_g = p.grad.reshape(-1)
            i = int(np.argmax(np.abs(flat_g)))
            flat = p.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value().item()
            flat[i] = orig - step
            dn = loss_value().item()
            flat[i] = orig
            fd = (up - dn) / (2.0 * step)
            worst_model = max(worst_model, abs(flat_g[i] - fd) / max(1e-8, abs(fd)))
    elapsed = time.monotonic() - t0
    check(2, f"primitives max rel err {worst_prim:.2e} ({worst_name}), "
             f"full model {worst_model:.2e} (tol 1e-4), {elapsed:.1f}s (< 60s)",
          worst_prim < 1e-4 and worst_model < 1e-4 and elapsed < 60.0)


# ---------------------------------------------------------------------------
# 3. graph builders equal brute force


def _brute_radius(pos, r):
    # same d2 expression as the builder so equality is exact, not approximate
    r2 = r * r
    out = []
    for i in range(pos.shape[0]):
        diff = pos - pos[i]
        d2 = (diff * diff).sum(axis=1)
        out.append(np.unique(np.append(np.flatnonzero(d2 <= r2), i)))
    return out


def _brute_knn(pos, k):
    L = len(pos)
    kk = min(k, L - 1)
    idx = np.arange(L)
    out = []
    for i in range(L):
        diff = pos - pos[i]
        d2 = (diff * diff).sum(axis=1)
        order = np.lexsort((idx, d2))  # self is first, d2 = 0
        out.append(np.sort(np.append(order[1:kk + 1], i)))
    return out


def test_criterion_3_graphs_match_brute_force():
    rng = np.random.default_rng(303)
    ok = True
    for _ in range(50):
        L = int(rng.integers(2, 401))
        s = float(rng.uniform(0.5, 2.0))
        pos = rng.uniform(0.0, 1.0, size=(L, 2)) * s
        pts = PointSet(pos, ((0.0, s), (0.0, s)))
        r1 = float(rng.uniform(0.05, 0.2))
        r2 = r1 + float(rng.uniform(0.05, 0.3))
        g1 = build_radius_graph(pts, r1)
        g2 = build_radius_graph(pts, r2)
        brute = _brute_radius(pos, r1)
        ok &= all(np.array_equal(a, b) for a, b in zip(g1.neighbors, brute))
        # monotonicity: every r1-edge survives at r2
        ok &= all(set(a.tolist()) <= set(b.tolist())
                  for a, b in zip(g1.neighbors, g2.neighbors))
        k = int(rng.integers(1, 9))
        gk = build_knn_graph(pts, k)
        ok &= all(np.array_equal(a, b)
                  for a, b in zip(gk.neighbors, _brute_knn(pos, k)))
        if not ok:
            break
    check(3, "50 point sets: radius == brute force, kNN == brute force, "
             "edge sets monotone in radius", ok)


# ---------------------------------------------------------------------------
# 4. symmetry suite


def test_criterion_4_symmetries():
    rng = np.random.default_rng(404)
    notes = []

    # (a) node-permutation equivariance of the attention layer, bitwise
    pts = PointSet(rng.uniform(0.0, 1.0, size=(30, 2)), UNIT)
    graph = build_radius_graph(pts, 0.35)
    params = GTBlockParams.init(16, 4, np.random.default_rng(44))
    h = rng.standard_normal((30, 16))
    base = attn_label(h, graph, params, rope=RopeConfig())
    perm = rng.permutation(30)
    gperm = build_radius_graph(PointSet(pts.positions[perm], bounds=pts.bounds), 0.35)
    out_p = attn_label(h[perm], gperm, params, rope=RopeConfig())
    perm_ok = np.array_equal(out_p, base[perm])
    notes.append(f"permutation bitwise={perm_ok}")

    # (b) locality: rows only change where the perturbed node is a neighbor
    g_loc = build_radius_graph(pts, 0.2)
    far = 7
    h2 = h.copy()
    h2[far] += 1.0
    a1 = attn_label(h, g_loc, params)
    a2 = attn_label(h2, g_loc, params)
    touched = np.flatnonzero(np.any(a1 != a2, axis=1))
    affected = {i for i in range(30) if far in g_loc.neighbors[i]}
    local_ok = set(touched.tolist()) <= affected
    notes.append(f"locality exact={local_ok}")

    # (c) translating every point leaves the rotary logits unchanged
    cfgr = RopeConfig()
    q = rng.standard_normal((30, 16))
    k = rng.standard_normal((30, 16))
    src, dst, _, _, _ = graph.edge_arrays()

    def edge_logits(points):
        cos, sin = rope_tables(points, 4, 4, cfgr)
        with T.no_grad():
            qr = rope_apply(Tensor(q), cos, sin).data
            kr = rope_apply(Tensor(k), cos, sin).data
        return (qr[dst] * kr[src]).reshape(len(src), 4, 4).sum(axis=2)

    l0 = edge_logits(pts)
    shifted = PointSet(pts.positions + np.array([13.25, -4.5]),
                       ((13.25, 14.25), (-4.5, -3.5)))
    l1 = edge_logits(shifted)
    rope_err = float(np.max(np.abs(l0 - l1)))
    notes.append(f"rope translation {rope_err:.2e}")

    # (d) presenting every input latent twice preserves the fused queries
    m = OperatorModel(ModelConfig(d_model=16, n_heads=4, d_dec=8, gf_dim=8), seed=4)
    h_in = Tensor(rng.normal(size=(13, 16)))
    h_q = Tensor(rng.normal(size=(5, 16)))
    with T.no_grad():
        once = m.cross_attention(h_q, h_in).data
        twice = m.cross_attention(h_q, Tensor(np.vstack([h_in.data, h_in.data]))).data
    dup_err = float(np.max(np.abs(once - twice)))
    notes.append(f"duplication {dup_err:.2e}")

    check(4, "; ".join(notes),
          perm_ok and local_ok and rope_err <= 1e-10 and dup_err <= 1e-12)


# ---------------------------------------------------------------------------
# 5. overfit sanity


def test_criterion_5_overfits_eight_samples():
    t0 = time.monotonic()
    samples = as_samples(gen_darcy(11, 8))
    cfg = TrainConfig(epochs=2000, batch_size=1, lr_init=3e-3, loss="rel_l2",
                      eval_every=100, seed=0)
    model = OperatorModel(ModelConfig(), seed=0)  # d=32, H=4, 2 blocks
    train(model, samples, cfg, eval_samples=samples)
    n = evaluate(model, samples)["nrmse"]
    elapsed = time.monotonic() - t0
    check(5, f"train nRMSE {n:.4f} (< 0.05) after <= 2000 epochs, "
             f"{elapsed:.0f}s (< 600s)", n < 0.05 and elapsed < 600.0)


# ---------------------------------------------------------------------------
# 6. desk-scale generalization beats both reference predictors


@pytest.fixture(scope="module")
def darcy_desk():
    return as_samples(gen_darcy(21, 200)), as_samples(gen_darcy(22, 50))


def test_criterion_6_generalizes_past_baselines(darcy_desk):
    t0 = time.monotonic()
    tr, te = darcy_desk
    model = OperatorModel(ModelConfig(), seed=0)
    train(model, tr, TrainConfig(), eval_samples=te)
    n = evaluate(model, te)["nrmse"]
    const = constant_baseline_nrmse([s.target for s in tr], [s.target for s in te])
    nn = nearest_neighbor_baseline_nrmse(
        [s.theta for s in tr], [s.target for s in tr],
        [s.theta for s in te], [s.target for s in te])
    elapsed = time.monotonic() - t0
    check(6, f"test nRMSE {n:.4f} < 0.5*constant {0.5 * const:.4f} and "
             f"< 1-NN {nn:.4f}, {elapsed:.0f}s (< 1800s)",
          n < 0.5 * const and n < nn and elapsed < 1800.0)


# ---------------------------------------------------------------------------
# 7. the same fields at coarser/finer resolution evaluate comparably


def test_criterion_7_resolution_transfer():
    fam = gen_darcy_family(31, 120, [16, 24, 32])
    split = {r: as_samples(d) for r, d in fam.items()}
    model = OperatorModel(ModelConfig(), seed=0)
    cfg = TrainConfig(epochs=100, batch_size=1, lr_init=2e-3, loss="rel_l2",
                      eval_every=25, seed=0)
    train(model, split[24][:100], cfg, eval_samples=split[24][100:])
    n = {r: evaluate(model, split[r][100:])["nrmse"] for r in (16, 24, 32)}
    ok = n[16] <= 2.0 * n[24] and n[32] <= 2.0 * n[24]
    check(7, f"nRMSE @16 {n[16]:.4f}, @24 {n[24]:.4f}, @32 {n[32]:.4f} "
             f"(off-resolution within 2x of native)", ok)


# ---------------------------------------------------------------------------
# 8. ablation trends


def _sweep_run(tr, te, mcfg, epochs, seed=0):
    model = OperatorModel(mcfg, seed=seed)
    cfg = TrainConfig(epochs=epochs, batch_size=1, lr_init=2e-3, loss="rel_l2",
                      eval_every=20, seed=seed)
    train(model, tr, cfg, eval_samples=te)
    return evaluate(model, te)["nrmse"]


def test_criterion_8_ablation_trends(darcy_desk):
    tr, te = darcy_desk
    tr = tr[:100]
    by_radius = {r: _sweep_run(tr, te, ModelConfig(radius=r), epochs=150)
                 for r in (0.04, 0.12)}
    by_pe = {p: _sweep_run(tr, te, ModelConfig(pos_enc=p), epochs=200)
             for p in ("none", "concat", "rope")}
    full = darcy_desk[0]
    by_n = {n: _sweep_run(full[:n], te, ModelConfig(), epochs=100)
            for n in (50, 100, 200)}
    radius_ok = by_radius[0.12] <= by_radius[0.04]
    pe_ok = by_pe["rope"] <= by_pe["concat"] <= by_pe["none"]
    size_ok = by_n[50] >= by_n[100] >= by_n[200]
    rnd = lambda d: {k: round(v, 4) for k, v in d.items()}
    check(8, f"radius {rnd(by_radius)}; pos_enc {rnd(by_pe)}; data size {rnd(by_n)}",
          radius_ok and pe_ok and size_ok)


# ---------------------------------------------------------------------------
# 9. data generators


def _dense_darcy(a, beta):
    """Direct dense solve of the interior 5-point harmonic-mean system."""
    ny, nx = a.shape
    hx, hy = 1.0 / (nx - 1), 1.0 / (ny - 1)
    idx = -np.ones((ny, nx), dtype=int)
    interior = [(j, i) for j in range(1, ny - 1) for i in range(1, nx - 1)]
    for m, (j, i) in enumerate(interior):
        idx[j, i] = m
    n = len(interior)
    A = np.zeros((n, n))
    b = np.full(n, beta)
    hm = lambda p, q: 2.0 * p * q / (p + q)
    for m, (j, i) in enumerate(interior):
        for (jj, ii, h) in ((j, i - 1, hx), (j, i + 1, hx),
                            (j - 1, i, hy), (j + 1, i, hy)):
            w = hm(a[j, i], a[jj, ii]) / h ** 2
            A[m, m] += w
            if idx[jj, ii] >= 0:
                A[m, idx[jj, ii]] -= w
    u = np.zeros((ny, nx))
    u[tuple(zip(*interior))] = np.linalg.solve(A, b)
    return u


def test_criterion_9_generators():
    notes, ok = [], True

    rng = np.random.default_rng(909)
    a = np.where(rng.random((17, 17)) < 0.5, 3.0, 12.0)
    darcy_err = float(np.max(np.abs(solve_darcy(a, 1.0) - _dense_darcy(a, 1.0))))
    ok &= darcy_err <= 1e-8
    notes.append(f"darcy vs dense {darcy_err:.2e}")

    h = simulate_swe(16, 16, 6)
    vol = h.sum(axis=(1, 2))
    vol_err = float(np.max(np.abs(vol - vol[0])) / abs(vol[0]))
    ok &= vol_err <= 1e-10
    sym = max(float(np.max(np.abs(f - f[::-1]))) for f in h)
    sym = max(sym, max(float(np.max(np.abs(f - f[:, ::-1]))) for f in h))
    sym = max(sym, max(float(np.max(np.abs(f - f.T))) for f in h))
    ok &= sym <= 1e-12
    notes.append(f"swe volume {vol_err:.2e}, symmetry {sym:.2e}")

    fr = simulate_diffreact(12, 12, 5, include_reactions=False, seed=5)
    mass = fr.sum(axis=(1, 2))
    mass_err = float(np.max(np.abs(mass - mass[0]) / np.maximum(1.0, np.abs(mass[0]))))
    ok &= mass_err <= 1e-10
    notes.append(f"diffusion mass {mass_err:.2e}")

    same = True
    for gen, args in ((gen_darcy, (7, 3, 9, 9)), (gen_swe, (7, 2, 10, 10, 2, 3)),
                      (gen_diffreact, (7, 2))):
        d1, d2 = gen(*args), gen(*args)
        same &= all(np.array_equal(x, y) for x, y in zip(d1.thetas, d2.thetas))
        same &= all(np.array_equal(x, y) for x, y in zip(d1.targets, d2.targets))
    ok &= same
    notes.append(f"regeneration byte-identical={same}")

    check(9, "; ".join(notes), ok)


# ---------------------------------------------------------------------------
# 10. persistence and rejection of corrupted files


def test_criterion_10_persistence(tmp_path):
    notes, ok = [], True

    ds = gen_darcy(17, 4, 9, 9)
    p1, p2 = tmp_path / "a.hmlt", tmp_path / "b.hmlt"
    write_dataset(str(p1), ds)
    write_dataset(str(p2), read_dataset(str(p1)))
    ds_ok = p1.read_bytes() == p2.read_bytes()
    ok &= ds_ok
    notes.append(f"dataset round trip bit-exact={ds_ok}")

    model = OperatorModel(ModelConfig(d_model=8, n_heads=2, d_dec=8, gf_dim=4), seed=9)
    c1, c2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, str(c1))
    save_checkpoint(load_checkpoint(str(c1)), str(c2))
    ck_ok = c1.read_bytes() == c2.read_bytes()
    ok &= ck_ok
    notes.append(f"checkpoint round trip bit-exact={ck_ok}")

    raw = p1.read_bytes()
    cases = {
        "magic": b"XMLT" + raw[4:],
        "version": raw[:4] + b"\x63\x00" + raw[6:],
        "truncated": raw[:-6],
    }
    codes = []
    for name, payload in cases.items():
        bad = tmp_path / f"{name}.hmlt"
        bad.write_bytes(payload)
        codes.append(main(["eval", "--checkpoint", str(c1), "--data", str(bad),
                           "--out", str(tmp_path / ("e_" + name))]))
    fmt_ok = codes == [3, 3, 3]
    ok &= fmt_ok
    notes.append(f"corrupt header exit codes {codes} (want 3,3,3)")

    check(10, "; ".join(notes), ok)


# ---------------------------------------------------------------------------
# 11. rollout decoder


def test_criterion_11_rollout_decoder():
    cfg = ModelConfig(d_model=16, n_heads=2, d_dec=16, gf_dim=8, in_channels=2,
                      mode="rollout", rollout_steps=5, radius=0.4)
    m = OperatorModel(cfg, seed=6)
    for lyr in m.mlp_prop.layers:
        lyr.w.data[:] = 0.0
        lyr.b.data[:] = 0.0
    rng = np.random.default_rng(611)
    pts = PointSet(rng.uniform(0.0, 1.0, size=(15, 2)), UNIT)
    theta = rng.normal(size=(15, 2))
    with T.no_grad():
        frozen = rollout_to_array(m.forward(pts, theta, pts))
    frozen_ok = all(np.array_equal(frozen[t], frozen[0]) for t in range(1, 5))

    m2 = OperatorModel(cfg, seed=7)
    with T.no_grad():
        long = rollout_to_array(m2.forward(pts, theta, pts, steps=91))
    sup = float(np.max(np.abs(long)))
    long_ok = long.shape[0] == 91 and np.all(np.isfinite(long)) and sup < 1e6

    check(11, f"frozen propagator frames identical={frozen_ok}; "
              f"91-step sup-norm {sup:.2e} (< 1e6)", frozen_ok and long_ok)
