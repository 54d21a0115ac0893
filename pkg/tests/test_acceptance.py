"""Release gate: nine end-to-end checks, one test per criterion.

Run with:

    pytest tests/test_acceptance.py -v -s

Each test prints a single ``[criterion N] PASS/FAIL ...`` line (-s shows
them). Criteria 6-8 share one trained classifier via a module fixture;
the whole gate takes a few minutes on one laptop core.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from swarmlens import autodiff as ad
from swarmlens import cli, gradcam
from swarmlens import io_formats as iof
from swarmlens.flow import FlowField, GrayImage, horn_schunck, PAIR_GAP_S, FRAME_GAP_S
from swarmlens.model import (ModelSpec, build_model, class_score,
                             forward_with_cache, ForwardPass)
from swarmlens.simulate import SimConfig, generate_episode
from swarmlens.traineval import (EpisodeSamples, Hyperparams, pointing_game,
                                 pointing_sample, samples_from_episode,
                                 split_dataset, train, evaluate, windowed_auc)

GOLDEN = Path(__file__).parent / "golden"


def report(n: int, ok: bool, detail: str) -> bool:
    print(f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
    return ok


# ---------------------------------------------------------------------------
# criterion 1 support: central finite differences over every parameter.
#
# Brute-force FD (two full forwards per scalar) would need ~1.1M forward
# passes. Instead each probe is applied analytically to the layer it
# touches and only the downstream layers are recomputed, batched over
# probes:
#   * conv weights are linear in the preactivation, so W_l[o,c,u,v] +/- eps
#     shifts stage-l preactivation channel o by eps times the padded shift
#     (u,v) of stage input channel c; one batch covers all output channels o.
#   * dense1 probes shift a single preactivation entry; tap probes shift
#     the whole dense1 preactivation by eps * W1[:, t].
# Probes whose +eps/-eps runs cross a relu sign or max-pool argmax boundary
# are excluded: central differences are invalid across a kink. The relative
# error denominator is floored at 1e-4 so FD rounding noise (~1e-9 absolute)
# on near-zero gradients is not amplified.

FD_EPS = 1e-5
FD_REL_FLOOR = 1e-4


def _conv_cols(xb: np.ndarray, k: int) -> np.ndarray:
    """im2col with leading batch axis: (B, C, H, W) -> (B, H*W, C*k*k)."""
    B, C, H, W = xb.shape
    p = k // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((B, C, k, k, H, W))
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u:u + H, v:v + W]
    return cols.reshape(B, C * k * k, H * W).transpose(0, 2, 1)


def _conv_batch(xb, w, b):
    B, _, H, W = xb.shape
    out = _conv_cols(xb, w.shape[2]) @ w.reshape(w.shape[0], -1).T
    return out.transpose(0, 2, 1).reshape(B, w.shape[0], H, W) + b[None, :, None, None]


def _pool_batch(xb):
    """2x2 max pool plus the argmax-of-4 fingerprint used for kink checks."""
    B, C, H, W = xb.shape
    q = xb.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    q = q.reshape(B, C, H // 2, W // 2, 4)
    return q.max(axis=-1), q.argmax(axis=-1)


def _np_forward(model, x):
    """Reference forward pass with every intermediate cached."""
    spec, p = model.spec, model.params
    caches = {"stage_in": [], "pre": [], "relu": []}
    h = x
    n = len(spec.conv_channels)
    for i in range(1, n + 1):
        caches["stage_in"].append(h)
        pre = _conv_batch(h[None], p[f"conv{i}.weight"], p[f"conv{i}.bias"])[0]
        caches["pre"].append(pre)
        r = np.maximum(pre, 0.0)
        caches["relu"].append(r)
        h = _pool_batch(r[None])[0][0] if i < n else r
    caches["flat"] = h.reshape(-1)
    z = caches["flat"]
    caches["dh"] = []
    caches["dr"] = [z]
    nd = len(spec.dense_units) + 1
    for i in range(1, nd + 1):
        hpre = p[f"dense{i}.weight"] @ z + p[f"dense{i}.bias"]
        caches["dh"].append(hpre)
        if i < nd:
            z = np.maximum(hpre, 0.0)
            caches["dr"].append(z)
    caches["score"] = caches["dh"][-1][0]
    return caches


def _head_scores(model, pre_b, stage):
    """Scores from perturbed stage preactivations plus kink fingerprints."""
    spec, p = model.spec, model.params
    n = len(spec.conv_channels)
    fps = [pre_b > 0]
    r = np.maximum(pre_b, 0.0)
    h = r
    for s in range(stage, n + 1):
        if s > stage:
            pre = _conv_batch(h, p[f"conv{s}.weight"], p[f"conv{s}.bias"])
            fps.append(pre > 0)
            r = np.maximum(pre, 0.0)
        if s < n:
            h, sel = _pool_batch(r)
            fps.append(sel)
        else:
            h = r
    z = h.reshape(h.shape[0], -1)
    nd = len(spec.dense_units) + 1
    for i in range(1, nd + 1):
        hpre = z @ p[f"dense{i}.weight"].T + p[f"dense{i}.bias"]
        if i < nd:
            fps.append(hpre > 0)
            z = np.maximum(hpre, 0.0)
    return hpre[:, 0], fps


def _fp_equal(fa, fb):
    B = fa[0].shape[0]
    ok = np.ones(B, bool)
    for a, b in zip(fa, fb):
        ok &= (a == b).reshape(B, -1).all(axis=1)
    return ok


def _fd_conv_stage(model, caches, li):
    w = model.params[f"conv{li}.weight"]
    O, C, k, _ = w.shape
    x_in = caches["stage_in"][li - 1]
    p0 = caches["pre"][li - 1]
    Hs, Ws = p0.shape[1:]
    pad = k // 2
    xp = np.pad(x_in, ((0, 0), (pad, pad), (pad, pad)))
    fd_w = np.empty_like(w)
    ok_w = np.empty(w.shape, bool)
    rows = np.arange(O)
    base = np.repeat(p0[None], O, axis=0)
    for c in range(C):
        for u in range(k):
            for v in range(k):
                dmap = FD_EPS * xp[c, u:u + Hs, v:v + Ws]
                P = base.copy()
                P[rows, rows] += dmap
                sp, fpp = _head_scores(model, P, li)
                P = base.copy()
                P[rows, rows] -= dmap
                sm, fpm = _head_scores(model, P, li)
                fd_w[:, c, u, v] = (sp - sm) / (2 * FD_EPS)
                ok_w[:, c, u, v] = _fp_equal(fpp, fpm)
    P = base.copy()
    P[rows, rows] += FD_EPS
    sp, fpp = _head_scores(model, P, li)
    P = base.copy()
    P[rows, rows] -= FD_EPS
    sm, fpm = _head_scores(model, P, li)
    fd_b = (sp - sm) / (2 * FD_EPS)
    return fd_w, ok_w, fd_b, _fp_equal(fpp, fpm)


def _dense_tail_scores(model, z2_b):
    p = model.params
    h2 = z2_b @ p["dense2.weight"].T + p["dense2.bias"]
    s = np.maximum(h2, 0.0) @ p["dense3.weight"].T + p["dense3.bias"]
    return s[:, 0], h2 > 0


def _fd_dense1(model, caches):
    xf = caches["flat"]
    h1 = caches["dh"][0]
    n_in, n_out = xf.size, h1.size
    fd_w = np.empty((n_out, n_in))
    ok_w = np.empty((n_out, n_in), bool)
    for i in range(n_out):
        hp = np.repeat(h1[None], n_in, axis=0)
        hm = hp.copy()
        hp[:, i] = h1[i] + FD_EPS * xf
        hm[:, i] = h1[i] - FD_EPS * xf
        sp, mp = _dense_tail_scores(model, np.maximum(hp, 0.0))
        sm, mm = _dense_tail_scores(model, np.maximum(hm, 0.0))
        fd_w[i] = (sp - sm) / (2 * FD_EPS)
        ok_w[i] = ((hp > 0) == (hm > 0)).all(axis=1) & (mp == mm).all(axis=1)
    hp = np.repeat(h1[None], n_out, axis=0)
    hm = hp.copy()
    r = np.arange(n_out)
    hp[r, r] += FD_EPS
    hm[r, r] -= FD_EPS
    sp, mp = _dense_tail_scores(model, np.maximum(hp, 0.0))
    sm, mm = _dense_tail_scores(model, np.maximum(hm, 0.0))
    fd_b = (sp - sm) / (2 * FD_EPS)
    ok_b = ((hp > 0) == (hm > 0)).all(axis=1) & (mp == mm).all(axis=1)
    return fd_w, ok_w, fd_b, ok_b


def _fd_dense2(model, caches):
    z1 = caches["dr"][1]
    h2 = caches["dh"][1]
    w3 = model.params["dense3.weight"][0]
    Pp = h2[:, None] + FD_EPS * z1[None, :]
    Pm = h2[:, None] - FD_EPS * z1[None, :]
    fd_w = (w3[:, None] * (np.maximum(Pp, 0.0) - np.maximum(Pm, 0.0))) / (2 * FD_EPS)
    ok_w = (Pp > 0) == (Pm > 0)
    fd_b = w3 * (np.maximum(h2 + FD_EPS, 0.0) - np.maximum(h2 - FD_EPS, 0.0)) / (2 * FD_EPS)
    ok_b = (h2 + FD_EPS > 0) == (h2 - FD_EPS > 0)
    return fd_w, ok_w, fd_b, ok_b


def _fd_tap(model, caches):
    """FD over every tap activation: probe t shifts dense1 by eps*W1[:, t]."""
    h1 = caches["dh"][0]
    w1 = model.params["dense1.weight"]
    Hp = h1[None, :] + FD_EPS * w1.T
    Hm = h1[None, :] - FD_EPS * w1.T
    sp, mp = _dense_tail_scores(model, np.maximum(Hp, 0.0))
    sm, mm = _dense_tail_scores(model, np.maximum(Hm, 0.0))
    fd = (sp - sm) / (2 * FD_EPS)
    ok = ((Hp > 0) == (Hm > 0)).all(axis=1) & (mp == mm).all(axis=1)
    return fd, ok


def _rel_err(fd, g, ok):
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(g)), FD_REL_FLOOR)
    rel = np.abs(fd - g) / denom
    return (rel[ok].max() if ok.any() else 0.0), int((~ok).sum())


def _fd_check_sample(model, x):
    """Worst relative error over every parameter and tap gradient for one x."""
    caches = _np_forward(model, x)
    fp = forward_with_cache(model, x)
    gs = ad.backward(class_score(fp, "unstable"))
    assert abs(caches["score"] - float(fp.logit.data[0])) < 1e-9

    worst, excluded, total = 0.0, 0, 0

    def take(fd, g, ok):
        nonlocal worst, excluded, total
        r, e = _rel_err(fd, g, ok)
        worst = max(worst, r)
        excluded += e
        total += fd.size

    for li in range(1, len(model.spec.conv_channels) + 1):
        fd_w, ok_w, fd_b, ok_b = _fd_conv_stage(model, caches, li)
        take(fd_w, gs.grad(fp.params[f"conv{li}.weight"]), ok_w)
        take(fd_b, gs.grad(fp.params[f"conv{li}.bias"]), ok_b)

    fd_w, ok_w, fd_b, ok_b = _fd_dense1(model, caches)
    take(fd_w, gs.grad(fp.params["dense1.weight"]), ok_w)
    take(fd_b, gs.grad(fp.params["dense1.bias"]), ok_b)

    fd_w, ok_w, fd_b, ok_b = _fd_dense2(model, caches)
    take(fd_w, gs.grad(fp.params["dense2.weight"]), ok_w)
    take(fd_b, gs.grad(fp.params["dense2.bias"]), ok_b)

    # final dense layer: the score is linear in it, FD is exact
    take(caches["dr"][2][None, :], gs.grad(fp.params["dense3.weight"]),
         np.ones((1, caches["dr"][2].size), bool))
    take(np.ones(1), gs.grad(fp.params["dense3.bias"]), np.ones(1, bool))

    fd_t, ok_t = _fd_tap(model, caches)
    take(fd_t, gs.grad(fp.tap).reshape(-1), ok_t)
    return worst, excluded, total


def test_01_gradients_match_finite_differences():
    t0 = time.perf_counter()
    model = build_model(ModelSpec(), seed=0)
    rng = np.random.default_rng(2024)
    worst, excluded, total = 0.0, 0, 0
    for _ in range(5):
        x = rng.standard_normal((4, 64, 64)) * 0.5
        w, e, n = _fd_check_sample(model, x)
        worst = max(worst, w)
        excluded += e
        total += n
    wall = time.perf_counter() - t0
    ok = worst < 1e-4 and wall < 60.0
    assert report(1, ok, f"max rel err {worst:.2e} (< 1e-4) over {total} gradients "
                         f"on 5 samples, {excluded} kink-excluded, {wall:.0f}s (< 60s)")


# ---------------------------------------------------------------------------


def _linear_head_pass(f: np.ndarray, w: np.ndarray) -> ForwardPass:
    """Network whose logit is sum_k w_k * sum_ij f[k,i,j]; tap is f itself."""
    k, h, wd = f.shape
    g = ad.Graph()
    tap = g.leaf(f, requires_grad=True)
    head_w = g.leaf(np.repeat(w, h * wd)[None, :], requires_grad=True)
    head_b = g.leaf(np.zeros(1), requires_grad=True)
    logit = ad.dense(ad.flatten(tap), head_w, head_b)
    return ForwardPass(graph=g, x=tap, params={}, tap=tap, logit=logit,
                       prob=ad.sigmoid(logit))


def test_02_importance_algebra_matches_oracles():
    rng = np.random.default_rng(7)
    g = rng.normal(size=(5, 7, 6))
    want_w = np.array([sum(g[k, i, j] for i in range(7) for j in range(6)) / 42.0
                       for k in range(5)])
    err_w = np.abs(gradcam.channel_weights(g) - want_w).max()

    a = rng.normal(size=5)
    f = rng.normal(size=(5, 7, 6))
    want_m = np.maximum(sum(a[k] * f[k] for k in range(5)), 0.0)
    err_m = np.abs(gradcam.importance_map(a, f, "unstable").values - want_m).max()

    w = rng.normal(size=4)
    fmaps = rng.normal(size=(4, 6, 6))
    fp = _linear_head_pass(fmaps, w)
    m = gradcam.importance_from_forward(fp, "unstable")
    want_e2e = np.maximum(np.einsum("k,khw->hw", w, fmaps), 0.0)
    err_e = np.abs(m.values - want_e2e).max()

    ok = err_w < 1e-12 and err_m < 1e-12 and err_e < 1e-10
    assert report(2, ok, f"weights err {err_w:.1e} (< 1e-12), map err {err_m:.1e} "
                         f"(< 1e-12), linear-head err {err_e:.1e} (< 1e-10)")


def test_03_top_fraction_gate_nearest_rank():
    rng = np.random.default_rng(3)
    values = rng.permutation(np.arange(1.0, 65.0)).reshape(8, 8)
    gated = gradcam.gate_top_fraction(gradcam.ImportanceMap(values, "unstable"), 0.05)
    kept = set(gated.values[gated.values > 0].tolist())
    ok = kept == {61.0, 62.0, 63.0, 64.0}
    assert report(3, ok, f"kept set {sorted(kept)} (expected [61, 62, 63, 64])")


def _catmull_rom(t: float) -> float:
    a = -0.5
    t = abs(t)
    if t <= 1.0:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1.0
    if t < 2.0:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def test_04_bicubic_upsampling_matches_kernel():
    const = gradcam.upsample_bicubic(
        gradcam.ImportanceMap(np.full((8, 8), 0.37), "unstable"), 512, 512)
    err_c = np.abs(const.values - 0.37).max()

    v = np.zeros((8, 8))
    v[3, 4] = 1.0
    up = gradcam.upsample_bicubic(gradcam.ImportanceMap(v, "unstable"), 512, 512)
    # interior impulse: the response factorizes into the 1-D kernel along
    # each axis at the half-pixel-aligned source offsets, negatives clipped
    si = (np.arange(512) + 0.5) * 8 / 512 - 0.5
    ky = np.array([_catmull_rom(s - 3.0) for s in si])
    kx = np.array([_catmull_rom(s - 4.0) for s in si])
    err_i = np.abs(up.values - np.maximum(np.outer(ky, kx), 0.0)).max()

    ok = err_c < 1e-12 and err_i < 1e-10
    assert report(4, ok, f"constant err {err_c:.1e} (< 1e-12), "
                         f"impulse err {err_i:.1e} (< 1e-10)")


# ---------------------------------------------------------------------------


def _band_limited_texture(n: int, seed: int) -> np.ndarray:
    """Mid-frequency sinusoid mixture: smooth gradients everywhere, so the
    brightness-constancy linearization behind Horn-Schunck holds at 1 px."""
    y, x = np.mgrid[0:n, 0:n] / n
    rng = np.random.default_rng(seed)
    img = np.full((n, n), 0.5)
    for kx, ky, amp in ((21, 0, 0.16), (0, 21, 0.16), (15, 15, 0.10), (18, -9, 0.08)):
        img += amp * np.sin(2 * np.pi * (kx * x + ky * y) + rng.uniform(0, 2 * np.pi))
    return np.clip(img, 0.0, 1.0)


def test_05_flow_recovers_unit_translations():
    t0 = time.perf_counter()
    margin = 8
    epes = []
    for seed in (0, 1):
        img = _band_limited_texture(128, seed)
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            moved = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
            f = horn_schunck(GrayImage(img), GrayImage(moved))
            inner = (slice(margin, -margin),) * 2
            epe = np.hypot(f.u[inner] - dx, f.v[inner] - dy)
            epes.append(epe.mean())
    wall = time.perf_counter() - t0
    mean_epe = float(np.mean(epes))
    ok = mean_epe < 0.3 and wall < 30.0
    assert report(5, ok, f"mean EPE {mean_epe:.3f} px (< 0.3) over 8 unit "
                         f"translations, worst {max(epes):.3f}, {wall:.0f}s (< 30s)")


# ---------------------------------------------------------------------------
# criteria 6-8 share one dataset and trained classifier


ARENA = 192
N_ANTS = 24
DUEL_RATE = 72.0


@pytest.fixture(scope="module")
def trained():
    t0 = time.perf_counter()
    groups = []
    for seed in range(40):
        label = 0 if seed < 20 else 1
        cfg = SimConfig(seed=seed, arena=ARENA, n_ants=N_ANTS, duel_rate=DUEL_RATE)
        ep = generate_episode(cfg, label=label)
        g = samples_from_episode(ep, f"ep-{seed:04d}", period=60.0)
        # skip t=0: the duel process needs spin-up time, so the opening
        # sample of an episode carries no class signal
        kept = [s for s in g.samples if s.timestamp >= 60.0]
        groups.append(EpisodeSamples(g.episode_id, g.label, kept))
    ds = split_dataset(groups, seed=0)
    model = build_model(ModelSpec(), seed=0)
    result = train(model, ds, Hyperparams(seed=0))
    rep = evaluate(result.model, ds, "test")
    per_class = sum(len(g.samples) for g in groups if g.label == 0)
    return {"model": result.model, "report": rep, "per_class": per_class,
            "seconds": time.perf_counter() - t0}


def test_06_classifier_separates_held_out_episodes(trained):
    auc = trained["report"].auc
    ok = auc >= 0.90 and trained["seconds"] < 900.0
    assert report(6, ok, f"held-out AUC {auc:.4f} (>= 0.90) from 40 episodes, "
                         f"{trained['per_class']} samples/class, "
                         f"{trained['seconds']:.0f}s (< 900s)")


def _one_full_duel(ep, t: float) -> bool:
    """Exactly one duel, active across every frame of the flow window.

    A duel that starts or ends inside the window leaves only a fraction
    of the window's flow, which is not the situation being scored.
    """
    t_end = t + PAIR_GAP_S + FRAME_GAP_S
    active = ep.duels_active(t, t_end)
    if len(active) != 1:
        return False
    return all(k in active[0].bbox_per_frame
               for k in range(ep.frame_at(t), ep.frame_at(t_end) + 1))


def test_07_saliency_points_at_duels(trained):
    t0 = time.perf_counter()
    # sparse episodes: the duel pair alone, at a rate that leaves most
    # windows duel-free, sampled until 25 single-duel windows are found
    samples = []
    seed = 40
    while len(samples) < 25 and seed < 120:
        cfg = SimConfig(seed=seed, arena=ARENA, n_ants=2, duel_rate=4.0)
        ep = generate_episode(cfg, label=1)
        for t in np.arange(60.0, 600.0, 60.0):
            if _one_full_duel(ep, float(t)):
                samples.append(pointing_sample(ep, float(t)))
                if len(samples) >= 25:
                    break
        seed += 1
    acc, baseline = pointing_game(trained["model"], samples)
    wall = time.perf_counter() - t0
    ok = acc >= 0.60 and acc >= 3.0 * baseline
    assert report(7, ok, f"pointing_accuracy {acc:.3f} (>= 0.60), "
                         f"random_baseline {baseline:.3f} (need >= {3 * baseline:.3f}), "
                         f"n={len(samples)}, {wall:.0f}s")


def test_08_windowed_auc_tracks_decaying_duel_rate(trained):
    t0 = time.perf_counter()
    reference = []
    for seed in (90, 91):
        cfg = SimConfig(seed=seed, arena=ARENA, n_ants=N_ANTS, duel_rate=DUEL_RATE)
        ep = generate_episode(cfg, label=0)
        reference += samples_from_episode(ep, f"ref-{seed}", period=60.0).samples
    firsts, lasts = [], []
    for seed in (80, 81, 82, 83):
        # duel rate decays to ~3% of its start by the end of the episode
        cfg = SimConfig(seed=seed, arena=ARENA, n_ants=N_ANTS,
                        duel_rate=DUEL_RATE, duel_rate_decay=0.006)
        ep = generate_episode(cfg, label=1)
        timeline = samples_from_episode(ep, f"decay-{seed}", period=20.0).samples
        aucs = windowed_auc(trained["model"], timeline, reference, window=4)
        k = len(aucs) // 3
        firsts.append(np.mean(aucs[:k]))
        lasts.append(np.mean(aucs[-k:]))
    first, last = float(np.mean(firsts)), float(np.mean(lasts))
    ok = first > last
    assert report(8, ok, f"windowed AUC first third {first:.3f} > last third "
                         f"{last:.3f} over 4 episodes, {time.perf_counter() - t0:.0f}s")


# ---------------------------------------------------------------------------


PIPELINE_CONFIG = """\
[sim]
n_ants = 6
arena = 128
episode_len = 240.0
duel_rate = 20.0

[model]
conv_channels = 4,8,16,32
dense_units = 32,16

[train]
max_epochs = 1
batch = 4

[explain]
upsample = 128
"""


def _run_pipeline(root: Path, config: str) -> dict[str, bytes]:
    frames = root / "frames"
    for label, seed in (("stable", 0), ("unstable", 100)):
        assert cli.main(["synth", "--label", label, "--episodes", "5",
                         "--seed", str(seed), "--config", config,
                         "--out", str(frames)]) == 0
    flows = root / "flows"
    assert cli.main(["flow", str(frames), "--config", config,
                     "--out", str(flows)]) == 0
    run = root / "run"
    assert cli.main(["train", str(flows), "--config", config, "--seed", "1",
                     "--out", str(run)]) == 0
    explained = root / "explained"
    assert cli.main(["explain", str(flows), str(frames), "--checkpoint",
                     str(run / "model.ckpt"), "--config", config,
                     "--out", str(explained)]) == 0
    evaled = root / "evaled"
    assert cli.main(["eval", str(flows), str(frames), "--checkpoint",
                     str(run / "model.ckpt"), "--config", config, "--seed", "1",
                     "--out", str(evaled)]) == 0
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _golden_roundtrips() -> list[str]:
    failures = []

    field = iof.read_flo(GOLDEN / "flow_2x2.flo")
    if not (np.array_equal(field.u, [[0.0, 0.5], [-1.0, 2.0]])
            and np.array_equal(field.v, [[1.0, -0.25], [0.125, -2.0]])):
        failures.append("flow_2x2.flo values")
    if iof.flo_bytes(field) != (GOLDEN / "flow_2x2.flo").read_bytes():
        failures.append("flow_2x2.flo bytes")

    m = iof.read_map(GOLDEN / "map_3x2.flo")
    if not np.array_equal(m, [[0.0, 0.5, 1.0], [1.5, -0.5, 0.25]]):
        failures.append("map_3x2.flo values")
    if iof.map_bytes(m) != (GOLDEN / "map_3x2.flo").read_bytes():
        failures.append("map_3x2.flo bytes")

    frame = iof.read_pgm(GOLDEN / "frame_4x3.pgm")
    if not np.array_equal(frame.pixels * 255.0, np.arange(12).reshape(3, 4)):
        failures.append("frame_4x3.pgm values")
    if iof.pgm_bytes(frame) != (GOLDEN / "frame_4x3.pgm").read_bytes():
        failures.append("frame_4x3.pgm bytes")

    rgb = iof.read_ppm(GOLDEN / "overlay_2x2.ppm")
    want = (np.arange(12).reshape(2, 2, 3) / 255.0).transpose(2, 0, 1)
    if not np.allclose(rgb, want, atol=1e-12):
        failures.append("overlay_2x2.ppm values")
    if iof.ppm_bytes(rgb) != (GOLDEN / "overlay_2x2.ppm").read_bytes():
        failures.append("overlay_2x2.ppm bytes")

    constants, params = iof.read_checkpoint(GOLDEN / "tiny.ckpt")
    if not (constants.get("note") == "golden" and constants.get("seed") == 7
            and np.array_equal(params["w"], [[1.5, -2.0]])
            and np.array_equal(params["b"], [0.25])):
        failures.append("tiny.ckpt values")
    repacked = {k: v for k, v in constants.items() if k != "params"}
    if iof.checkpoint_bytes(repacked, list(params.items())) != \
            (GOLDEN / "tiny.ckpt").read_bytes():
        failures.append("tiny.ckpt bytes")

    return failures


def test_09_reruns_and_formats_are_bit_exact(tmp_path):
    t0 = time.perf_counter()
    config = tmp_path / "pipeline.ini"
    config.write_text(PIPELINE_CONFIG)
    tree_a = _run_pipeline(tmp_path / "a", str(config))
    tree_b = _run_pipeline(tmp_path / "b", str(config))
    identical = (list(tree_a) == list(tree_b)
                 and all(tree_a[k] == tree_b[k] for k in tree_a))
    failures = _golden_roundtrips()
    wall = time.perf_counter() - t0
    ok = identical and not failures
    assert report(9, ok, f"pipeline rerun {'byte-identical' if identical else 'DIFFERS'} "
                         f"({len(tree_a)} files), golden round-trips "
                         f"{'all bit-exact' if not failures else 'FAILED: ' + ', '.join(failures)}, "
                         f"{wall:.0f}s")
