"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (printed immediately and repeated in
the terminal summary) before asserting.  The expensive reconstruction runs
are shared through module-scoped fixtures.
"""
import csv
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from tomodip import autodiff as ad
from tomodip.autodiff import Tensor
from tomodip.cli import DENOISE_STAGE1_ITERS, main as cli_main
from tomodip.experiments import ct_problem, denoise_problem, reprojection_metrics
from tomodip.io import write_volume
from tomodip.metrics import psnr
from tomodip.network import NetworkParams, NetworkSpec, forward, init_network
from tomodip.operators import (
    ParallelBeamOperator,
    back_project,
    fbp_slice,
    forward_project,
    parallel_geometry,
    sparse_view_angles,
)
from tomodip.phantoms import make_phantom, random_phantom
from tomodip.prior import (
    PriorConfig,
    build_surrogate,
    eval_surrogate,
    smoothed_numerator,
    surrogate_gradient,
)
from tomodip.solver import SolverConfig, loss_F, run, warm_start

from conftest import record
from oracles import disk_image, numeric_grad, rel_err

# Desk-scale reconstruction protocol shared by criteria 7, 9 and 10.
CT_DIMS = (16, 64, 64)
CT_NETWORK = NetworkSpec(depth=3, channels=(8, 16, 16), skip_channels=(4, 4, 4))
CT_SOLVER = SolverConfig(
    lambda_ae=1.0, prior=PriorConfig(gamma=0.01), alpha_lr=1e-4, inner_steps=2,
    beta_step=0.1, outer_iters=800, two_stage=True, stage1_iters=6000,
    slice_schedule="cyclic", stage1_schedule="cyclic", seed=0, deterministic=True,
)
SWEEP_GAMMAS = (3e-1, 1e-1, 1e-2, 8e-3)


# ---------------------------------------------------------------------------
# 1. adjoint correctness
# ---------------------------------------------------------------------------

def test_criterion_01_adjoint():
    rng = np.random.default_rng(1)
    g = parallel_geometry((64, 64), sparse_view_angles(30))
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x, y = rng.standard_normal((64, 64)), rng.standard_normal(g.sino_shape)
        ax, aty = forward_project(x, g), back_project(y, g)
        worst = max(worst, abs(np.vdot(ax, y) - np.vdot(x, aty)) / (np.linalg.norm(ax) * np.linalg.norm(y)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-10 and secs < 10.0
    record(1, "adjoint dot test", ok, f"worst defect {worst:.2e} (<= 1e-10), {secs:.1f} s (< 10 s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. gradient oracle suite
# ---------------------------------------------------------------------------

def _probe_grad(fn, x0):
    x = Tensor(x0.copy(), requires_grad=True)
    ad.backward(fn(x))
    return x.grad


def _weighted(op, rng, x0):
    w = rng.standard_normal(op(Tensor(x0)).shape)
    return lambda t: ad.tensor_sum(ad.mul(op(t), Tensor(w)))


def _gradient_checks():
    rng = np.random.default_rng(2)
    x4 = rng.standard_normal((1, 2, 6, 6))
    x4 = np.where(np.abs(x4) < 1e-3, 0.5, x4)
    kernel = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    m = rng.standard_normal((4, 6))
    other = rng.standard_normal((1, 2, 6, 6))
    # (name, op acting on one Tensor, input, linear?)
    ops = [
        ("add", lambda t: ad.add(t, Tensor(other)), x4, True),
        ("sub", lambda t: ad.sub(Tensor(other), t), x4, True),
        ("mul", lambda t: ad.mul(t, t), x4, False),
        ("scale", lambda t: ad.scale(t, 2.5), x4, True),
        ("sum", ad.tensor_sum, x4, True),
        ("mse_sum", lambda t: ad.mse_sum(t, Tensor(other)), x4, False),
        ("leaky_relu", lambda t: ad.leaky_relu(t, 0.2), x4, False),
        ("sigmoid", ad.sigmoid, x4, False),
        ("pad2d", lambda t: ad.pad2d(t, 1, "reflection"), x4, True),
        ("conv2d", lambda t: ad.conv2d(t, Tensor(kernel), Tensor(bias)), x4, True),
        ("conv2d_stride2", lambda t: ad.conv2d(t, Tensor(kernel), None, stride=2), x4, True),
        ("conv2d_weight", lambda t: ad.conv2d(Tensor(x4), t, Tensor(bias)), kernel, True),
        ("reshape", lambda t: ad.reshape(t, (2, 36)), x4, True),
        ("upsample", lambda t: ad.upsample_nearest(t, 2), x4, True),
        ("concat", lambda t: ad.concat([t, Tensor(other)], axis=1), x4, True),
        ("linear_map", lambda t: ad.linear_map(t, lambda v: m @ v, lambda g: m.T @ g),
         rng.standard_normal(6), True),
    ]
    results = []
    for name, op, x0, linear in ops:
        fn = op if op(Tensor(x0)).data.ndim == 0 else _weighted(op, rng, x0)
        err = rel_err(_probe_grad(fn, x0), numeric_grad(lambda a: fn(Tensor(a)).item(), x0.copy()))
        results.append((name, err, 1e-6 if linear else 1e-4))

    # Network checks use a smaller step so that no LeakyReLU input crosses
    # its kink inside the difference stencil.
    fd = lambda f, x: numeric_grad(f, x, h=1e-6)
    spec = NetworkSpec(depth=1, channels=(4,), skip_channels=(2,))
    params = init_network(spec)
    xin = rng.uniform(0, 1, (1, 1, 8, 8))
    target = rng.uniform(0, 1, (1, 1, 8, 8))
    net_loss = lambda p, x: ad.mse_sum(forward(p, x), Tensor(target))
    ad.backward(net_loss(params, Tensor(xin)))
    base = params.arrays()
    for name in base:
        def f(w, name=name):
            return net_loss(NetworkParams.from_arrays(spec, dict(base, **{name: w}), False), Tensor(xin)).item()
        results.append((f"network[{name}]", rel_err(params.grads()[name], fd(f, base[name].copy())), 1e-4))
    frozen = params.frozen()
    results.append(("network[input]", rel_err(_probe_grad(lambda t: net_loss(frozen, t), xin),
                                              fd(lambda a: net_loss(frozen, Tensor(a)).item(), xin.copy())),
                    1e-4))

    op = ParallelBeamOperator(parallel_geometry((16, 16), sparse_view_angles(5)))
    z0 = rng.uniform(0, 1, (2, 16, 16))
    y = op.forward(rng.uniform(0, 1, (2, 16, 16)))
    results.append(("loss_F[z]", rel_err(_probe_grad(lambda t: loss_F(frozen, t, y, op), z0),
                                         fd(lambda a: loss_F(frozen, a, y, op).item(), z0.copy())),
                    1e-4))
    params.zero_grad()
    ad.backward(loss_F(params, z0, y, op))
    for name in ("down0.w", "out.b"):
        def f(w, name=name):
            return loss_F(NetworkParams.from_arrays(spec, dict(base, **{name: w}), False), z0, y, op).item()
        results.append((f"loss_F[{name}]", rel_err(params.grads()[name], fd(f, base[name].copy())), 1e-4))

    cfg = PriorConfig(gamma=0.01)
    state = build_surrogate(rng.standard_normal((4, 5, 5)), cfg)
    zs = rng.standard_normal((4, 5, 5))
    results.append(("surrogate_gradient", rel_err(surrogate_gradient(zs, state, cfg),
                                                  numeric_grad(lambda a: eval_surrogate(a, state, cfg), zs.copy())),
                    1e-4))
    return results


def test_criterion_02_gradient_oracles():
    t0 = time.perf_counter()
    results = _gradient_checks()
    secs = time.perf_counter() - t0
    failures = [f"{n} {e:.1e}>{tol:.0e}" for n, e, tol in results if e > tol]
    worst = max(results, key=lambda r: r[1] / r[2])
    ok = not failures and secs < 120.0
    record(2, "gradient oracles", ok,
           f"{len(results)} checks, worst {worst[0]} {worst[1]:.1e} (tol {worst[2]:.0e}), {secs:.1f} s"
           + (f"; failing: {failures}" if failures else ""))
    assert ok


# ---------------------------------------------------------------------------
# 3. surrogate tangency and majorization
# ---------------------------------------------------------------------------

def test_criterion_03_tangency_and_majorization():
    rng = np.random.default_rng(3)
    cfg = PriorConfig(gamma=0.01)
    worst_tan, worst_slack = 0.0, np.inf
    for _ in range(1000):
        z_prev = rng.standard_normal((4, 8, 8)) * rng.uniform(0.01, 3)
        z = rng.standard_normal((4, 8, 8)) * rng.uniform(0.01, 3)
        state = build_surrogate(z_prev, cfg)
        scale = cfg.gamma / state.m_scalar
        exact_prev = smoothed_numerator(z_prev, cfg.delta) * scale
        worst_tan = max(worst_tan, abs(eval_surrogate(z_prev, state, cfg) - exact_prev) / exact_prev)
        worst_slack = min(worst_slack, eval_surrogate(z, state, cfg) - smoothed_numerator(z, cfg.delta) * scale)
    ok = worst_tan <= 1e-12 and worst_slack >= -1e-12
    record(3, "surrogate tangency/majorization", ok,
           f"1000 pairs, worst tangency {worst_tan:.1e} (<= 1e-12), min slack {worst_slack:.2e} (>= -1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# 4-5. surrogate descent and vanishing steps under the Lipschitz safeguard
# ---------------------------------------------------------------------------

SAFEGUARD_SOLVER = SolverConfig(
    prior=PriorConfig(gamma=0.01), beta_step=0.1, beta_safeguard="lipschitz", outer_iters=500,
    inner_steps=2, alpha_lr=1e-4, two_stage=True, stage1_iters=200, slice_schedule="cyclic", seed=0,
)
SAFEGUARD_NETWORK = NetworkSpec(depth=2, channels=(8, 16), skip_channels=(4, 4))


@pytest.fixture(scope="module")
def safeguarded_run():
    prob = ct_problem("sparse_view", dims=(16, 32, 32), views=20, phantom_seed=4)
    t0 = time.perf_counter()
    res = run(prob.measurements, prob.operator, SAFEGUARD_SOLVER, ground_truth=prob.ground_truth,
              network=SAFEGUARD_NETWORK)
    return res.log, time.perf_counter() - t0


def test_criterion_04_surrogate_descent(safeguarded_run):
    log, secs = safeguarded_run
    pre, post = log.column("Ls_pre")[:200], log.column("Ls_post")[:200]
    violations = int(np.sum(post > pre))
    ok = len(pre) == 200 and violations == 0
    worst = float(np.max((post - pre) / np.abs(pre)))
    record(4, "surrogate descent (lipschitz step)", ok,
           f"{violations}/200 iterations with L_s(z^k|z^k-1) > L_s(z^k-1|z^k-1); "
           f"max relative change {worst:+.2e}; run {secs:.0f} s")
    assert ok


def test_criterion_05_steps_shrink(safeguarded_run):
    log, _ = safeguarded_run
    dz = log.column("dz_norm")
    ok = len(dz) == 500 and dz[499] <= 0.1 * dz[9]
    record(5, "step length decay", ok, f"|dz| at k=10 {dz[9]:.3e}, at k=500 {dz[499]:.3e} "
           f"(ratio {dz[499] / dz[9]:.3f}, need <= 0.1)")
    assert ok


# ---------------------------------------------------------------------------
# 6. FBP sanity
# ---------------------------------------------------------------------------

def test_criterion_06_fbp_disk():
    img = disk_image(64, 0.3, supersample=8)
    g = parallel_geometry((64, 64), sparse_view_angles(180))
    value = psnr(fbp_slice(forward_project(img, g), g), img)
    ok = value >= 28.0
    record(6, "FBP disk, 180 views", ok, f"PSNR {value:.2f} dB (>= 28)")
    assert ok


# ---------------------------------------------------------------------------
# 7. sparse-view and limited-angle ordering
# ---------------------------------------------------------------------------

def _given_psnr(volume, prob):
    return reprojection_metrics(volume, prob.ground_truth, prob.geometry, n_novel=10)["given"]["psnr"]


def _mode_runs(kind, modes):
    """FBP score plus one run per mode from a shared first stage."""
    prob = ct_problem(kind, dims=CT_DIMS, views=20, phantom_seed=0)
    t0 = time.perf_counter()
    warm = warm_start(prob.measurements, prob.operator, CT_SOLVER, CT_NETWORK)
    out = {"fbp": _given_psnr(prob.operator.pseudo_inverse(prob.measurements), prob)}
    results = {}
    for mode in modes:
        res = run(prob.measurements, prob.operator, replace(CT_SOLVER, mode=mode),
                  ground_truth=prob.ground_truth, warm=warm)
        results[mode] = res
        out[mode] = _given_psnr(res.volume, prob)
    return out, results, time.perf_counter() - t0


@pytest.fixture(scope="module")
def sparse_view_runs():
    return _mode_runs("sparse_view", ("aseqdip", "aseqdip_tv", "fastdip"))


@pytest.fixture(scope="module")
def limited_angle_runs():
    return _mode_runs("limited_angle", ("aseqdip", "fastdip"))


def test_criterion_07_reconstruction_ordering(sparse_view_runs, limited_angle_runs):
    sv, _, sv_secs = sparse_view_runs
    la, _, la_secs = limited_angle_runs
    checks = {
        "fastdip>=aseqdip_tv": sv["fastdip"] >= sv["aseqdip_tv"],
        "aseqdip_tv>=aseqdip": sv["aseqdip_tv"] >= sv["aseqdip"],
        "aseqdip>=fbp": sv["aseqdip"] >= sv["fbp"],
        "fastdip>=fbp+3": sv["fastdip"] >= sv["fbp"] + 3.0,
        "time<=45min": sv_secs <= 45 * 60,
        "limited: fastdip>=aseqdip": la["fastdip"] >= la["aseqdip"],
    }
    ok = all(checks.values())
    scores = ", ".join(f"{k} {v:.2f}" for k, v in sv.items())
    la_scores = ", ".join(f"{k} {v:.2f}" for k, v in la.items())
    failed = [k for k, v in checks.items() if not v]
    record(7, "given-view PSNR ordering", ok,
           f"sparse-view [{scores}] dB in {sv_secs / 60:.1f} min; limited-angle [{la_scores}] dB "
           f"in {la_secs / 60:.1f} min" + (f"; failing: {failed}" if failed else ""))
    assert ok


# ---------------------------------------------------------------------------
# 8. denoising
# ---------------------------------------------------------------------------

DENOISE_SOLVER = SolverConfig(
    lambda_ae=1.0, prior=PriorConfig(gamma=0.01, axis=1), alpha_lr=1e-4, inner_steps=2,
    beta_step=0.9, beta_safeguard="lipschitz", outer_iters=800, z_init="measurements",
    two_stage=True, stage1_iters=DENOISE_STAGE1_ITERS, seed=0, deterministic=True,
)


def test_criterion_08_denoising():
    image = make_phantom(random_phantom(CT_DIMS, seed=0))[CT_DIMS[0] // 2]
    prob = denoise_problem(image, sigma=25.0, seed=0)
    noisy = psnr(prob.measurements, prob.ground_truth)
    t0 = time.perf_counter()
    warm = warm_start(prob.measurements, prob.operator, DENOISE_SOLVER, CT_NETWORK)
    warm_secs = time.perf_counter() - t0
    t0 = time.perf_counter()
    aseq = run(prob.measurements, prob.operator, replace(DENOISE_SOLVER, mode="aseqdip", outer_iters=2000),
               warm=warm).volume
    aseq_psnr = psnr(aseq, prob.ground_truth)
    aseq_secs = time.perf_counter() - t0
    parts, ok = [], True
    # A single slice has no neighbour along the slice axis: the prior acts
    # within the image, and both in-plane directions are reported.
    for axis in (1, 2):
        cfg = replace(DENOISE_SOLVER, prior=replace(DENOISE_SOLVER.prior, axis=axis))
        t0 = time.perf_counter()
        vol = run(prob.measurements, prob.operator, cfg, warm=warm).volume
        secs = warm_secs + time.perf_counter() - t0
        value = psnr(vol, prob.ground_truth)
        ok &= value >= noisy + 2.0 and value >= aseq_psnr - 0.2 and secs <= 600
        parts.append(f"fastdip axis {axis} {value:.2f} dB in {secs / 60:.1f} min")
    record(8, "denoising sigma=25", ok,
           f"noisy {noisy:.2f} dB (need fastdip >= {noisy + 2:.2f}), aseqdip {aseq_psnr:.2f} dB "
           f"({(warm_secs + aseq_secs) / 60:.1f} min), " + ", ".join(parts))
    assert ok


# ---------------------------------------------------------------------------
# 9. gamma sweep through the command line
# ---------------------------------------------------------------------------

def test_criterion_09_gamma_sweep(tmp_path):
    cfg = {"kind": "sparse_view", "dims": list(CT_DIMS), "views": 20, "n_novel": 10,
           "phantom_seed": 0, "network": CT_NETWORK.to_dict(), "solver": CT_SOLVER.to_dict()}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    out = tmp_path / "sweep"
    t0 = time.perf_counter()
    rc = cli_main(["sweep", "--config", str(tmp_path / "cfg.json"), "--out", str(out),
                   "--values", *[str(g) for g in SWEEP_GAMMAS]])
    secs = time.perf_counter() - t0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    best = [float(r["gamma"]) for r in rows if r["argmax"] == "1"]
    ok = rc == 0 and len(rows) == len(SWEEP_GAMMAS) and best != [3e-1]
    scores = ", ".join(f"{float(r['gamma']):g}: {float(r['given_psnr']):.2f}" for r in rows)
    record(9, "gamma sweep", ok, f"given-view PSNR [{scores}] dB, argmax gamma {best[0]:g} "
           f"(must not be 0.3), {secs / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 10. bit-exact reproducibility
# ---------------------------------------------------------------------------

def test_criterion_10_reproducible(sparse_view_runs):
    _, results, _ = sparse_view_runs
    first = results["fastdip"]
    prob = ct_problem("sparse_view", dims=CT_DIMS, views=20, phantom_seed=0)
    second = run(prob.measurements, prob.operator, CT_SOLVER, ground_truth=prob.ground_truth,
                 network=CT_NETWORK)
    same_volume = first.volume.tobytes() == second.volume.tobytes()
    same_weights = all(a.tobytes() == b.tobytes() for a, b in
                       zip(first.params.arrays().values(), second.params.arrays().values()))
    ok = same_volume and same_weights
    diff = float(np.max(np.abs(first.volume - second.volume)))
    record(10, "bit-identical reruns", ok,
           f"volume identical {same_volume}, weights identical {same_weights}, max |diff| {diff:.1e}")
    assert ok
