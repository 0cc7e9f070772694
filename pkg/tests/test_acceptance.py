"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete.  The training and benchmark criteria are marked
``slow``.
"""

import time

import numpy as np
import pytest

from supra.attention import supra_attention_ndarray, wrap_heads, attention_weights
from supra.autodiff import Tape
from supra.basis import (chebyshev_basis_2d, fourier_basis_2d, grid_points,
                         laplacian_eigenbasis)
from supra.data import darcy_solve_fd, gen_dataset, load_split
from supra.diagnostics import full_model_grad_check, run_bench
from supra.mesh import (assemble_lumped_mass, assemble_stiffness,
                        generate_annulus_mesh, generate_grid_mesh,
                        smallest_eigenpairs)
from supra.model import ModelConfig, SupraOperator
from supra.training import (TrainConfig, TrainingDiverged, fit_samples,
                            mean_baseline)

PI2 = np.pi ** 2


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# -- shared slow fixtures ----------------------------------------------------


@pytest.fixture(scope="module")
def darcy_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("acc") / "darcy"
    gen_dataset("darcy", (200, 50), 2024, path, grid=(32, 32))
    return path


@pytest.fixture(scope="module")
def darcy_overfit_samples(tmp_path_factory):
    path = tmp_path_factory.mktemp("acc") / "darcy8"
    gen_dataset("darcy", (8, 0), 123, path, grid=(32, 32))
    return load_split(path, "train")


def overfit_run(norm: str, seed: int = 0):
    """The 8-sample overfit recipe: 2000 steps, pure relative L2, no decay."""
    basis = fourier_basis_2d(4, 4, (32, 32))
    config = ModelConfig(hidden=32, layers=4, n_basis=64, heads=4, norm=norm,
                         seed=seed)
    model = SupraOperator(config, basis)
    train_config = TrainConfig(epochs=10 ** 6, batch_size=4, max_lr=3e-2,
                               weight_decay=0.0, loss="l2", seed=seed,
                               max_steps=2000, eval_every=250)
    return model, train_config


# -- criteria ----------------------------------------------------------------


def test_c1_parameterization_identity():
    start = time.time()
    rng = np.random.default_rng(0)
    coords = rng.standard_normal((3, 4))
    w_q, w_k, w_v = (rng.standard_normal((4, 4)) for _ in range(3))

    # matrix form against the explicit truncated double sum
    a_matrix = w_q.T @ w_k
    weights_expected = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(4):
                for ell in range(4):
                    acc += a_matrix[k, ell] * coords[i, k] * coords[j, ell]
            weights_expected[i, j] = acc / 2.0    # 1/sqrt(4)
    tape = Tape()
    head = wrap_heads(tape, [(w_q, w_k, w_v)])[0]
    weights = attention_weights(tape.constant(coords), head).value
    dev_sum = np.max(np.abs(weights - weights_expected))

    # C=1: softmax collapses to 1, output is the value map alone
    single = rng.standard_normal((1, 4))
    out_single = supra_attention_ndarray(single, [(w_q, w_k, w_v)])
    dev_single = np.max(np.abs(out_single - single @ w_v.T))

    # identical tokens: every output equals the value-mapped token
    token = rng.standard_normal(4)
    stacked = np.tile(token, (5, 1))
    out_same = supra_attention_ndarray(stacked, [(w_q, w_k, w_v)])
    dev_same = np.max(np.abs(out_same - token @ w_v.T))

    dev = max(dev_sum, dev_single, dev_same)
    elapsed = time.time() - start
    report("1 (parameterization identity)", dev <= 1e-12 and elapsed < 1.0,
           f"max deviation {dev:.2e} (tol 1e-12), {elapsed:.2f}s")


def test_c2_gradient_fidelity():
    start = time.time()
    err = full_model_grad_check(hidden=8, layers=2, n_basis=16, heads=2,
                                norm="layer", grid=(8, 8), h=1e-5)
    elapsed = time.time() - start
    report("2 (gradient fidelity)", err < 1e-5 and elapsed < 30.0,
           f"max relative error {err:.2e} (tol 1e-5), {elapsed:.1f}s")


def test_c3_basis_orthonormality():
    start = time.time()
    fourier = fourier_basis_2d(6, 6, (64, 64))
    chebyshev = chebyshev_basis_2d(9, 9, (64, 64))
    laplacian = laplacian_eigenbasis(generate_annulus_mesh(0.25, 1.0, (16, 64)), 64)
    devs = {"fourier": fourier.gram_deviation(),
            "chebyshev": chebyshev.gram_deviation(),
            "laplacian": laplacian.gram_deviation()}
    gram_ok = (devs["fourier"] <= 1e-12 and devs["chebyshev"] <= 1e-8
               and devs["laplacian"] <= 1e-8)
    rng = np.random.default_rng(1)
    round_trip = 0.0
    for basis in (fourier, chebyshev, laplacian):
        coords = rng.standard_normal((2, basis.size))
        back = basis.project(basis.reconstruct(coords))
        round_trip = max(round_trip, float(np.max(np.abs(back - coords))))
    elapsed = time.time() - start
    report("3 (basis orthonormality)",
           gram_ok and round_trip <= 1e-10 and elapsed < 10.0,
           f"gram {devs}, round trip {round_trip:.2e}, {elapsed:.1f}s")


def test_c4_bilinear_convergence():
    start = time.time()
    side = 64
    pts = grid_points(side, side)
    weights = np.full(side * side, 1.0 / (side * side))
    x, y = pts[:, 0], pts[:, 1]

    def zero_mean(f):
        return f - f.mean()

    # smooth functions inside the closure of the tensor-product span
    u = zero_mean(np.exp(np.sin(2 * np.pi * x))) * zero_mean(
        np.cos(2 * np.pi * y) + 0.4 * np.sin(4 * np.pi * y))
    v = zero_mean(np.sin(2 * np.pi * x) + 0.3 * np.exp(np.cos(2 * np.pi * x))) * \
        zero_mean(np.exp(0.5 * np.sin(2 * np.pi * y)))
    kernel = np.exp(
        0.5 * np.sin(2 * np.pi * x)[:, None] * np.cos(2 * np.pi * y)[None, :]
        + 0.3 * np.cos(2 * np.pi * y)[:, None] * np.sin(2 * np.pi * x)[None, :])
    quad = weights[:, None] * kernel * weights[None, :]
    dense_value = u @ quad @ v
    errors = []
    for modes in (2, 4, 6):
        basis = fourier_basis_2d(modes, modes, (side, side))
        a_matrix = basis.phi.T @ quad @ basis.phi
        coeff_u = basis.project(u[None, :])[0]
        coeff_v = basis.project(v[None, :])[0]
        errors.append(abs(coeff_u @ a_matrix @ coeff_v - dense_value))
    elapsed = time.time() - start
    report("4 (truncated bilinear form converges)",
           errors[0] > errors[1] > errors[2] and elapsed < 10.0,
           f"|trunc-dense| over N=16,64,144: "
           f"{errors[0]:.2e} > {errors[1]:.2e} > {errors[2]:.2e}, {elapsed:.1f}s")


def test_c5_laplacian_eigen_oracle():
    start = time.time()
    mesh = generate_grid_mesh(33, 33)
    stiffness = assemble_stiffness(mesh)
    lumped = assemble_lumped_mass(mesh)

    lam_d, _ = smallest_eigenpairs(stiffness, lumped, 5, bc="dirichlet",
                                   boundary_flags=mesh.boundary_flags)
    exact = np.array([2.0, 5.0, 5.0, 8.0, 10.0]) * PI2
    dirichlet_err = float(np.max(np.abs(lam_d - exact) / exact))

    lam_n, phi_n = smallest_eigenpairs(stiffness, lumped, 6)
    neumann_ok = abs(lam_n[0]) < 1e-9 and np.ptp(phi_n[:, 0]) < 1e-6 * np.abs(
        phi_n[:, 0]).max()

    rayleigh_dev = 0.0
    for k in range(6):
        v = phi_n[:, k]
        quotient = (v @ stiffness.matvec(v)) / (v @ (lumped * v))
        rayleigh_dev = max(rayleigh_dev, abs(quotient - lam_n[k]) / max(1.0, lam_n[k]))
    elapsed = time.time() - start
    report("5 (Laplacian eigen-oracle)",
           dirichlet_err < 0.02 and neumann_ok and rayleigh_dev < 1e-10
           and elapsed < 60.0,
           f"dirichlet err {dirichlet_err:.3%}, neumann lam1 {lam_n[0]:.1e}, "
           f"rayleigh dev {rayleigh_dev:.1e}, {elapsed:.1f}s")


@pytest.mark.slow
def test_c6_darcy_solver_order():
    start = time.time()
    errors = []
    for n in (64, 128):
        xs = np.linspace(0, 1, n)
        grid_x, grid_y = np.meshgrid(xs, xs, indexing="ij")
        exact = np.sin(np.pi * grid_x) * np.sin(np.pi * grid_y)
        solution = darcy_solve_fd(np.ones((n, n)), 2 * PI2 * exact)
        errors.append(np.max(np.abs(solution - exact)))
    ratio = errors[0] / errors[1]
    elapsed = time.time() - start
    report("6 (Darcy solver order)", 3.4 <= ratio <= 4.6 and elapsed < 60.0,
           f"error ratio 64->128 = {ratio:.3f} (target 4 +- 15%), {elapsed:.1f}s")


@pytest.mark.slow
def test_c7_learning_capability(darcy_dataset, darcy_overfit_samples):
    start = time.time()
    basis = fourier_basis_2d(4, 4, (32, 32))
    config = ModelConfig(hidden=32, layers=4, n_basis=64, heads=4,
                         norm="instance", seed=0)
    model = SupraOperator(config, basis)
    train_config = TrainConfig(epochs=30, batch_size=4, max_lr=1e-3,
                               weight_decay=1e-4, loss="l2_h1", seed=0)
    train = load_split(darcy_dataset, "train")
    test = load_split(darcy_dataset, "test")
    result = fit_samples(model, train, test, train_config)
    baseline = mean_baseline(darcy_dataset, "test")
    margin_ok = result.best_test_rel_l2 <= 0.5 * baseline

    over_model, over_config = overfit_run("instance")
    over = fit_samples(over_model, darcy_overfit_samples, darcy_overfit_samples,
                       over_config)
    overfit_ok = over.best_test_rel_l2 < 1e-2
    elapsed = time.time() - start
    report("7 (learning capability)",
           margin_ok and overfit_ok and elapsed < 1800.0,
           f"test rel_l2 {result.best_test_rel_l2:.4f} vs baseline {baseline:.4f} "
           f"(need <= {0.5 * baseline:.4f}); overfit train rel_l2 "
           f"{over.best_test_rel_l2:.4f} (need < 1e-2); {elapsed:.0f}s")


@pytest.mark.slow
def test_c8_irregular_domain(tmp_path_factory):
    start = time.time()
    path = tmp_path_factory.mktemp("acc") / "annulus"
    gen_dataset("annulus_poisson", (200, 50), 4048, path,
                annulus_resolution=(16, 64))
    mesh = generate_annulus_mesh(0.25, 1.0, (16, 64))
    basis = laplacian_eigenbasis(mesh, 64)
    config = ModelConfig(hidden=32, layers=4, n_basis=64, heads=4,
                         norm="instance", seed=0)
    model = SupraOperator(config, basis)
    train_config = TrainConfig(epochs=30, batch_size=4, max_lr=1e-3,
                               weight_decay=1e-4, loss="l2", seed=0)
    train = load_split(path, "train")
    test = load_split(path, "test")
    result = fit_samples(model, train, test, train_config)
    baseline = mean_baseline(path, "test")
    elapsed = time.time() - start
    report("8 (irregular-domain path)",
           result.best_test_rel_l2 <= 0.5 * baseline and elapsed < 1800.0,
           f"test rel_l2 {result.best_test_rel_l2:.4f} vs baseline {baseline:.4f} "
           f"(need <= {0.5 * baseline:.4f}); {elapsed:.0f}s")


@pytest.mark.slow
def test_c9_complexity_shape(tmp_path):
    start = time.time()
    rows = run_bench(tmp_path / "bench.csv")
    times = {(r["impl"], r["M"]): r["wall_seconds"] for r in rows
             if r["C"] == 32 and r["N"] == 64}
    supra_ratios = (times[("supra", 4096)] / times[("supra", 1024)],
                    times[("supra", 16384)] / times[("supra", 4096)])
    ref_ratios = (times[("token_reference", 4096)] / times[("token_reference", 1024)],
                  times[("token_reference", 16384)] / times[("token_reference", 4096)])
    supra_ok = max(supra_ratios) <= 2.5
    ref_ok = min(ref_ratios) >= 8.0
    elapsed = time.time() - start
    report("9 (complexity shape)", supra_ok and ref_ok and elapsed < 300.0,
           f"supra growth per 4x M {supra_ratios[0]:.2f}x/{supra_ratios[1]:.2f}x "
           f"(need <= 2.5x), reference {ref_ratios[0]:.1f}x/{ref_ratios[1]:.1f}x "
           f"(need >= 8x); {elapsed:.0f}s")


@pytest.mark.slow
def test_c10_normalization_ablation(darcy_overfit_samples):
    start = time.time()
    outcomes = {}
    diverged = False
    try:
        model, config = overfit_run("none")
        result = fit_samples(model, darcy_overfit_samples, darcy_overfit_samples,
                             config)
        outcomes["none"] = result.best_test_rel_l2
    except TrainingDiverged:
        diverged = True
        outcomes["none"] = "diverged (NaN abort path exercised)"

    if diverged:
        ok = True
    else:
        for norm in ("instance", "layer"):
            model, config = overfit_run(norm)
            outcomes[norm] = fit_samples(model, darcy_overfit_samples,
                                         darcy_overfit_samples,
                                         config).best_test_rel_l2
        ok = (outcomes["none"] > outcomes["instance"]
              and outcomes["none"] > outcomes["layer"])
    elapsed = time.time() - start
    report("10 (normalization ablation)", ok and elapsed < 600.0,
           f"outcomes {outcomes}; {elapsed:.0f}s")
