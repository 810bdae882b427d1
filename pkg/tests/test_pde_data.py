import json

import numpy as np
import pytest

from crossmodal_pde import pde_data as pd
from crossmodal_pde.pde_data import (
    ADVECTION,
    BURGERS_NS,
    DIFFUSION_REACTION,
    DIFFUSION_SORPTION,
    GridSpec,
    SorptionParams,
    advection_frames_f64,
    build_dataset,
    burgers_solve,
    burgers_step,
    default_params,
    diffusion_reaction_solve,
    diffusion_sorption_solve,
    gen_advection,
    gen_burgers_ns_standin,
    gen_diffusion_reaction,
    gen_diffusion_sorption,
    load_dataset,
    periodic_x,
    sorption_x,
)
from crossmodal_pde.transformer import ConfigError


# -- advection -------------------------------------------------------------


def test_advection_target_is_exact_translation():
    grid = GridSpec(n_x=128, t_out=0.5)
    seed = 123
    u0, ut = advection_frames_f64(grid, beta=0.4, seed=seed)
    # independent reconstruction of the same seeded series, shifted by hand
    rng = np.random.default_rng(seed)
    a, b = pd._fourier_coefficients(rng)
    x = periodic_x(128)
    want = np.zeros(128)
    for k in range(1, 6):
        want += a[k - 1] * np.cos(2 * np.pi * k * (x - 0.2)) + b[k - 1] * np.sin(2 * np.pi * k * (x - 0.2))
    assert np.abs(ut - want).max() < 1e-12
    inst = gen_advection(grid, seed=seed)
    np.testing.assert_array_equal(inst.input.data, u0.astype(np.float32))
    np.testing.assert_array_equal(inst.target.data, ut.astype(np.float32))


def test_advection_sin_mode_translates():
    x = periodic_x(64)
    a = np.zeros(5)
    b = np.array([1.0, 0, 0, 0, 0])
    shifted = pd._fourier_eval(a, b, x - 0.2)
    np.testing.assert_allclose(shifted, np.sin(2 * np.pi * (x - 0.2)), atol=1e-12)


def test_advection_beta_zero_identity():
    grid = GridSpec(n_x=64, t_out=0.5)
    u0, ut = advection_frames_f64(grid, beta=0.0, seed=7)
    np.testing.assert_array_equal(u0, ut)


def test_advection_full_wrap_period():
    grid = GridSpec(n_x=64, t_out=2.5)  # beta * dt = 1: one full domain wrap
    u0, ut = advection_frames_f64(grid, beta=0.4, seed=9)
    assert np.abs(u0 - ut).max() < 1e-12


# -- diffusion-reaction ------------------------------------------------------


def test_diffusion_reaction_heat_oracle():
    # rho = 0 reduces to the heat equation with the analytic decay factor
    grid = GridSpec(n_x=128, t_out=0.05)
    x = periodic_x(128)
    u0 = np.sin(2 * np.pi * x)
    got = diffusion_reaction_solve(u0, grid, nu=0.5, rho=0.0)
    want = np.exp(-0.5 * (2 * np.pi) ** 2 * 0.05) * u0
    rel = np.linalg.norm(got - want) / np.linalg.norm(want)
    assert rel < 1e-3, f"relative L2 error {rel:.2e}"


def test_diffusion_reaction_fixed_points():
    grid = GridSpec(n_x=64, t_out=0.05)
    zeros = diffusion_reaction_solve(np.zeros(64), grid, nu=0.5, rho=1.0)
    np.testing.assert_array_equal(zeros, np.zeros(64))
    ones = diffusion_reaction_solve(np.ones(64), grid, nu=0.5, rho=1.0)
    np.testing.assert_allclose(ones, 1.0, atol=1e-12)


def test_diffusion_reaction_stability_guard():
    grid = GridSpec(n_x=128, t_out=0.05, dt_solver=1.0)
    with pytest.raises(ConfigError):
        gen_diffusion_reaction(grid, seed=0)


def test_diffusion_reaction_step_refinement():
    grid = GridSpec(n_x=64, t_out=0.02)
    inst = gen_diffusion_reaction(grid, seed=3)
    u0 = inst.input.data.astype(np.float64)
    dt_max = pd.DIFFUSION_STABILITY_LIMIT * grid.dx**2 / 0.5
    coarse = diffusion_reaction_solve(u0, GridSpec(n_x=64, t_out=0.02, dt_solver=0.5 * dt_max), 0.5, 1.0)
    fine = diffusion_reaction_solve(u0, GridSpec(n_x=64, t_out=0.02, dt_solver=0.25 * dt_max), 0.5, 1.0)
    rel = np.linalg.norm(coarse - fine) / np.linalg.norm(fine)
    assert rel < 1e-3


# -- diffusion-sorption -------------------------------------------------------


def test_sorption_c_zero_heat_oracle():
    # c = 0 removes retardation; Dirichlet heat equation has a clean mode solution
    sp = SorptionParams(diffusivity=5e-4, c=0.0, n=0.874)
    grid = GridSpec(n_x=128, t_out=20.0)
    x = sorption_x(128)
    u0 = (1.0 - x) + 0.5 * np.sin(np.pi * x)
    got = diffusion_sorption_solve(u0, grid, sp)
    want = (1.0 - x) + 0.5 * np.exp(-sp.diffusivity * np.pi**2 * 20.0) * np.sin(np.pi * x)
    rel = np.linalg.norm(got - want) / np.linalg.norm(want)
    assert rel < 1e-3


def test_sorption_steady_state():
    sp = SorptionParams(c=0.0)
    grid = GridSpec(n_x=64, t_out=5.0)
    x = sorption_x(64)
    got = diffusion_sorption_solve(1.0 - x, grid, sp)
    np.testing.assert_allclose(got, 1.0 - x, atol=1e-10)


def test_sorption_maximum_principle_sweep():
    grid = GridSpec(n_x=64, t_out=20.0)
    for seed in range(100):
        inst = gen_diffusion_sorption(grid, seed=seed)
        assert inst.target.data.min() >= -1e-9
        assert inst.target.data.max() <= 1.0 + 1e-9


def test_sorption_step_refinement():
    sp = SorptionParams()
    grid = GridSpec(n_x=64, t_out=20.0)
    inst = gen_diffusion_sorption(grid, seed=5)
    u0 = inst.input.data.astype(np.float64)
    coarse = diffusion_sorption_solve(u0, GridSpec(n_x=64, t_out=20.0, dt_solver=0.05), sp)
    fine = diffusion_sorption_solve(u0, GridSpec(n_x=64, t_out=20.0, dt_solver=0.025), sp)
    rel = np.linalg.norm(coarse - fine) / np.linalg.norm(fine)
    assert rel < 1e-3


# -- Burgers stand-in ----------------------------------------------------------


def test_burgers_constant_fixed_point():
    grid = GridSpec(n_x=64, t_out=0.5)
    got = burgers_solve(np.full(64, 1.5), grid, nu=0.1)
    np.testing.assert_allclose(got, 1.5, atol=1e-12)


def test_burgers_mean_conserved_per_step():
    rng = np.random.default_rng(0)
    u = rng.normal(size=128)
    dx = 1.0 / 128
    for _ in range(50):
        u_next = burgers_step(u, dx, 1e-4, nu=0.1)
        assert abs(u_next.mean() - u.mean()) < 1e-6
        u = u_next


def test_burgers_step_refinement():
    grid = GridSpec(n_x=128, t_out=0.5)
    inst = gen_burgers_ns_standin(grid, seed=2)
    u0 = inst.input.data.astype(np.float64)
    dt_max = pd.DIFFUSION_STABILITY_LIMIT * grid.dx**2 / 0.1
    coarse = burgers_solve(u0, GridSpec(n_x=128, t_out=0.5, dt_solver=0.5 * dt_max), 0.1)
    fine = burgers_solve(u0, GridSpec(n_x=128, t_out=0.5, dt_solver=0.25 * dt_max), 0.1)
    rel = np.linalg.norm(coarse - fine) / np.linalg.norm(fine)
    assert rel < 1e-3


def test_burgers_stability_guard():
    grid = GridSpec(n_x=128, t_out=0.5, dt_solver=1.0)
    with pytest.raises(ConfigError):
        gen_burgers_ns_standin(grid, seed=0)


# -- dataset files --------------------------------------------------------------


def test_dataset_deterministic_bytes(tmp_path):
    grid = GridSpec(n_x=32, t_out=0.5)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    build_dataset(ADVECTION, 5, 3, grid, seed=11, out_path=p1)
    build_dataset(ADVECTION, 5, 3, grid, seed=11, out_path=p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_payload_size_arithmetic(tmp_path):
    grid = GridSpec(n_x=128, t_out=0.5)
    path = tmp_path / "adv.bin"
    build_dataset(ADVECTION, 200, 50, grid, seed=1, out_path=path)
    raw = path.read_bytes()
    header_len = raw.index(b"\n") + 1
    assert len(raw) - header_len == 250 * 2 * 128 * 4
    header = json.loads(raw[:header_len].decode("utf-8"))
    assert header["n_train"] == 200 and header["n_test"] == 50
    assert header["family"] == ADVECTION


def test_dataset_round_trip(tmp_path):
    grid = GridSpec(n_x=32, t_out=0.05)
    path = tmp_path / "dr.bin"
    ds = build_dataset(DIFFUSION_REACTION, 4, 2, grid, seed=3, out_path=path)
    back = load_dataset(path)
    assert back.family == ds.family
    assert len(back.train) == 4 and len(back.test) == 2
    for a, b in zip(ds.train + ds.test, back.train + back.test):
        np.testing.assert_array_equal(a.input.data, b.input.data)
        np.testing.assert_array_equal(a.target.data, b.target.data)
        assert a.seed == b.seed


def test_train_test_seed_streams_disjoint():
    grid = GridSpec(n_x=32, t_out=0.5)
    ds = build_dataset(ADVECTION, 6, 6, grid, seed=4)
    train_seeds = {i.seed for i in ds.train}
    test_seeds = {i.seed for i in ds.test}
    assert not train_seeds & test_seeds


def test_all_families_generate():
    for family in (ADVECTION, DIFFUSION_REACTION, DIFFUSION_SORPTION, BURGERS_NS):
        grid = pd.default_grid(family, n_x=32)
        inst = pd.generate_instance(family, grid, default_params(family), seed=0)
        assert inst.input.data.shape == (32,)
        assert inst.target.data.shape == (32,)
