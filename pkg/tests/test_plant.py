"""Averaged wind-farm plant: network algebra, filter dynamics and events."""
import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdvisc.plant import (
    ClearFault,
    ClearWithoutFault,
    Cluster,
    Diverged,
    FarmTopology,
    Fault,
    GridParams,
    LoadStep,
    Plant,
    SetGridVoltage,
    SetScr,
    SetWind,
    TurbineSpec,
    UnknownTurbine,
)
from sdvisc.visc import ControlOutput
from oracles import lc_filter_fine, thevenin_from_scr

WB = 2 * math.pi * 50


def farm(n_clusters=2, per=3, grid=None, **kw):
    ids = [f"wt{i + 1}" for i in range(n_clusters * per)]
    clusters = [Cluster(complex(0.001, 0.01), ids[c * per:(c + 1) * per]) for c in range(n_clusters)]
    specs = {t: TurbineSpec(rating=1.0 / len(ids)) for t in ids}
    return Plant(FarmTopology(clusters), grid or GridParams(), specs, **kw)


def single(grid=None, spec=None, cable=1e-6j, pcc=1e-6j):
    spec = spec or TurbineSpec(rating=1.0)
    return Plant(FarmTopology([Cluster(cable, ["wt1"])], pcc_cable_z=pcc), grid or GridParams(), {"wt1": spec})


def hold(plant, u):
    """Apply fixed common-frame converter voltages."""
    for k, v in enumerate(u):
        plant.apply(k, ControlOutput(v_invd=v.real, v_invq=v.imag, frame=0.0, omega=1.0))


def no_load_voltages(plant):
    """Converter voltages that leave every grid-side current at zero."""
    n = plant.n
    base = plant.steady_state(np.zeros(n, dtype=complex))
    cols = [plant.steady_state(np.eye(n, dtype=complex)[k]) - base for k in range(n)]
    sens = np.array([c[2 * n:] for c in cols]).T
    return np.linalg.solve(sens, -base[2 * n:])


# -------------------------------------------------------------- parameters


def test_thevenin_impedance_from_scr():
    z = GridParams(scr=7.14, rx_ratio=0.1).z_th
    assert abs(z) == pytest.approx(0.14, abs=1e-3)
    assert abs(z) == pytest.approx(1 / 7.14, rel=1e-12)
    assert z.real / z.imag == pytest.approx(0.1, rel=1e-12)
    assert z == pytest.approx(thevenin_from_scr(7.14, 0.1), abs=1e-15)


@pytest.mark.parametrize("kw", [dict(scr=0.0), dict(scr=-1.0), dict(rx_ratio=-0.1)])
def test_grid_params_validation(kw):
    with pytest.raises(ValueError):
        GridParams(**kw)


@pytest.mark.parametrize("kw", [dict(c_f=0.0), dict(rating=0.0), dict(r_d=-1.0)])
def test_turbine_spec_validation(kw):
    with pytest.raises(ValueError):
        TurbineSpec(**kw)


def test_topology_validation():
    with pytest.raises(ValueError):
        FarmTopology([Cluster(0j, ["a"])])
    with pytest.raises(ValueError):
        FarmTopology([Cluster(1j, ["a"]), Cluster(1j, ["a"])])
    with pytest.raises(ValueError):
        FarmTopology([Cluster(1j, ["a"])], pcc_cable_z=0j)


def test_missing_turbine_spec():
    with pytest.raises(UnknownTurbine):
        Plant(FarmTopology([Cluster(1j, ["a", "b"])]), GridParams(), {"a": TurbineSpec()})


# ------------------------------------------------------------------ statics


def test_unenergized_equilibrium_has_flat_voltages():
    p = farm()
    u = no_load_voltages(p)
    hold(p, u)
    p.state.x = p.steady_state(u)
    for _ in range(200):
        p.step()
    assert np.max(np.abs(p.node_voltages() - 1.0)) < 1e-9
    assert np.max(np.abs(p.state.x[2 * p.n:])) < 1e-9


def test_reactive_injection_raises_pcc_voltage():
    p = single(GridParams(scr=1 / 0.14, rx_ratio=0.0))
    n = p.n
    # drive a purely reactive grid-side current so that Q at the PCC is 0.4 pu
    base = p.steady_state(np.zeros(1, dtype=complex))
    sens = p.steady_state(np.ones(1, dtype=complex)) - base
    i_target = -0.4j / 1.056
    u = (i_target - base[2 * n]) / sens[2 * n]
    hold(p, np.array([u]))
    for _ in range(int(0.5 / p.dt)):
        p.step()
    v = p.v_pcc()
    q = (v * np.conj(p.state.x[2 * n])).imag
    assert q == pytest.approx(0.4, abs=2e-3)
    assert abs(v) - 1.0 == pytest.approx(q * 0.14, abs=5e-3)  # linearized (RP + XQ)/V


def test_measure_power_formulas():
    p = single()
    n = p.n
    i_o = complex(0.5, -0.2)
    p.state.x[2 * n] = i_o
    # pick the source so the turbine node sits at exactly 1 + j0
    emf = (1.0 - p.mx[0, 0] * i_o) / p.me[0]
    p.inject_event(SetGridVoltage(abs(emf)))
    p.state.grid_angle = cmath.phase(emf)
    m = p.measure("wt1", 0.0)
    assert m.v_mag == pytest.approx(1.0, abs=1e-12)
    assert m.p_out == pytest.approx(0.5, abs=1e-12)
    assert m.q_out == pytest.approx(0.2, abs=1e-12)


def test_measure_rotation_round_trip():
    p = farm()
    rng = np.random.default_rng(3)
    p.state.x = rng.normal(size=3 * p.n) + 1j * rng.normal(size=3 * p.n)
    for delta in (0.3, -2.0, 7.5):
        a = p.measure("wt2", delta).rotated(0.0)
        b = p.measure("wt2", 0.0)
        for f in ("v_od", "v_oq", "i_cvd", "i_cvq", "i_od", "i_oq", "p_out", "q_out", "v_mag"):
            assert getattr(a, f) == pytest.approx(getattr(b, f), abs=1e-12)


def test_measure_all_matches_measure():
    p = farm()
    p.state.x = np.linspace(0.1, 0.9, 3 * p.n) * (1 + 0.5j)
    for k, m in enumerate(p.measure_all()):
        assert m == p.measure(p.ids[k], 0.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), load=st.floats(0.0, 0.5), scr=st.floats(1.2, 20.0))
def test_power_balance_residual(seed, load, scr):
    p = farm(grid=GridParams(scr=scr), load_pu=load)
    rng = np.random.default_rng(seed)
    p.state.x = rng.normal(size=3 * p.n) + 1j * rng.normal(size=3 * p.n)
    assert abs(p.power_balance_residual()) < 1e-6


def test_power_balance_holds_every_step():
    p = farm(load_pu=0.2)
    u = no_load_voltages(p) * 1.05 * cmath.exp(0.1j)
    hold(p, u)
    for _ in range(400):
        p.step()
        assert abs(p.power_balance_residual()) < 1e-6


# ---------------------------------------------------------------- dynamics


def test_quiescence_at_loaded_equilibrium():
    p = farm()
    u = no_load_voltages(p) * 1.03 * cmath.exp(0.05j)
    hold(p, u)
    p.state.x = p.steady_state(u)
    assert np.max(np.abs(p.derivatives())) < 1e-9
    x0 = p.state.x.copy()
    for _ in range(1000):
        p.step()
    assert np.max(np.abs(p.state.x - x0)) < 1e-9


def _filter_step_error(dt, v0, v1, start_at_rest):
    spec = TurbineSpec(rating=1.0)
    p = Plant(FarmTopology([Cluster(complex(0.001, 0.01), ["wt1"])], pcc_cable_z=complex(0.002, 0.02)),
              GridParams(scr=5.0), {"wt1": spec}, dt=dt)
    if start_at_rest:
        p.state.x = p.steady_state(np.array([v0]))
    x0 = p.state.x.copy()
    hold(p, np.array([v1]))
    t_end = 0.05
    got = [x0]
    for _ in range(int(round(t_end / dt))):
        p.step()
        got.append(p.state.x.copy())
    _, ref = lc_filter_fine(spec.l_f, spec.r_f, spec.c_f, spec.r_d, spec.z_tr.imag, spec.z_tr.real,
                            p.mx[0, 0], v1, p.me[0] * p.grid_emf(), WB, t_end, h=dt / 10, x0=x0)
    return float(np.max(np.abs(np.array(got) - ref[::10])))


def test_filter_voltage_step_matches_fine_oracle():
    # 0.1 pu converter-voltage step from a loaded operating point
    v0 = complex(1.05, 0.1)
    assert _filter_step_error(50e-6, v0, v0 + 0.1, True) < 1e-3


def test_filter_energization_converges_second_order():
    # a full 1 pu step into a de-energized filter excites the LC resonance hardest
    e = [_filter_step_error(dt, 0j, complex(1.05, 0.1), False) for dt in (50e-6, 25e-6)]
    assert e[0] < 1e-2
    assert 3.5 < e[0] / e[1] < 4.5


def test_step_advances_time_exactly():
    p = farm()
    for k in range(1, 101):
        p.step()
        assert p.state.t == pytest.approx(k * p.dt, abs=1e-15)


def test_deterministic_trajectories():
    def run():
        p = farm(grid=GridParams(h_grid=4.0))
        hold(p, no_load_voltages(p) * 1.02)
        p.dispatch()
        for k in range(600):
            if k == 200:
                p.inject_event(LoadStep(0.1))
            p.step()
        return p.state.x.tobytes(), p.state.grid_freq

    assert run() == run()


def test_diverged_on_excess_current():
    p = single()
    hold(p, np.array([5.0 + 0j]))
    with pytest.raises(Diverged) as err:
        for _ in range(20000):
            p.step()
    assert err.value.t > 0


# ------------------------------------------------------------------ events


def test_fault_sets_retained_emf_and_clear_restores():
    p = farm()
    u = no_load_voltages(p)
    hold(p, u)
    p.state.x = p.steady_state(u)
    p.inject_event(Fault(0.4))
    assert abs(p.grid_emf()) == pytest.approx(0.4)
    p.inject_event(ClearFault())
    assert abs(p.grid_emf()) == pytest.approx(1.0)


def test_fault_without_support_drops_pcc_to_retained_voltage():
    p = farm(load_pu=0.05)
    u = no_load_voltages(p)
    p.inject_event(Fault(0.4))
    # converters that float with the faulted network and carry no current
    u = no_load_voltages(p)
    hold(p, u)
    for _ in range(int(0.3 / p.dt)):
        p.step()
    assert abs(p.v_pcc()) == pytest.approx(0.4, abs=0.05)


def test_clear_without_fault():
    with pytest.raises(ClearWithoutFault):
        farm().inject_event(ClearFault())


def test_set_scr_rebuilds_network():
    p = single(GridParams(scr=7.14, rx_ratio=0.0))
    i = -0.3j
    p.state.x[2] = i
    v_strong = p.v_pcc()
    p.inject_event(SetScr(1.51))
    v_weak = p.v_pcc()
    assert v_strong == pytest.approx(1.0 + 1j / 7.14 * i * 1.0, abs=1e-5)
    assert v_weak == pytest.approx(1.0 + 1j / 1.51 * i * 1.0, abs=1e-5)
    with pytest.raises(ValueError):
        p.inject_event(SetScr(0.0))


def test_load_step_lowers_grid_frequency():
    p = farm(grid=GridParams(h_grid=4.0))
    u = no_load_voltages(p)
    hold(p, u)
    p.state.x = p.steady_state(u)
    p.dispatch()
    for _ in range(100):
        p.step()
    assert p.state.grid_freq == pytest.approx(1.0, abs=1e-12)
    p.inject_event(LoadStep(0.1))
    f = []
    for _ in range(4000):
        p.step()
        f.append(p.state.grid_freq)
    assert max(f) < 1.0 and min(f) < 1.0 - 1e-4


def test_infinite_inertia_freezes_frequency():
    p = farm()
    hold(p, no_load_voltages(p))
    p.inject_event(LoadStep(0.2))
    for _ in range(500):
        p.step()
    assert p.state.grid_freq == 1.0


def test_set_wind_and_unknown_turbine():
    p = farm()
    p.inject_event(SetWind(0.3, "wt2"))
    assert p.p_avail[p.index["wt2"]] == 0.3
    p.inject_event(SetWind(0.6))
    assert np.all(p.p_avail == 0.6)
    with pytest.raises(UnknownTurbine):
        p.inject_event(SetWind(0.1, "nope"))
    with pytest.raises(UnknownTurbine):
        p.measure("nope")


def test_unsupported_event():
    with pytest.raises(TypeError):
        farm().inject_event("boom")


def test_machine_power_bounded_by_wind():
    p = single()
    p.inject_event(SetWind(0.3))
    p.apply(0, ControlOutput(v_invd=1.0, i_sd=0.9))
    for _ in range(int(0.2 / p.dt)):
        p.step()
    assert p.state.p_machine[0] == pytest.approx(0.3, abs=1e-3)
    assert p.state.p_machine[0] <= 0.3
