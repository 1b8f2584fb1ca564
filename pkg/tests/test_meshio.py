import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hemograph import meshio as io

from conftest import single_tet_mesh


def _same_mesh(a: io.Mesh, b: io.Mesh):
    assert a.positions.tobytes() == b.positions.tobytes()
    assert np.array_equal(a.tets, b.tets)
    assert np.array_equal(a.node_type, b.node_type)
    assert a.inlet_distance.tobytes() == b.inlet_distance.tobytes()
    assert a.wall_normals.tobytes() == b.wall_normals.tobytes()


# --- formats ----------------------------------------------------------------


def test_single_tet_round_trip(tmp_path):
    mesh = single_tet_mesh()
    io.save_mesh(mesh, tmp_path / "m.hsm")
    _same_mesh(mesh, io.load_mesh(tmp_path / "m.hsm"))


def test_mesh_header_layout():
    data = io.mesh_to_bytes(single_tet_mesh())
    assert data[:4] == b"HSM1"
    assert int.from_bytes(data[4:12], "little") == 4
    assert int.from_bytes(data[12:20], "little") == 1
    assert len(data) == 4 + 16 + 4 * 24 + 32 + 4 + 4 * 8 + 4 * 24


@settings(max_examples=40, deadline=None)
@given(n=st.integers(4, 30), m=st.integers(0, 20), seed=st.integers(0, 2**31))
def test_random_mesh_round_trip(n, m, seed):
    rng = np.random.default_rng(seed)
    tets = np.array([rng.choice(n, 4, replace=False) for _ in range(m)], dtype=np.int64)
    mesh = io.Mesh(rng.normal(size=(n, 3)), tets.reshape(m, 4),
                   rng.integers(0, 4, n).astype(np.uint8), rng.uniform(0, 5, n),
                   rng.normal(size=(n, 3)))
    _same_mesh(mesh, io.mesh_from_bytes(io.mesh_to_bytes(mesh)))


def test_empty_trajectory_round_trip(tmp_path):
    traj = io.Trajectory(b"\x01" * 32, 0.01, np.zeros((0, 5, 3), np.float32))
    io.save_trajectory(traj, tmp_path / "t.hst")
    back = io.trajectory_from_bytes((tmp_path / "t.hst").read_bytes(), n_nodes=5)
    assert back.n_steps == 0 and back.mesh_hash == traj.mesh_hash and back.dt == 0.01


def test_trajectory_round_trip_bit_exact(tmp_path):
    mesh = single_tet_mesh()
    vel = np.random.default_rng(1).normal(size=(3, 4, 3)).astype(np.float32)
    traj = io.Trajectory(mesh.content_hash(), 0.01, vel)
    io.save_trajectory(traj, tmp_path / "t.hst")
    back = io.load_trajectory(tmp_path / "t.hst", mesh)
    assert back.velocity.tobytes() == vel.tobytes()


def test_trajectory_for_other_mesh_rejected():
    traj = io.Trajectory(b"\x02" * 32, 0.01, np.zeros((1, 4, 3), np.float32))
    with pytest.raises(io.FormatError):
        io.trajectory_from_bytes(io.trajectory_to_bytes(traj), 4,
                                 single_tet_mesh().content_hash())


def test_corrupt_magic():
    data = bytearray(io.mesh_to_bytes(single_tet_mesh()))
    data[0:4] = b"XXXX"
    with pytest.raises(io.FormatError) as exc:
        io.mesh_from_bytes(bytes(data))
    assert exc.value.offset == 0


def test_truncated_payload_names_offset():
    data = io.mesh_to_bytes(single_tet_mesh())
    with pytest.raises(io.FormatError) as exc:
        io.mesh_from_bytes(data[:50])
    assert exc.value.offset == 20 and "offset 20" in str(exc.value)


def test_tet_index_out_of_range_names_offset():
    mesh = single_tet_mesh()
    data = bytearray(io.mesh_to_bytes(mesh))
    off = 4 + 16 + 4 * 24 + 2 * 8  # third index of the only tet
    data[off:off + 8] = (9).to_bytes(8, "little")
    with pytest.raises(io.FormatError) as exc:
        io.mesh_from_bytes(bytes(data))
    assert exc.value.offset == off


def test_waveform_text_round_trip(tmp_path):
    wf = io.synthetic_waveform()
    io.save_waveform(wf, tmp_path / "w.txt")
    back = io.load_waveform(tmp_path / "w.txt")
    assert back.period == wf.period
    assert back.times.tobytes() == wf.times.tobytes()
    assert back.flow.tobytes() == wf.flow.tobytes()
    assert (tmp_path / "w.txt").read_text().startswith("period 0.8\n")


@pytest.mark.parametrize("text", ["", "periodic 1\n", "period 1\n0 1 2\n", "period 1\n0 -1\n",
                                  "period 1\n0.5 1\n0.2 1\n"])
def test_waveform_text_rejects(text):
    with pytest.raises(io.FormatError):
        io.waveform_from_text(text)


# --- waveform ------------------------------------------------------------------


def test_two_sample_waveform_midpoint_interpolates():
    wf = io.Waveform(1.0, [0.0, 0.5], [100.0, 300.0])
    assert wf(0.25) == pytest.approx(200.0)
    assert wf(0.75) == pytest.approx(200.0)  # periodic wrap back to the first sample
    assert wf(1.25) == pytest.approx(200.0)


def test_waveform_invariants():
    with pytest.raises(ValueError):
        io.Waveform(1.0, [0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        io.Waveform(1.0, [0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        io.Waveform(1.0, [0.0], [0.0])


def test_synthetic_waveform_mean_and_positive():
    wf = io.synthetic_waveform(q_mean=2500.0, pulsatility=1.6)
    assert wf.flow.mean() == pytest.approx(2500.0)
    assert np.all(wf.flow > 0)


# --- synthetic case -----------------------------------------------------------------


def test_default_case_invariants(default_case):
    mesh, traj = default_case.mesh, default_case.trajectory
    mesh.validate()
    lo, hi = io.NODE_BOUNDS
    assert lo <= mesh.n_nodes <= hi
    assert traj.dt == 0.01
    assert traj.n_steps == round(default_case.waveform.period / traj.dt) + 1
    wall = mesh.node_type == io.WALL
    assert np.all(traj.velocity[:, wall] == 0.0)
    # periodic: the last frame equals the first
    assert np.array_equal(traj.velocity[0], traj.velocity[-1])
    # every surface node is tagged
    faces = io.boundary_faces(mesh.tets)
    assert np.all(mesh.node_type[np.unique(faces)] != io.INTERIOR)
    assert default_case.bulge_nodes.size > 0


def test_default_tube_radius_is_2mm(default_case):
    assert default_case.geom["tube_radius"] == 2.0
    r = np.hypot(default_case.mesh.positions[:, 1], default_case.mesh.positions[:, 2])
    inlet = default_case.mesh.node_type == io.INLET
    assert r[inlet].max() == pytest.approx(2.0)


def test_constant_flow_is_poiseuille_outside_bulge():
    case = io.generate_synthetic_case({"target_edge_length": 1.0},
                                      {"waveform_params": {"pulsatility": 0.0}}, seed=3)
    mesh = case.mesh
    q = case.waveform(0.0)
    ref = io.steady_poiseuille(mesh, 2.0, q)
    c = np.array([8.0, 3.2, 0.0])
    far = (np.linalg.norm(mesh.positions - c, axis=1) > 2.5) & (mesh.node_type == io.INTERIOR)
    assert far.sum() > 50
    for k in (0, 17, 40):
        v = case.trajectory.velocity[k].astype(np.float64)
        np.testing.assert_allclose(v[far, 0], ref[far], rtol=1e-6, atol=1e-3)
        assert np.all(v[far, 1:] == 0.0)


def test_bulge_velocity_linear_in_flow():
    # derived: the analytic field is Q(t) * shape(x), so ratios follow Q
    case = io.generate_synthetic_case({"target_edge_length": 1.0}, None, seed=0)
    b = case.bulge_nodes
    interior = b[case.mesh.node_type[b] == io.INTERIOR]
    k1, k2 = 5, 30
    q1, q2 = case.waveform(k1 * 0.01), case.waveform(k2 * 0.01)
    v1 = case.trajectory.velocity[k1, interior].astype(np.float64)
    v2 = case.trajectory.velocity[k2, interior].astype(np.float64)
    np.testing.assert_allclose(v2, v1 * (q2 / q1), rtol=1e-5, atol=1e-4)


def test_analytic_field_divergence_free(coarse_case, default_case):
    dom = io._Domain(2.0, 16.0, 2.5, 3.2)
    # continuous field: central differences at random interior points
    rng = np.random.default_rng(0)
    pts = rng.uniform([0.5, -1.9, -1.9], [15.5, 5.5, 1.9], size=(4000, 3))
    pts = pts[dom.depth(pts) > 0.05]
    h = 1e-5
    div = np.zeros(len(pts))
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = h
        div += (io.analytic_shape(pts + e, dom, 0.3)[:, ax]
                - io.analytic_shape(pts - e, dom, 0.3)[:, ax]) / (2 * h)
    scale = np.abs(io.analytic_shape(pts, dom, 0.3)).max() / dom.R
    assert np.abs(div).max() < 1e-6 * scale
    # linear tets: the element-wise divergence of the interpolant is a
    # discretization error that shrinks under refinement
    def mean_div(mesh):
        u = io.analytic_shape(mesh.positions, dom, 0.3)
        p = mesh.positions[mesh.tets]
        g = np.linalg.solve(p[:, 1:] - p[:, :1], u[mesh.tets][:, 1:] - u[mesh.tets][:, :1])
        return (np.mean(np.abs(np.trace(g, axis1=1, axis2=2)))
                / np.mean(np.abs(g).max(axis=(1, 2))))

    coarse = mean_div(coarse_case.mesh)
    fine = mean_div(default_case.mesh)
    assert fine < 0.8 * coarse and fine < 0.1


@pytest.mark.parametrize("geom", [
    {"bulge_radius": 1.0, "bulge_offset": 0.5},  # swallowed by the tube
    {"bulge_radius": 9.0},  # longer than half the tube
    {"target_edge_length": 0.0},
])
def test_degenerate_geometry_rejected(geom):
    with pytest.raises(io.GeometryError):
        io.generate_synthetic_case(geom, None, 0)


# --- inlet profile ----------------------------------------------------------------


def test_inlet_profile_rim_centre_and_flux(default_case):
    mesh, wf = default_case.mesh, default_case.waveform
    center, n, radius = io.inlet_geometry(mesh)
    idx, v = io.inlet_profile(mesh, wf, 0.13)
    q = wf(0.13)
    rel = mesh.positions[idx] - center
    r = np.linalg.norm(rel - np.outer(rel @ n, n), axis=1)
    speed = np.linalg.norm(v, axis=1)
    vmax = 2 * q / (math.pi * radius**2)
    np.testing.assert_allclose(speed, vmax * np.clip(1 - r**2 / radius**2, 0, None), rtol=1e-12,
                               atol=1e-12 * vmax)
    rim = np.isclose(r, radius, rtol=1e-12)
    assert rim.sum() >= 12 and np.all(speed[rim] <= 1e-9 * vmax)
    at_centre = r < 1e-9
    assert at_centre.any()
    np.testing.assert_allclose(speed[at_centre], 2 * q / (math.pi * radius**2))
    # mass consistency with the lumped quadrature weights
    assert idx.size >= 50
    w = io.inlet_area_weights(mesh)[idx]
    flux = np.sum((v @ -n) * w)
    assert abs(flux - q) / q < 0.02


def test_non_planar_inlet_rejected():
    mesh = single_tet_mesh()
    types = mesh.node_type.copy()
    types[:] = io.INLET
    bad = io.Mesh(mesh.positions, mesh.tets, types, np.zeros(4), mesh.wall_normals)
    with pytest.raises(io.GeometryError):
        io.inlet_profile(bad, io.synthetic_waveform(), 0.0)


def test_inflow_stats(default_case):
    s = io.inflow_stats(default_case.mesh, default_case.waveform, 0.2)
    assert s[1] == 0.0 and s[1] <= s[0] <= s[2]
