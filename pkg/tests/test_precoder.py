import numpy as np
import pytest

from hiermimo.corrmat import CorrelationMatrix, CorrelationSet, random_clustered_correlation
from hiermimo.errors import ParameterError, ValidationError
from hiermimo.precoder import (
    CompositeControl,
    cross_interference_power,
    inner_precoders,
    instantaneous_rate,
    interference_nullspace_basis,
    outer_precoder,
    rzf_inner_precoder,
    transmit_power,
)
from hiermimo.topology import build_topology, theta_from_db

from conftest import single_cell_set


def projector(basis):
    return basis @ basis.conj().T


def test_nullspace_basis_empty_blocked():
    cs = single_cell_set(8, 2, 2)
    basis = interference_nullspace_basis(cs, (), 0)
    assert basis.shape == (8, 0)


def test_nullspace_basis_single_rank2_user():
    cs = single_cell_set(8, 2, 2)
    basis = interference_nullspace_basis(cs, (0,), 0)
    assert basis.shape == (8, 2)
    ref = cs.matrix(0, 0).basis()
    assert np.linalg.norm(projector(basis) - projector(ref)) <= 1e-9


def test_nullspace_basis_duplicate_matrices_share_span():
    mat = random_clustered_correlation(8, 2, 1.0, seed=4)
    twin = CorrelationMatrix(2.0 * mat.entries, 2, 2.0)  # scaled copy, same range
    mats = {(0, 0): mat, (1, 0): twin}
    cs = CorrelationSet(1, 2, mats, {0: 0, 1: 0}, {0: 0, 1: 1})
    one = interference_nullspace_basis(cs, (0,), 0)
    both = interference_nullspace_basis(cs, (0, 1), 0)
    assert both.shape[1] == one.shape[1]
    assert np.linalg.norm(projector(both) - projector(one)) <= 1e-9


def test_outer_precoder_unblocked_spans_selected_range():
    cs = single_cell_set(16, 1, 5)
    f = outer_precoder(cs, (0,), (), 0)
    assert f.shape == (16, 5)
    ref = cs.matrix(0, 0).basis()
    assert np.linalg.norm(projector(f) - projector(ref)) <= 1e-9


def test_outer_precoder_blocked_subspace_inside_selected_span():
    # selected span is 4-dimensional, blocked users occupy a 2-dimensional
    # subspace of it; the outer precoder must be the 2-dimensional remainder
    m = 32
    basis = np.linalg.qr(np.random.default_rng(0).standard_normal((m, 4))
                         + 1j * np.random.default_rng(1).standard_normal((m, 4)))[0]
    selected_mat = CorrelationMatrix(basis @ basis.conj().T, 4, 4.0 / m)
    blocked_basis = basis[:, :2]
    blocked_mat = CorrelationMatrix(blocked_basis @ blocked_basis.conj().T, 2, 2.0 / m)
    mats = {(0, 0): selected_mat, (1, 0): blocked_mat}
    cs = CorrelationSet(1, 2, mats, {0: 0, 1: 0}, {0: 0, 1: 1})
    f = outer_precoder(cs, (0,), (1,), 0)
    assert f.shape == (m, 2)
    assert np.linalg.norm(blocked_basis.conj().T @ f) <= 1e-9
    assert np.linalg.norm(f - projector(basis) @ f) <= 1e-9  # stays inside the span


def test_outer_precoder_fully_blocked_is_empty():
    mat = random_clustered_correlation(8, 3, 1.0, seed=2)
    twin = CorrelationMatrix(mat.entries.copy(), 3, 1.0)
    mats = {(0, 0): mat, (1, 0): twin}
    cs = CorrelationSet(1, 2, mats, {0: 0, 1: 0}, {0: 0, 1: 1})
    f = outer_precoder(cs, (0,), (1,), 0)
    assert f.shape == (8, 0)


def test_outer_precoder_rejects_overlap():
    cs = single_cell_set(8, 2, 2)
    with pytest.raises(ParameterError):
        outer_precoder(cs, (0,), (0,), 0)


def rand_channel(rng, m):
    return (rng.standard_normal(m) + 1j * rng.standard_normal(m)) / np.sqrt(2)


def test_rzf_single_user_closed_form():
    rng = np.random.default_rng(5)
    m, nu = 8, 0.1
    h = rand_channel(rng, m)
    g = rzf_inner_precoder(h.conj()[None, :], np.eye(m, dtype=complex), nu)
    expect = h / (np.linalg.norm(h) ** 2 + m * nu)
    assert np.linalg.norm(g[:, 0] - expect) <= 1e-12


def test_rzf_large_regularizer_limit():
    rng = np.random.default_rng(6)
    m, nu = 8, 1e6
    rows = np.stack([rand_channel(rng, m).conj() for _ in range(4)])
    f = np.eye(m, dtype=complex)
    g = rzf_inner_precoder(rows, f, nu)
    ref = rows.conj().T / (m * nu)
    assert np.linalg.norm(g - ref) <= 1e-4 * np.linalg.norm(ref)


def test_rzf_matches_explicit_inverse():
    rng = np.random.default_rng(7)
    m, nu = 16, 0.03
    rows = np.stack([rand_channel(rng, m).conj() for _ in range(4)])
    f = np.linalg.qr(rng.standard_normal((m, 6)) + 1j * rng.standard_normal((m, 6)))[0]
    g = rzf_inner_precoder(rows, f, nu)
    heff = rows @ f
    explicit = np.linalg.inv(heff.conj().T @ heff + m * nu * np.eye(6)) @ heff.conj().T
    assert np.linalg.norm(g - explicit) <= 1e-10


def test_rzf_rejects_bad_nu():
    with pytest.raises(ParameterError):
        rzf_inner_precoder(np.zeros((1, 4), dtype=complex), np.eye(4, dtype=complex), 0.0)


def _simple_control(cs, selected, blocked, powers):
    f = outer_precoder(cs, selected, blocked, 0)
    return CompositeControl(outer={0: f}, selected={0: selected}, power=powers)


def test_rate_zero_for_unselected_user():
    cs = single_cell_set(8, 2, 2)
    control = _simple_control(cs, (0,), (), {0: 1.0})
    channels = {(k, 0): rand_channel(np.random.default_rng(k), 8) for k in range(2)}
    assert instantaneous_rate(1, control, channels, nu=0.01) == 0.0


def test_rate_matched_filter_single_user():
    m = 8
    h = np.zeros(m, dtype=complex)
    h[0] = np.sqrt(2.0)  # ||h||^2 = 2
    v = (h / np.linalg.norm(h)).reshape(m, 1)
    control = CompositeControl(outer={0: v}, selected={0: (0,)}, power={0: 3.0})
    inner = {0: np.array([[1.0 + 0j]])}
    rate = instantaneous_rate(0, control, {(0, 0): h}, nu=0.01, inner=inner)
    assert np.isclose(rate, np.log(1 + 6.0), rtol=1e-12)


def test_rate_matches_scalar_formula_oracle():
    rng = np.random.default_rng(8)
    m, nu = 8, 0.05
    cs = single_cell_set(m, 2, 3, seed0=20)
    control = _simple_control(cs, (0, 1), (), {0: 2.0, 1: 1.5})
    channels = {(k, 0): rand_channel(rng, m) for k in range(2)}
    inner = inner_precoders(control, channels, nu)
    beams = control.outer[0] @ inner[0]
    for idx, k in enumerate((0, 1)):
        h = channels[(k, 0)]
        sig = control.power[k] * abs(h.conj() @ beams[:, idx]) ** 2
        other = 1 - idx
        intra = control.power[other] * abs(h.conj() @ beams[:, other]) ** 2
        oracle = np.log(1 + sig / (intra + 1.0))
        assert np.isclose(instantaneous_rate(k, control, channels, nu, inner=inner),
                          oracle, rtol=1e-12)


def test_transmit_power_empty_and_single_user():
    cs = single_cell_set(8, 1, 2)
    empty = CompositeControl(outer={0: np.zeros((8, 0), dtype=complex)},
                             selected={0: ()}, power={})
    assert transmit_power(empty, {}, 0, nu=0.01) == 0.0
    m, nu, p = 8, 0.1, 2.5
    h = rand_channel(np.random.default_rng(9), m)
    control = CompositeControl(outer={0: np.eye(m, dtype=complex)},
                               selected={0: (0,)}, power={0: p})
    got = transmit_power(control, {(0, 0): h}, 0, nu)
    expect = p * np.linalg.norm(h) ** 2 / (np.linalg.norm(h) ** 2 + m * nu) ** 2
    assert np.isclose(got, expect, rtol=1e-10)


def test_transmit_power_identities():
    rng = np.random.default_rng(10)
    m, nu = 16, 0.02
    cs = single_cell_set(m, 3, 4, seed0=40)
    control = _simple_control(cs, (0, 1, 2), (), {0: 1.0, 1: 2.0, 2: 0.5})
    channels = {(k, 0): rand_channel(rng, m) for k in range(3)}
    inner = inner_precoders(control, channels, nu)
    got = transmit_power(control, channels, 0, nu, inner=inner)
    # alternative form: sum of per-user beam powers through the outer basis
    alt = sum(control.power[k] * np.linalg.norm(control.outer[0] @ inner[0][:, i]) ** 2
              for i, k in enumerate((0, 1, 2)))
    assert np.isclose(got, alt, rtol=1e-10)
    # trace form with an explicit inverse
    f = control.outer[0]
    rows = np.stack([channels[(k, 0)].conj() for k in (0, 1, 2)])
    heff = rows @ f
    inv2 = np.linalg.inv(heff.conj().T @ heff + m * nu * np.eye(f.shape[1]))
    inv2 = inv2 @ inv2
    pmat = np.diag([control.power[k] for k in (0, 1, 2)])
    trace_form = np.real(np.trace(pmat @ heff @ inv2 @ heff.conj().T))
    assert np.isclose(got, trace_form, rtol=1e-10)


def test_unitary_rotation_of_outer_is_invisible():
    rng = np.random.default_rng(11)
    m, nu = 16, 0.02
    cs = single_cell_set(m, 2, 4, seed0=60)
    control = _simple_control(cs, (0, 1), (), {0: 1.0, 1: 2.0})
    k_dim = control.outer[0].shape[1]
    q, _ = np.linalg.qr(rng.standard_normal((k_dim, k_dim))
                        + 1j * rng.standard_normal((k_dim, k_dim)))
    rotated = CompositeControl(outer={0: control.outer[0] @ q},
                               selected=control.selected, power=control.power)
    channels = {(k, 0): rand_channel(rng, m) for k in range(2)}
    for k in range(2):
        assert np.isclose(instantaneous_rate(k, control, channels, nu),
                          instantaneous_rate(k, rotated, channels, nu), rtol=1e-10)
    assert np.isclose(transmit_power(control, channels, 0, nu),
                      transmit_power(rotated, channels, 0, nu), rtol=1e-10)


def test_zero_ici_end_to_end(desk):
    from hiermimo.corrmat import sample_channel
    from hiermimo.scheduler import assemble_control, weighted_sum_rate

    cs, graph = desk
    nu = 0.01
    selected = tuple(range(6))
    res = weighted_sum_rate(selected, np.ones(6), cs, graph, nu, 10.0)
    control = assemble_control(selected, cs, graph, res.powers)
    control.validate(cs, graph)
    assert any(graph.neighbor_users[n] for n in range(2)), "need cross edges"
    for i in range(50):
        rng = np.random.default_rng(500 + i)
        channels = {(k, n): sample_channel(cs.matrix(k, n), rng)
                    for k in range(6) for n in range(2)}
        inner = inner_precoders(control, channels, nu)
        for n in range(2):
            for k in graph.neighbor_users[n]:
                leak = cross_interference_power(control, channels, k, n, inner=inner)
                bs = control.serving_bs(k)
                beams = control.outer[bs] @ inner[bs]
                idx = control.selected[bs].index(k)
                sig = control.power[k] * abs(channels[(k, bs)].conj() @ beams[:, idx]) ** 2
                assert leak <= 1e-16 * (sig + 1.0)


def test_control_validation_failures(desk):
    cs, graph = desk
    from hiermimo.scheduler import assemble_control, weighted_sum_rate

    res = weighted_sum_rate((0, 1), np.ones(6), cs, graph, 0.01, 10.0)
    control = assemble_control((0, 1), cs, graph, res.powers)
    bad_power = CompositeControl(outer=control.outer, selected=control.selected,
                                 power={k: -1.0 for k in control.power})
    with pytest.raises(ValidationError):
        bad_power.validate(cs, graph)
    n0 = next(n for n, users in control.selected.items() if users)
    skewed = dict(control.outer)
    skewed[n0] = 1.7 * skewed[n0]
    with pytest.raises(ValidationError):
        CompositeControl(outer=skewed, selected=control.selected,
                         power=control.power).validate(cs, graph)
