import numpy as np
import pytest

from gblrom.fom import PARAM_ORDER, PARAMETER_RANGES, ParameterSet
from gblrom.mlp import Mlp, init_mlp
from gblrom.pod import ReducedBasis
from gblrom.mlp import forward
from gblrom.surrogate import (NormalizationSpec, SurrogateError, build_direct_dataset,
                              build_inverse_dataset, default_direct_net,
                              default_inverse_net, denormalize_params,
                              estimate_parameters, forward_mean, load_network_archive,
                              normalize_params, predict_direct, refine_parameters,
                              sample_parameters, save_network_archive)

SPEC = NormalizationSpec.from_table()


def _params_at(fraction):
    values = []
    for k, logs in zip(PARAM_ORDER, SPEC.log_scale):
        lo, hi = PARAMETER_RANGES[k]
        values.append(lo * (hi / lo) ** fraction if logs else lo + fraction * (hi - lo))
    return ParameterSet.from_array(values)


def test_range_endpoints_normalize_to_bounds():
    assert np.allclose(normalize_params(_params_at(0.0), SPEC), 0.0, atol=1e-14)
    assert np.allclose(normalize_params(_params_at(1.0), SPEC), 1.0, atol=1e-14)


def test_midpoint_hand_value():
    # delta = 0.215 over [0.1, 0.33] sits exactly halfway
    p = _params_at(0.5)
    assert p.delta == pytest.approx(0.215)
    x = normalize_params(p, SPEC)
    assert x[PARAM_ORDER.index("delta")] == pytest.approx(0.5, rel=1e-12)


def test_round_trip_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.random(6)
        p, clipped = denormalize_params(x, SPEC)
        assert not clipped.any()
        assert np.allclose(normalize_params(p, SPEC), x, atol=1e-12)


def test_strict_mode_rejects_out_of_range():
    bad = ParameterSet(nu=1.0, m0=3000.0, kappa=700.0, delta=0.2,
                       delta_n=1e4, s_n=1e4)
    with pytest.raises(SurrogateError):
        normalize_params(bad, SPEC, strict=True)
    # non-strict clips with a warning instead
    x = normalize_params(bad, SPEC)
    assert x[PARAM_ORDER.index("nu")] == pytest.approx(1.0)


def test_denormalize_clips_and_flags():
    x = np.array([1.3, 0.5, 0.5, -0.2, 0.5, 0.5])
    p, clipped = denormalize_params(x, SPEC, clip=True)
    assert clipped.tolist() == [True, False, False, True, False, False]
    assert p.nu == pytest.approx(PARAMETER_RANGES["nu"][1])
    assert p.delta == pytest.approx(PARAMETER_RANGES["delta"][0])


def test_sampling_is_in_range_and_seeded():
    a = sample_parameters(50, SPEC, seed=4)
    b = sample_parameters(50, SPEC, seed=4)
    c = sample_parameters(50, SPEC, seed=5)
    for p in a:
        p.validate(strict=True)
    assert all(pa.as_array().tolist() == pb.as_array().tolist() for pa, pb in zip(a, b))
    assert any(pa.as_array().tolist() != pc.as_array().tolist() for pa, pc in zip(a, c))


def test_log_sampling_spreads_decades():
    draws = sample_parameters(400, SPEC, seed=6)
    s_n = np.array([p.s_n for p in draws])
    below = np.sum(s_n < 1e4)  # geometric midpoint of [1e3, 1e5]
    assert 120 <= below <= 280


def _toy_basis(n_dofs=30, n_pod=4, seed=1):
    rng = np.random.default_rng(seed)
    modes, _ = np.linalg.qr(rng.standard_normal((n_dofs, n_pod)))
    return ReducedBasis(variable="phi", modes=modes, eigenvalues=np.ones(n_pod),
                        retained_ratio=1.0, ic=0.95, inner_product="euclidean")


def _toy_trajectories(basis, n_sets=3, n_steps=20, dt=0.5, seed=2):
    rng = np.random.default_rng(seed)
    trajs = []
    times = np.arange(n_steps + 1) * dt
    for p in sample_parameters(n_sets, SPEC, seed=seed):
        coeffs = rng.standard_normal((basis.n_pod, n_steps + 1))
        trajs.append((p, times, basis.modes @ coeffs))
    return trajs, times


def test_direct_dataset_layout():
    basis = _toy_basis()
    trajs, times = _toy_trajectories(basis)
    horizon = times[-1]
    ds = build_direct_dataset(trajs, basis, SPEC, horizon, test_fraction=0.25, seed=3)
    assert ds.inputs.shape == (3 * 21, 7)
    assert ds.targets.shape == (3 * 21, basis.n_pod)
    # the first row of each trajectory has time feature zero
    assert ds.inputs[0, 6] == 0.0
    assert ds.inputs[21, 6] == 0.0
    assert ds.inputs[20, 6] == pytest.approx(1.0)
    # split is disjoint and exhaustive by construction; check proportions
    assert len(ds.test_idx) == round(0.25 * 63)
    assert len(ds.train_idx) + len(ds.test_idx) == 63
    # targets are the projection coefficients
    p0, t0, snaps0 = trajs[0]
    assert np.allclose(ds.targets[0], basis.modes.T @ snaps0[:, 0], atol=1e-12)


def test_direct_dataset_desk_scale_row_count():
    basis = _toy_basis()
    trajs, times = _toy_trajectories(basis, n_sets=40, n_steps=60)
    ds = build_direct_dataset(trajs, basis, SPEC, times[-1])
    assert ds.inputs.shape[0] == 40 * 61 == 2440


def test_inverse_dataset_gap_indexing():
    basis = _toy_basis()
    trajs, times = _toy_trajectories(basis, n_sets=2, n_steps=60, dt=0.5)
    ds = build_inverse_dataset(trajs, basis, SPEC, gap_days=20.0, pairs_per_traj=1,
                               dt_record=0.5, seed=4)
    # single pair per trajectory starts at t0 = 0 and jumps 40 recorded steps
    p0, t0, snaps0 = trajs[0]
    a0 = basis.modes.T @ snaps0[:, 0]
    a1 = basis.modes.T @ snaps0[:, 40]
    assert np.allclose(ds.inputs[0], np.concatenate([a0, a1]), atol=1e-12)
    assert np.allclose(ds.targets[0], normalize_params(p0, SPEC), atol=1e-12)


def test_inverse_dataset_counts_and_determinism():
    basis = _toy_basis()
    trajs, _ = _toy_trajectories(basis, n_sets=3, n_steps=60)
    a = build_inverse_dataset(trajs, basis, SPEC, 20.0, 5, 0.5, seed=7)
    b = build_inverse_dataset(trajs, basis, SPEC, 20.0, 5, 0.5, seed=7)
    assert a.inputs.shape == (15, 2 * basis.n_pod)
    assert np.array_equal(a.inputs, b.inputs)
    # distinct start times within one trajectory (sampled without replacement)
    firsts = a.inputs[:5, :basis.n_pod]
    assert len({tuple(np.round(r, 12)) for r in firsts}) == 5


def test_inverse_dataset_gap_too_long():
    basis = _toy_basis()
    trajs, _ = _toy_trajectories(basis, n_sets=1, n_steps=10, dt=0.5)
    with pytest.raises(SurrogateError, match="gap"):
        build_inverse_dataset(trajs, basis, SPEC, gap_days=20.0, pairs_per_traj=1,
                              dt_record=0.5)


def test_predict_direct_reconstructs_network_output():
    basis = _toy_basis()
    net = default_direct_net(basis.n_pod, hidden=(8,), seed=0)
    p = _params_at(0.3)
    field = predict_direct(net, p, 3.0, basis, SPEC, horizon=10.0)
    assert field.values.shape == (30,)
    coeffs = basis.modes.T @ field.values
    from gblrom.mlp import forward
    x = np.concatenate([normalize_params(p, SPEC), [0.3]])
    assert np.allclose(coeffs, forward(net, x), atol=1e-10)


def test_predict_error_splits_into_projection_and_network_parts():
    """On a training pair, the prediction error against the full snapshot is
    bounded by the projection error plus the network's error on the
    coefficients (orthonormal modes make the lift an isometry)."""
    rng = np.random.default_rng(21)
    basis = _toy_basis(n_dofs=40, n_pod=3, seed=5)
    snapshot = rng.standard_normal(40)
    target = basis.modes.T @ snapshot
    net = default_direct_net(3, hidden=(8,), seed=1)
    p = _params_at(0.4)
    predicted = predict_direct(net, p, 12.0, basis, SPEC, horizon=30.0)
    x = np.concatenate([normalize_params(p, SPEC), [0.4]])
    network_err = float(np.linalg.norm(forward(net, x) - target))
    projection_err = float(np.linalg.norm(snapshot - basis.modes @ target))
    total = float(np.linalg.norm(snapshot - predicted.values))
    assert total <= projection_err + network_err + 1e-10
    # and the in-span part of the error is exactly the network error
    in_span = float(np.linalg.norm(basis.modes.T @ (snapshot - predicted.values)
                                   - (target - forward(net, x))))
    assert in_span < 1e-10


def test_estimate_parameters_clips_and_flags():
    basis = _toy_basis()
    # force outputs far outside [0, 1] through a huge output bias
    net = default_inverse_net(basis.n_pod, hidden=(4,), seed=0)
    net.biases[-1] = np.array([5.0, 0.5, 0.5, 0.5, 0.5, -5.0])
    net.weights[-1][:] = 0.0
    phi0 = np.zeros(30)
    phi1 = np.zeros(30)
    params, clipped = estimate_parameters(net, phi0, phi1, basis, SPEC)
    assert clipped[0] and clipped[5]
    assert params.nu == pytest.approx(PARAMETER_RANGES["nu"][1])
    assert params.s_n == pytest.approx(PARAMETER_RANGES["s_n"][0])


def test_network_archive_round_trip(tmp_path):
    net = init_mlp([7, 16, 5], seed=11)
    path = tmp_path / "model.npz"
    save_network_archive(path, net, SPEC, "f1ngerpr1nt",
                         extra={"role": "direct", "horizon": 30.0})
    again, spec, meta = load_network_archive(path)
    assert len(again) == 1 and isinstance(again[0], Mlp)
    assert meta["basis_fingerprint"] == "f1ngerpr1nt"
    assert meta["role"] == "direct"
    assert meta["horizon"] == 30.0
    assert all(np.array_equal(a, b) for a, b in zip(again[0].weights, net.weights))
    assert np.allclose(spec.lo, SPEC.lo)
    assert np.array_equal(spec.log_scale, SPEC.log_scale)


def test_network_archive_ensemble_round_trip(tmp_path):
    nets = [init_mlp([7, 8, 5], seed=s) for s in (0, 1, 2)]
    path = tmp_path / "ens.npz"
    save_network_archive(path, nets, SPEC, "fp")
    again, _, meta = load_network_archive(path)
    assert meta["n_members"] == 3
    assert len(again) == 3
    for a, b in zip(again, nets):
        assert all(np.array_equal(w1, w2) for w1, w2 in zip(a.weights, b.weights))
    x = np.random.default_rng(0).random(7)
    manual = np.mean([forward(n, x) for n in nets], axis=0)
    assert np.allclose(forward_mean(again, x), manual, atol=1e-14)


def test_refine_parameters_matches_observations():
    """Refinement drives the surrogate residual to zero; along directions the
    observations actually constrain, the true parameters are recovered.

    A single linear layer has identical parameter sensitivity at both
    observation times, so one direction stays unconstrained by construction
    and only the row-space component of the recovery error must vanish.
    """
    rng = np.random.default_rng(13)
    b_matrix = rng.standard_normal((5, 7))
    net = Mlp(weights=[b_matrix.copy()], biases=[np.zeros(5)])
    x_true = rng.uniform(0.2, 0.8, 6)
    obs = []
    for t in (10.0, 30.0):
        obs.append((t, forward(net, np.concatenate([x_true, [t / 30.0]]))))
    start = np.clip(x_true + rng.normal(0, 0.2, 6), 0, 1)
    refined, clipped = refine_parameters(net, obs, SPEC, horizon=30.0, x0=start)
    assert not clipped.any()
    x_refined = normalize_params(refined, SPEC)
    residual = np.concatenate([
        forward(net, np.concatenate([x_refined, [t / 30.0]])) - a for t, a in obs])
    assert np.linalg.norm(residual) < 1e-6
    # recovery in the identifiable (row-space) directions
    sens = b_matrix[:, :6]
    _, s, vt = np.linalg.svd(sens)
    row_space = vt[:s.size][s > 1e-10 * s[0]]
    assert np.linalg.norm(row_space @ (x_refined - x_true)) < 1e-6


def test_refine_parameters_flags_out_of_range_start():
    net = init_mlp([7, 4], seed=3)
    obs = [(30.0, np.zeros(4))]
    _, clipped = refine_parameters(net, obs, SPEC, horizon=30.0,
                                   x0=np.array([1.5, 0.5, 0.5, 0.5, 0.5, -0.1]))
    assert clipped[0] and clipped[5] and not clipped[1]
