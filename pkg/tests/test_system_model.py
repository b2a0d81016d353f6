import numpy as np
import pytest

from twophase_ura.rng import complex_normal, stream
from twophase_ura.system_model import (
    ChannelMatrix,
    IndexMatrix,
    SystemConfig,
    build_index_matrix,
    despread,
    inject_csi_error,
    mse,
    orthonormal_codebook,
    per_user_error,
    sample_channel,
    sample_messages,
    spectral_efficiency,
    transmit_and_despread,
)


def test_config_derived_fields():
    cfg = SystemConfig(K=500, M=80, L=2)
    assert cfg.J_minus_1 == 42
    assert cfg.n_codewords == 4
    assert cfg.alpha == 80 / 500
    assert np.all(cfg.rho_vec == 1.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(K=0, M=1, L=1),
        dict(K=1, M=0, L=1),
        dict(K=1, M=1, L=0),
        dict(K=1, M=1, L=5),  # 84 not divisible by 5
        dict(K=1, M=1, L=2, sigma2=0.0),
        dict(K=1, M=1, L=2, csi_error_var=-1e-3),
        dict(K=2, M=1, L=2, rho=(1.0, 0.0)),
        dict(K=2, M=1, L=2, rho=(1.0,)),
    ],
)
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        SystemConfig(**kwargs)


def test_sample_messages_range_and_reproducible():
    cfg = SystemConfig(K=4, M=2, L=1, B=17, L0=16)
    a = sample_messages(cfg, stream(3, "msg"))
    b = sample_messages(cfg, stream(3, "msg"))
    assert a.shape == (4, 1)
    assert set(np.unique(a)) <= {0, 1}
    np.testing.assert_array_equal(a, b)


def test_sample_messages_uniform():
    cfg = SystemConfig(K=10_000, M=1, L=2, B=18, L0=16)
    msgs = sample_messages(cfg, stream(0, "msg"))[:, 0]
    freq = np.bincount(msgs, minlength=4) / msgs.size
    sd = np.sqrt(0.25 * 0.75 / msgs.size)
    assert np.all(np.abs(freq - 0.25) < 3 * sd)


def test_collision_multiplicity_about_k_over_n():
    cfg = SystemConfig(K=500, M=1, L=2)
    msgs = sample_messages(cfg, stream(1, "msg"))
    counts = np.stack([np.bincount(msgs[:, j], minlength=4) for j in range(msgs.shape[1])])
    assert abs(counts.mean() - 125) < 1e-9  # every user lands somewhere
    assert abs(np.median(counts) - 125) < 15


def test_build_index_matrix_examples():
    np.testing.assert_array_equal(build_index_matrix([0, 1], 1.0, 1).entries, [[1, 0], [0, 1]])
    np.testing.assert_array_equal(build_index_matrix([3], 2.0, 2).entries, [[0, 0, 0, 2]])
    X = build_index_matrix([0, 0, 1], 1.0, 1)
    assert np.count_nonzero(X.entries[:, 0]) == 2


def test_build_index_matrix_rejects_out_of_range():
    with pytest.raises(ValueError):
        build_index_matrix([0, 2], 1.0, 1)
    with pytest.raises(ValueError):
        build_index_matrix([-1], 1.0, 1)


def test_index_matrix_is_validated_and_read_only():
    with pytest.raises(ValueError):
        IndexMatrix(np.array([[1.0, 1.0]]), np.array([0]))
    with pytest.raises(ValueError):
        IndexMatrix(np.array([[0.0, 0.0]]), np.array([0]))
    X = build_index_matrix([1], 1.0, 1)
    with pytest.raises(ValueError):
        X.entries[0, 0] = 5


def test_channel_variance():
    cfg = SystemConfig(K=1, M=10_000, L=2)
    S = sample_channel(cfg, stream(2, "ch")).S
    assert abs(np.mean(np.abs(S) ** 2) * cfg.M - 1) < 0.05
    assert abs(np.var(S.real) * 2 * cfg.M - 1) < 0.05


def test_channel_column_norms():
    cfg = SystemConfig(K=1000, M=50, L=2)
    S = sample_channel(cfg, stream(2, "ch")).S
    assert abs(np.mean(np.sum(np.abs(S) ** 2, axis=0)) - 1) < 0.05


def test_channel_deterministic():
    cfg = SystemConfig(K=7, M=5, L=2)
    a = sample_channel(cfg, stream(9, "ch")).S
    b = sample_channel(cfg, stream(9, "ch")).S
    assert a.tobytes() == b.tobytes()


def test_csi_error():
    cfg = SystemConfig(K=100, M=100, L=2)
    S = sample_channel(cfg, stream(0, "ch"))
    same = inject_csi_error(S, 0.0, stream(0, "csi"))
    np.testing.assert_array_equal(same.S, S.S)
    assert same.estimated
    noisy = inject_csi_error(S, 0.1, stream(0, "csi"))
    err = noisy.S - S.S
    assert abs(np.mean(np.abs(err) ** 2) / 0.001 - 1) < 0.05
    with pytest.raises(ValueError):
        inject_csi_error(S, -0.1, stream(0, "csi"))


def test_noiseless_rank_one():
    S = complex_normal(stream(0), (6, 1), 1 / 6)
    X = build_index_matrix([2], 1.5, 2)
    Y = transmit_and_despread(X, S, 0.0, stream(1)).Y
    np.testing.assert_allclose(Y[:, 2], 1.5 * S[:, 0])
    assert np.all(Y[:, [0, 1, 3]] == 0)


def test_noiseless_equals_product():
    rng = stream(0)
    S = complex_normal(rng, (8, 5), 1 / 8)
    X = build_index_matrix(rng.integers(0, 4, 5), 1.0, 2)
    np.testing.assert_allclose(transmit_and_despread(X, S, 0.0, rng).Y, S @ X.entries, atol=1e-14)


def test_noise_variance_and_whiteness():
    S = np.zeros((25_000, 1), dtype=complex)
    X = np.zeros((1, 4))
    Y = transmit_and_despread(X, S, 0.01, stream(4)).Y
    assert abs(np.mean(np.abs(Y) ** 2) / 0.01 - 1) < 0.05
    cov = Y.conj().T @ Y / Y.shape[0]
    np.testing.assert_allclose(cov, 0.01 * np.eye(4), atol=0.01 * 0.05)


def test_raw_path_matches_equivalent_model():
    rng = stream(0)
    S = complex_normal(rng, (6, 3), 1 / 6)
    X = build_index_matrix([0, 3, 1], 1.0, 2)
    blk = transmit_and_despread(X, S, 0.0, rng, keep_raw=True)
    np.testing.assert_allclose(blk.Y, S @ X.entries, atol=1e-12)
    C = orthonormal_codebook(2)
    np.testing.assert_allclose(C.conj().T @ C, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(despread(blk.raw, C), blk.Y)
    # noisy raw path keeps the noise white with the same variance
    S0 = np.zeros((20_000, 1), dtype=complex)
    Y = transmit_and_despread(np.zeros((1, 4)), S0, 0.5, rng, keep_raw=True).Y
    assert abs(np.mean(np.abs(Y) ** 2) / 0.5 - 1) < 0.05


def test_transmit_dimension_mismatch():
    with pytest.raises(ValueError):
        transmit_and_despread(np.zeros((3, 2)), np.zeros((4, 2)), 0.1, stream(0))


def test_rho_scaling_scales_output():
    rng = stream(3)
    S = complex_normal(rng, (4, 3), 0.25)
    X1 = build_index_matrix([0, 1, 1], 1.0, 1)
    X3 = build_index_matrix([0, 1, 1], 3.0, 1)
    np.testing.assert_allclose(
        transmit_and_despread(X3, S, 0, rng).Y, 3 * transmit_and_despread(X1, S, 0, rng).Y
    )


def _blocks(msgs, L=2):
    return [build_index_matrix(m, 1.0, L) for m in msgs]


def test_per_user_error_counts():
    truth = _blocks([[0, 1, 2, 3, 0, 1, 2, 3, 0, 1]] * 4)
    assert per_user_error(truth, truth) == 0.0
    one = _blocks([[0, 1, 2, 3, 0, 1, 2, 3, 0, 1]] * 3 + [[1, 1, 2, 3, 0, 1, 2, 3, 0, 1]])
    assert per_user_error(one, truth) == pytest.approx(0.1)
    three = _blocks([[3, 1, 2, 3, 0, 1, 2, 3, 0, 1]] * 3 + [[0, 1, 2, 3, 0, 1, 2, 3, 0, 1]])
    assert per_user_error(three, truth) == pytest.approx(0.1)
    assert per_user_error([], []) == 0.0
    with pytest.raises(ValueError):
        per_user_error(truth[:2], truth)
    with pytest.raises(ValueError):
        per_user_error(_blocks([[0, 1]]), _blocks([[0, 1, 2]]))


def test_mse_examples():
    X = build_index_matrix([0], 1.0, 1)
    assert mse(X, X) == 0
    assert mse(np.array([[0.0, 1.0]]), X) == 2.0
    with pytest.raises(ValueError):
        mse(np.zeros((2, 2)), X)


def test_mse_matches_double_loop():
    rng = stream(5)
    A, B = rng.random((7, 4)), rng.random((7, 4))
    total = 0.0
    for k in range(7):
        for j in range(4):
            total += (A[k, j] - B[k, j]) ** 2
    assert abs(mse(A, B) - total / 7) < 1e-12


def test_spectral_efficiency():
    assert spectral_efficiency(SystemConfig(K=500, M=1, L=2, n=500)) == pytest.approx(50000 / 668)
    assert spectral_efficiency(SystemConfig(K=500, M=100, L=2, n=1000)) == pytest.approx(42.81, abs=5e-3)
    vals = [spectral_efficiency(SystemConfig(K=500, M=1, L=L, B=100, L0=16)) for L in (2, 3, 4, 6)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_channel_matrix_flag():
    assert not ChannelMatrix(np.zeros((1, 1))).estimated
