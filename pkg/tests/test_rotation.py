import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import jacobi_eigen_singular_values
from qvla.errors import ConfigError
from qvla.rotation import (
    RotationKind,
    RotationPlan,
    apply_to_activation,
    apply_to_weight,
    build_plan,
    jacobi_svd,
    make_hadamard,
    svd_rotation,
    zigzag_permutation,
)
from qvla.tensor_store import decode_container, encode_container

ROTATING = ["svd", "hadamard", "svd-hadamard"]
ALL_KINDS = ["identity", "permute", *ROTATING]


# --- Hadamard -------------------------------------------------------------

def test_hadamard_small_orders():
    np.testing.assert_array_equal(make_hadamard(1), [[1.0]])
    np.testing.assert_allclose(make_hadamard(2), np.array([[1, 1], [1, -1]]) / np.sqrt(2))


def test_hadamard_64_orthogonal_and_flat():
    h = make_hadamard(64)
    assert np.abs(h @ h.T - np.eye(64)).max() < 1e-6
    assert np.all(np.abs(np.abs(h) - 1 / 8) == 0)


@pytest.mark.parametrize("n", [0, 3, 6, 48, -4])
def test_hadamard_rejects_non_power_of_two(n):
    with pytest.raises(ConfigError):
        make_hadamard(n)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_hadamard_diffusion_l1_bound(m, seed):
    n = 2**m
    z = np.random.default_rng(seed).standard_normal(n) * np.random.default_rng(seed + 1).exponential(5, n)
    zh = z @ make_hadamard(n)
    assert np.abs(zh).max() <= np.abs(z).sum() / np.sqrt(n) + 1e-12


@pytest.mark.parametrize("n", [2, 4, 8, 16, 32, 64])
def test_hadamard_spike_is_exact(n):
    for k in (0, n // 2, n - 1):
        z = np.zeros(n)
        z[k] = -3.75
        np.testing.assert_allclose(np.abs(z @ make_hadamard(n)), 3.75 / np.sqrt(n), atol=1e-12)


def test_sign_flips_preserve_column_norms():
    rng = np.random.default_rng(3)
    h = make_hadamard(32)
    d = np.diag(rng.choice([-1.0, 1.0], size=32))
    np.testing.assert_allclose(np.linalg.norm(h @ d, axis=0), np.linalg.norm(h, axis=0))
    np.testing.assert_allclose(np.linalg.norm(h @ d, axis=1), np.linalg.norm(h, axis=1))


# --- SVD rotation ---------------------------------------------------------

def test_svd_rotation_diagonal_block():
    u, info = svd_rotation(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(np.abs(u), np.eye(2), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(u.T @ np.diag([3.0, 1.0]), axis=1), [3, 1])
    np.testing.assert_allclose(info.singular_values, [3, 1])


def test_svd_rotation_permutation_block():
    w = np.array([[0.0, 3.0], [1.0, 0.0]])
    u, info = svd_rotation(w)
    np.testing.assert_allclose(np.linalg.norm(u.T @ w, axis=1), [3, 1], atol=1e-12)
    np.testing.assert_allclose(info.singular_values, [3, 1], atol=1e-12)


def test_svd_rotation_outlier_row_matches_oracle():
    rng = np.random.default_rng(11)
    w = rng.standard_normal((8, 16))
    w[5] *= 50
    u, info = svd_rotation(w)
    oracle = jacobi_eigen_singular_values(w)
    rotated = np.linalg.norm(u.T @ w, axis=1)
    np.testing.assert_allclose(rotated, oracle, rtol=1e-4)
    np.testing.assert_allclose(info.singular_values, oracle, rtol=1e-4)


def test_svd_rotation_rank_deficient_pads_zero():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((8, 3))
    u, info = svd_rotation(w)
    assert np.abs(u @ u.T - np.eye(8)).max() < 1e-12
    np.testing.assert_allclose(info.singular_values[3:], 0, atol=1e-10)
    np.testing.assert_allclose(np.linalg.norm(u.T @ w, axis=1), info.singular_values, atol=1e-10)


def test_svd_sign_convention_and_order():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((16, 40))
    u, info = svd_rotation(w)
    assert np.all(np.diff(info.singular_values) <= 1e-12)
    assert np.all(info.singular_values >= 0)
    peaks = u[np.argmax(np.abs(u), axis=0), np.arange(16)]
    assert np.all(peaks >= 0)
    # reproducible: a second run is identical
    np.testing.assert_array_equal(svd_rotation(w)[0], u)


def test_jacobi_orthogonalizes_columns():
    a = np.random.default_rng(0).standard_normal((20, 7))
    m, sigma, v = jacobi_svd(a)
    gram = m.T @ m
    assert np.abs(gram - np.diag(np.diag(gram))).max() < 1e-10
    np.testing.assert_allclose(a @ v, m, atol=1e-12)
    np.testing.assert_allclose(np.sort(sigma)[::-1], np.linalg.svd(a, compute_uv=False), rtol=1e-10)


# --- zigzag -----------------------------------------------------------------

def test_zigzag_example():
    norms = [9, 1, 8, 2, 7, 3, 6, 4]
    perm = zigzag_permutation(norms, 2)
    block0 = sorted(norms[i] for i in perm[:4])
    block1 = sorted(norms[i] for i in perm[4:])
    assert block0 == [1, 4, 6, 9]
    assert block1 == [2, 3, 7, 8]
    assert sum(block0) == sum(block1) == 20
    # dealt order inside each block
    assert [norms[i] for i in perm] == [9, 6, 4, 1, 8, 7, 3, 2]


def test_zigzag_equal_norms_is_bijection():
    perm = zigzag_permutation(np.ones(16), 4)
    assert sorted(perm.tolist()) == list(range(16))
    assert zigzag_permutation(np.ones(16), 1).tolist() == list(range(16))


def test_zigzag_single_block_is_descending():
    norms = np.array([0.5, 3.0, 1.0, 3.0, 2.0])
    assert zigzag_permutation(norms, 1).tolist() == [1, 3, 4, 2, 0]


def test_zigzag_requires_divisibility():
    with pytest.raises(ConfigError):
        zigzag_permutation(np.ones(10), 3)


def test_zigzag_balance_beats_contiguous():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        k = int(rng.choice([2, 4, 8]))
        n = k * int(rng.choice([4, 8, 16]))
        norms = rng.lognormal(0.0, 1.5, n)
        perm = zigzag_permutation(norms, k)
        zig = norms[perm].reshape(k, -1).sum(axis=1)
        contiguous = np.sort(norms)[::-1].reshape(k, -1).sum(axis=1)
        assert zig.max() / zig.min() <= contiguous.max() / contiguous.min() + 1e-12


# --- plans -----------------------------------------------------------------

def _rand(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def test_identity_plan_leaves_inputs_bit_unchanged():
    x, w = _rand(0, 5, 128), _rand(1, 128, 32)
    plan = build_plan(w, "identity", 64)
    assert plan.perm.tolist() == list(range(128))
    assert apply_to_activation(x, plan).tobytes() == x.tobytes()
    assert apply_to_weight(w, plan).tobytes() == w.tobytes()


def test_svd_hadamard_plan_has_orthogonal_blocks():
    plan = build_plan(_rand(2, 128, 64), "svd-hadamard", 64)
    assert len(plan.blocks) == 2
    for blk in plan.blocks:
        assert blk.shape == (64, 64)
        assert np.abs(blk.astype(np.float64) @ blk.T.astype(np.float64) - np.eye(64)).max() < 1e-5


def test_hadamard_plan_spike_activation():
    plan = build_plan(_rand(3, 128, 16), "hadamard", 64)
    for k in (0, 17, 127):
        x = np.zeros((1, 128), dtype=np.float32)
        x[0, k] = -12.5
        assert abs(np.abs(apply_to_activation(x, plan)).max() - 12.5 / 8) < 1e-6


def test_svd_hadamard_reconstruction():
    x, w = _rand(4, 32, 128), _rand(5, 128, 64)
    plan = build_plan(w, "svd-hadamard", 64)
    y = x.astype(np.float64) @ w.astype(np.float64)
    y2 = apply_to_activation(x, plan).astype(np.float64) @ apply_to_weight(w, plan).astype(np.float64)
    assert np.linalg.norm(y2 - y) / np.linalg.norm(y) < 1e-4


def test_permute_only_reorders_columns():
    x, w = _rand(6, 4, 128), _rand(7, 128, 8)
    plan = build_plan(w, "permute", 64)
    xp = apply_to_activation(x, plan)
    assert sorted(map(tuple, xp.T.tolist())) == sorted(map(tuple, x.T.tolist()))
    np.testing.assert_array_equal(xp, x[:, plan.perm])


def test_plan_permutation_sorts_by_row_norm():
    w = _rand(8, 128, 16)
    w[[3, 70]] *= 40
    plan = build_plan(w, "permute", 64)
    # two largest rows go to different blocks, each leading its block
    assert {int(plan.perm[0]), int(plan.perm[64])} == {3, 70}


def test_plan_rejects_non_power_of_two_hadamard():
    with pytest.raises(ConfigError):
        build_plan(_rand(0, 96, 8), "svd-hadamard", 48)
    plan = build_plan(_rand(0, 96, 8), "svd", 48)
    assert len(plan.blocks) == 2


def test_plan_shape_mismatch():
    plan = build_plan(_rand(0, 128, 8), "svd", 64)
    with pytest.raises(ConfigError):
        apply_to_activation(_rand(1, 3, 64), plan)
    with pytest.raises(ConfigError):
        apply_to_weight(_rand(1, 64, 8), plan)


def test_remainder_channels_pass_through():
    w = _rand(9, 80, 24)
    w[5] *= 0.01
    plan = build_plan(w, "svd-hadamard", 64)
    assert plan.n_blocks == 1 and plan.remainder == 16
    # the lowest-norm channel is in the unrotated tail
    assert 5 in plan.perm[64:].tolist()
    x = _rand(10, 7, 80)
    xr = apply_to_activation(x, plan)
    np.testing.assert_array_equal(xr[:, 64:], x[:, plan.perm[64:]])
    t = plan.full_transform()
    assert np.abs(t @ t.T - np.eye(80)).max() < 1e-5
    y = x.astype(np.float64) @ w
    y2 = xr.astype(np.float64) @ apply_to_weight(w, plan)
    assert np.linalg.norm(y2 - y) / np.linalg.norm(y) < 1e-4


def test_svd_plan_equalizes_row_energy():
    w = _rand(12, 128, 96)
    w[np.arange(0, 128, 9)] *= 20
    plan = build_plan(w, "svd", 64)
    wr = apply_to_weight(w, plan).astype(np.float64)
    for b, info in enumerate(plan.spectra):
        rows = np.linalg.norm(wr[b * 64 : (b + 1) * 64], axis=1)
        np.testing.assert_allclose(rows, info.singular_values, rtol=1e-4)


def test_plan_serialization_round_trip():
    w = _rand(13, 128, 32)
    for kind in ALL_KINDS:
        plan = build_plan(w, kind, 64)
        tensors = decode_container(encode_container(plan.to_tensors("llm0.q")))
        back = RotationPlan.from_tensors("llm0.q", plan.meta(), tensors)
        assert back.kind is RotationKind.parse(kind)
        np.testing.assert_array_equal(back.perm, plan.perm)
        for a, b in zip(back.blocks, plan.blocks):
            assert a.tobytes() == b.tobytes()
        assert sum(t.nbytes for t in tensors.values()) == plan.rotation_nbytes + plan.perm_nbytes


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from([64, 128, 256]),
    st.sampled_from(ALL_KINDS),
    st.sampled_from([16, 32, 64]),
    st.integers(0, 10_000),
)
def test_plan_orthogonality_and_reconstruction(c_in, kind, block, seed):
    rng = np.random.default_rng(seed)
    w = (rng.standard_normal((c_in, 24)) * rng.lognormal(0, 1, (c_in, 1))).astype(np.float32)
    x = rng.standard_normal((9, c_in)).astype(np.float32)
    plan = build_plan(w, kind, block)
    t = plan.full_transform()
    assert np.abs(t @ t.T - np.eye(c_in)).max() < 1e-5
    y = x.astype(np.float64) @ w
    y2 = apply_to_activation(x, plan).astype(np.float64) @ apply_to_weight(w, plan)
    assert np.linalg.norm(y2 - y) / np.linalg.norm(y) < 1e-4
