import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tensormatch.errors import ConfigurationError, MissingFileError, VolumeFormatError
from tensormatch.grid import VolumeGrid
from tensormatch.so3 import (
    RotationSet,
    UnitQuaternion,
    angular_distance,
    canonicalize,
    quat_conj,
    quat_multiply,
    quat_to_matrix,
    random_unit_quaternions,
    read_rotation_set,
    rotate_array,
    rotate_volume,
    sample_haar,
    write_rotation_set,
)

quats = st.integers(0, 2**32 - 1).map(lambda s: random_unit_quaternions(1, s)[0])
H = math.sqrt(2) / 2


def smooth_blob(size=41, sigma=3.0, aniso=(1.0, 1.5, 2.0), offset=(1.0, 0.0, -1.0)):
    c = np.arange(size) - size // 2.0
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    r2 = (gx - offset[0]) ** 2 / aniso[0] + (gy - offset[1]) ** 2 / aniso[1] + (gz - offset[2]) ** 2 / aniso[2]
    return np.exp(-r2 / (2 * sigma * sigma))


def rms(a):
    return float(np.sqrt(np.mean(a * a)))


class TestQuaternion:
    def test_unit_check(self):
        with pytest.raises(ConfigurationError):
            UnitQuaternion(1.0, 1.0, 0.0, 0.0)
        q = UnitQuaternion.from_array([2.0, 0, 0, 0], normalize=True)
        assert q == UnitQuaternion.identity()

    def test_identity_matrix(self):
        assert np.array_equal(quat_to_matrix(UnitQuaternion.identity()), np.eye(3))

    def test_x90(self):
        m = quat_to_matrix([H, H, 0, 0])
        ref = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
        assert np.max(np.abs(m - ref)) < 1e-12

    @given(quats)
    def test_orthogonal(self, q):
        m = quat_to_matrix(q)
        assert np.max(np.abs(m.T @ m - np.eye(3))) < 1e-12
        assert abs(np.linalg.det(m) - 1) < 1e-12
        assert np.max(np.abs(quat_to_matrix(-q) - m)) == 0

    def test_non_unit_rejected(self):
        with pytest.raises(ConfigurationError):
            quat_to_matrix([1.0, 0.1, 0, 0])

    @given(quats, quats)
    def test_product_homomorphism(self, p, q):
        lhs = quat_to_matrix(quat_multiply(p, q))
        assert np.max(np.abs(lhs - quat_to_matrix(p) @ quat_to_matrix(q))) < 1e-12

    @given(quats, quats)
    def test_inner_product_is_real_part(self, x, y):
        re = quat_multiply(quat_conj(y), x)[0]
        assert abs(np.dot(x, y) - re) < 1e-12

    @given(quats)
    def test_canonical(self, q):
        c = canonicalize(q)
        assert c[0] >= 0
        assert np.array_equal(canonicalize(-q), c)

    def test_canonical_tie(self):
        assert canonicalize([0.0, -1.0, 0.0, 0.0]).tolist() == [0.0, 1.0, 0.0, 0.0]

    def test_dataclass_ops(self):
        q = UnitQuaternion.from_array(random_unit_quaternions(1, 4)[0])
        assert angular_distance(q * q.conj(), UnitQuaternion.identity()) < 1e-7
        assert q.canonical().a >= 0


class TestAngularDistance:
    def test_examples(self):
        p = np.array([1.0, 0, 0, 0])
        assert angular_distance(p, p) == 0
        assert angular_distance(p, -p) == 0
        assert abs(angular_distance(p, [H, H, 0, 0]) - math.pi / 2) < 1e-12

    @given(quats, quats)
    def test_range_and_symmetry(self, p, q):
        d = angular_distance(p, q)
        assert 0 <= d <= math.pi
        assert d == angular_distance(q, p) == angular_distance(-p, q)


class TestHaar:
    def test_unit_and_deterministic(self):
        a = sample_haar(1000, 3)
        assert np.max(np.abs(np.linalg.norm(a.quats, axis=1) - 1)) < 1e-12
        assert np.array_equal(a.quats, sample_haar(1000, 3).quats)
        assert np.allclose(a.weights, 1e-3)
        assert a.kind == "haar_random" and a.seed == 3

    def test_moments(self):
        n = 100_000
        q = sample_haar(n, 9).quats
        tol = 4 / math.sqrt(n)
        assert np.all(np.abs(q.mean(axis=0)) <= tol)
        assert abs(np.mean(q[:, 0] ** 2) - 0.25) <= tol

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            sample_haar(0, 1)
        with pytest.raises(ConfigurationError):
            RotationSet(np.array([[1.0, 0, 0, 0]]), np.array([0.0]))
        with pytest.raises(ConfigurationError):
            RotationSet(np.array([[1.0, 1.0, 0, 0]]), np.array([1.0]))

    def test_file_roundtrip(self, tmp_path):
        rs = sample_haar(20, 5)
        write_rotation_set(rs, tmp_path / "r.json")
        back = read_rotation_set(tmp_path / "r.json")
        assert np.max(np.abs(back.quats - rs.quats)) < 1e-15
        assert back.seed == 5 and back.kind == "haar_random"

    def test_file_errors(self, tmp_path):
        with pytest.raises(MissingFileError):
            read_rotation_set(tmp_path / "none.json")
        (tmp_path / "bad.json").write_text('{"quats": [[1, 0, 0]]}')
        with pytest.raises(VolumeFormatError):
            read_rotation_set(tmp_path / "bad.json")

    def test_identity_first(self):
        rs = sample_haar(5, 1).with_identity_first()
        assert rs.quats[0].tolist() == [1.0, 0, 0, 0]
        assert len(rs) == 5


class TestRotateVolume:
    def test_identity_exact(self, particle):
        out = rotate_volume(particle, UnitQuaternion.identity())
        assert np.array_equal(out.data, particle.data)

    def test_requires_centre_origin_odd(self):
        with pytest.raises(ConfigurationError):
            rotate_volume(VolumeGrid(np.zeros((5, 5, 5))), [1.0, 0, 0, 0])
        with pytest.raises(ConfigurationError):
            rotate_volume(VolumeGrid(np.zeros((4, 5, 5)), 1.0, True), [1.0, 0, 0, 0])

    def test_convention(self):
        # t_R(z) = t(Mᵀ z): a point mass at +x moves to +y under 90° about z.
        t = np.zeros((9, 9, 9))
        t[6, 4, 4] = 1.0
        out = rotate_array(t, [H, 0, 0, H])
        assert np.unravel_index(np.argmax(out), out.shape) == (4, 6, 4)
        assert abs(out.max() - 1) < 1e-12

    def test_radial_invariance(self):
        t = smooth_blob(aniso=(1, 1, 1), offset=(0, 0, 0))
        for q in random_unit_quaternions(10, 2):
            assert rms(rotate_array(t, q) - t) <= 1e-3

    def test_composition(self):
        t = smooth_blob()
        qs = random_unit_quaternions(20, 3)
        for q1, q2 in zip(qs[::2], qs[1::2]):
            lhs = rotate_array(t, quat_multiply(q1, q2))
            rhs = rotate_array(rotate_array(t, q2), q1)
            assert rms(lhs - rhs) <= 2e-3

    def test_mass_preserved(self):
        t = smooth_blob(size=33, sigma=2.5)
        for q in random_unit_quaternions(10, 4):
            assert abs(rotate_array(t, q).sum() / t.sum() - 1) <= 1e-2

    def test_support_radius_is_exact(self, particle, cfg):
        from tensormatch.grid import normalize_template
        th = normalize_template(particle, cfg).data
        for q in random_unit_quaternions(3, 6):
            assert np.array_equal(rotate_array(th, q, cfg.r1), rotate_array(th, q))
