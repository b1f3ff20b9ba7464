"""Independent oracles, synthetic scenes with ground truth, and the K-coefficient check."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import ConfigurationError
from .grid import VolumeGrid
from .so3 import canonicalize, random_unit_quaternions, rng_for, rotate_array
from .symtensor import SymTensor, contract, contract_components, evaluate


@dataclass(eq=False)
class SyntheticScene:
    volume: VolumeGrid
    truth: list  # [(pos, quat)]
    noise_sigma: float
    seed: int


def blob_template(size: int = 25, voxel_size: float = 1.0) -> VolumeGrid:
    """Asymmetric test particle: a bent chain of three Gaussian lobes plus an off-axis knob.

    No rotation maps it onto itself. The chain alone is nearly symmetric under a
    half turn about y; the knob is large enough to break that clearly, since an
    order-4 tensor template sees only coarse angular detail. Lobes are shifted
    so the mass centroid sits on the centre voxel, which keeps the Frobenius
    peak on the insertion point.
    """
    if size % 2 == 0:
        raise ConfigurationError("template size must be odd")
    lobes = [
        ((-5.0, -1.0, 0.0), 2.0, 1.0),
        ((0.0, 1.5, 0.0), 2.2, 1.0),
        ((5.0, -1.0, 0.0), 2.0, 1.0),
        ((1.0, -2.5, 4.5), 1.8, 1.0),
    ]
    mass = np.array([amp * s**3 for _, s, amp in lobes])
    centroid = mass @ np.array([p for p, _, _ in lobes]) / mass.sum()
    c = np.arange(size, dtype=np.float64) - size // 2
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    t = np.zeros((size, size, size))
    for p, s, amp in lobes:
        x0, y0, z0 = np.subtract(p, centroid)
        t += amp * np.exp(-((gx - x0) ** 2 + (gy - y0) ** 2 + (gz - z0) ** 2) / (2 * s * s))
    return VolumeGrid(t, voxel_size, True)


def make_scene(t: VolumeGrid, placements, noise_sigma: float, seed: int, dims=(64, 64, 64),
               min_separation: float | None = None) -> SyntheticScene:
    """Add ``rotate_volume(t, q)`` at each ``(pos, q)`` and seeded Gaussian noise.

    The box wraps around faces, matching the circular correlation convention.
    """
    dims = tuple(int(n) for n in dims)
    min_separation = float(max(t.dims)) if min_separation is None else min_separation
    placements = [(tuple(int(p) for p in pos), np.asarray(q, dtype=np.float64)) for pos, q in placements]
    for pos, _ in placements:
        if any(not 0 <= p < n for p, n in zip(pos, dims)):
            raise ConfigurationError(f"placement {pos} outside scene dims {dims}")
    for (p1, _), (p2, _) in itertools.combinations(placements, 2):
        if math.dist(p1, p2) < min_separation:
            raise ConfigurationError(f"placements {p1} and {p2} closer than {min_separation}")
    vol = np.zeros(dims)
    for pos, q in placements:
        tq = rotate_array(t.data, q)
        idx = [(np.arange(n) - n // 2 + p) % s for n, p, s in zip(tq.shape, pos, dims)]
        vol[np.ix_(*idx)] += tq
    if noise_sigma > 0:
        vol = vol + noise_sigma * rng_for(seed).standard_normal(dims)
    truth = [(pos, canonicalize(q)) for pos, q in placements]
    return SyntheticScene(VolumeGrid(vol, t.voxel_size, False), truth, float(noise_sigma), int(seed))


def noise_sigma_for_snr(t: VolumeGrid, snr: float) -> float:
    """Noise std giving ``var(signal) / var(noise) = snr`` over the template support."""
    support = t.data[np.abs(t.data) > 1e-3 * np.abs(t.data).max()]
    return float(np.std(support) / math.sqrt(snr))


def phi_max_grid(comp: np.ndarray, n: int, grid_n: int, seed: int):
    q = random_unit_quaternions(grid_n, seed)
    vals = evaluate(comp, q, n)
    i = int(np.argmax(vals))
    return float(vals[i]), q[i]


def brute_force_phi_max(C: SymTensor, grid_n: int = 10_000, seed: int = 0, refine_steps: int = 50,
                        top_k: int = 32):
    """Max of ``C·q^⊙n`` over ``grid_n`` Haar samples, with the best ``top_k`` samples
    each polished by projected gradient ascent.

    Near-equal maxima can sit in different basins, so polishing the single grid
    argmax is not enough. A step is accepted only if it increases φ; otherwise
    the step size halves.
    """
    if grid_n < 10_000:
        raise ConfigurationError("brute_force_phi_max needs grid_n >= 1e4")
    q = random_unit_quaternions(grid_n, seed)
    vals = evaluate(C.comp, q, C.n)
    keep = np.argsort(-vals, kind="stable")[:top_k]
    q, lam = q[keep], vals[keep]
    step = np.full(len(q), 0.1)
    for _ in range(refine_steps):
        g = C.n * contract_components(C.comp, q, C.n)
        g -= np.sum(g * q, axis=1, keepdims=True) * q
        gnorm = np.linalg.norm(g, axis=1, keepdims=True)
        pending = gnorm[:, 0] > 0
        direction = np.divide(g, gnorm, out=np.zeros_like(g), where=gnorm > 0)
        s = step.copy()
        for _ in range(40):
            if not pending.any():
                break
            trial = q + s[:, None] * direction
            trial /= np.linalg.norm(trial, axis=1, keepdims=True)
            tv = evaluate(C.comp, trial, C.n)
            up = pending & (tv > lam)
            q[up], lam[up], step[up] = trial[up], tv[up], 2 * s[up]
            pending &= ~up
            s[pending] *= 0.5
    i = int(np.argmax(lam))
    return float(lam[i]), canonicalize(q[i])


def lemma_k_coefficient(ell: int, n: int) -> float:
    """``∫_0^π cos^n θ sin((ℓ+1)θ) sin θ dθ`` by adaptive Gauss–Kronrod quadrature.

    The positive factor ``4π A_ℓ`` is omitted; only the sign carries meaning.
    """
    if ell < 0:
        raise ConfigurationError("ell must be >= 0")
    val, _ = integrate.quad(lambda th: math.cos(th) ** n * math.sin((ell + 1) * th) * math.sin(th),
                            0.0, math.pi, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


# Dense oracles: expand the compressed form to all 4^n entries.

def to_dense(A: SymTensor) -> np.ndarray:
    n = A.n
    dense = np.empty((4,) * n)
    for idx in itertools.product(range(4), repeat=n):
        e = tuple(idx.count(j) for j in range(4))
        dense[idx] = A.comp[A.table.index[e]]
    return dense


def dense_dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(a * b))


def dense_contract(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = a
    for _ in range(a.ndim - 1):
        out = out @ x
    return out


def dense_frobenius(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(a * a)))


def dense_power(x: np.ndarray, n: int) -> np.ndarray:
    out = np.asarray(x, dtype=np.float64)
    for _ in range(n - 1):
        out = np.multiply.outer(out, x)
    return out


def sphere_moment_tensor(n: int = 4) -> dict:
    """Closed-form ``E[q^e]`` for q uniform on S^3 (zero when any exponent is odd)."""
    def moment(e):
        if any(k % 2 for k in e):
            return 0.0
        # E[∏ x_j^{2k_j}] = ∏ (2k_j-1)!! / (d (d+2) ... (d+n-2)), d = 4
        num = math.prod(math.prod(range(1, k, 2)) for k in e)
        den = math.prod(4 + 2 * i for i in range(n // 2))
        return num / den
    from .symtensor import multi_index_table
    table = multi_index_table(n)
    return {tuple(int(k) for k in e): moment(e) for e in table.entries}


# Invariant suite behind the ``validate`` command. Every check is small and
# seeded; each returns (passed, detail).

def _check_tensor_identity(rng):
    from .symtensor import power_components
    x = rng.standard_normal((1000, 4))
    y = rng.standard_normal((1000, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    from .symtensor import multi_index_table
    mult = multi_index_table(4).mult
    lhs = np.sum(mult * power_components(x, 4) * power_components(y, 4), axis=1)
    rhs = np.sum(x * y, axis=1) ** 4
    err = float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-300)))
    # Near-orthogonal pairs make the relative error ill-posed; guard with an absolute floor.
    err_abs = float(np.max(np.abs(lhs - rhs)))
    return err_abs <= 1e-12 or err <= 1e-10, {"max_abs_err": err_abs}


def _check_dense(rng):
    from .symtensor import frobenius, multi_index_table, tensor_dot
    worst = 0.0
    for n in (2, 4):
        table = multi_index_table(n)
        for _ in range(10):
            a = SymTensor(table, rng.standard_normal(len(table)))
            b = SymTensor(table, rng.standard_normal(len(table)))
            x = rng.standard_normal(4)
            da, db = to_dense(a), to_dense(b)
            worst = max(worst,
                        abs(tensor_dot(a, b) - dense_dot(da, db)),
                        float(np.max(np.abs(contract(a, x) - dense_contract(da, x)))),
                        abs(frobenius(a) - dense_frobenius(da)))
    return worst <= 1e-12, {"max_abs_err": worst}


def _check_sshopm(rng):
    from .symtensor import multi_index_table, sshopm
    table = multi_index_table(4)
    worst = 0.0
    for _ in range(5):
        a = SymTensor(table, rng.standard_normal(len(table)))
        lam = sshopm(a).lam
        ref, _ = brute_force_phi_max(a, 10_000, int(rng.integers(1 << 31)))
        worst = max(worst, (ref - lam) / abs(ref))
    return worst <= 1e-3, {"max_rel_shortfall": worst}


def _check_lemma():
    vals = {(ell, n): lemma_k_coefficient(ell, n) for ell in range(17) for n in (2, 4, 6)}
    nonneg = min(vals.values()) >= -1e-12
    odd = max(abs(v) for (ell, _), v in vals.items() if ell % 2) <= 1e-12
    return nonneg and odd, {"min": min(vals.values()), "k_0_2": vals[(0, 2)]}


def _check_cauchy_schwarz(rng):
    from .grid import SspConfig, s_inner
    cfg = SspConfig(1.0, 4.0, 6.0)
    worst = -math.inf
    for _ in range(20):
        f = VolumeGrid(rng.standard_normal((16, 16, 16)))
        g = VolumeGrid(rng.standard_normal((16, 16, 16)))
        gap = abs(s_inner(f, g, cfg)) - math.sqrt(s_inner(f, f, cfg) * s_inner(g, g, cfg))
        worst = max(worst, gap)
    return worst <= 1e-9, {"max_gap": worst}


def _check_fft_correlation(rng):
    from .grid import correlate_arrays
    f = rng.standard_normal((12, 12, 12))
    g = rng.standard_normal((5, 5, 5))
    out = correlate_arrays(f, g)
    ref = np.zeros_like(f)
    off = np.arange(5) - 2
    for x in np.ndindex(f.shape):
        idx = [(off + p) % 12 for p in x]
        ref[x] = np.sum(f[np.ix_(*idx)] * g)
    err = float(np.max(np.abs(out - ref)) / np.max(np.abs(ref)))
    return err <= 1e-9, {"max_rel_err": err}


def _check_template_normalization():
    from .grid import SspConfig, normalize_template
    cfg = SspConfig(1.0, 8.0, 10.0)
    t = blob_template()
    th = normalize_template(t, cfg).data
    m = cfg.mask(t.dims)
    inside = m > 0
    unit = float(np.sum(th[inside] ** 2 / m[inside]))
    total = float(np.sum(th))
    affine = normalize_template(VolumeGrid(3.7 * t.data - 2.1, 1.0, True), cfg).data
    ok = abs(unit - 1) <= 1e-9 and abs(total) <= 1e-9 * np.abs(th).sum() and np.max(np.abs(affine - th)) <= 1e-9
    return ok, {"s_norm_sq": unit, "sum": total}


def _check_quadrature_equivalence(rng):
    from .grid import SspConfig
    from .matching import build_tensor_template, classical_match, correlation_tensor_field
    from .so3 import sample_haar
    cfg = SspConfig(1.0, 8.0, 10.0)
    t = blob_template()
    rots = sample_haar(64, 5)
    scene = make_scene(t, [((16, 15, 17), random_unit_quaternions(1, 3)[0])], 0.1, 4, dims=(32, 32, 32))
    vox = rng.integers(0, 32, size=(5, 3))
    cl = classical_match(scene.volume, t, rots, cfg, record_at=vox)
    C = correlation_tensor_field(scene.volume, build_tensor_template(t, rots, cfg), cfg)
    qs = random_unit_quaternions(5, int(rng.integers(1 << 31)))
    worst = 0.0
    for j, x in enumerate(vox):
        ref = ((qs @ rots.quats.T) ** 4 * rots.weights) @ cl.samples[:, j]
        got = evaluate(C.at(x).comp, qs, 4)
        worst = max(worst, float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-300)))
    return worst <= 1e-6, {"max_rel_err": worst}


def _check_rotation_composition(rng):
    from .so3 import quat_multiply
    c = np.arange(33) - 16.0
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    t = np.exp(-((gx - 1) ** 2 + gy ** 2 / 1.5 + (gz + 1) ** 2 / 2) / 12.5)
    q1, q2 = random_unit_quaternions(2, int(rng.integers(1 << 31)))
    lhs = rotate_array(t, quat_multiply(q1, q2))
    rhs = rotate_array(rotate_array(t, q2), q1)
    rms = float(np.sqrt(np.mean((lhs - rhs) ** 2)))
    return rms <= 2e-3, {"rms": rms}


def _check_haar_moments():
    n = 100_000
    q = random_unit_quaternions(n, 1)
    tol = 4 / math.sqrt(n)
    ok = np.all(np.abs(q.mean(axis=0)) <= tol) and abs(np.mean(q[:, 0] ** 2) - 0.25) <= tol
    return bool(ok), {"mean_a2": float(np.mean(q[:, 0] ** 2))}


def _check_ratio():
    ratio = round(7112 / 35, 1)
    return ratio == 203.2, {"ratio_7112": ratio}


def run_invariant_suite(seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    checks = [
        ("tensor_power_identity", lambda: _check_tensor_identity(rng)),
        ("compressed_vs_dense", lambda: _check_dense(rng)),
        ("sshopm_vs_grid_oracle", lambda: _check_sshopm(rng)),
        ("lemma_k_nonnegative", _check_lemma),
        ("cauchy_schwarz", lambda: _check_cauchy_schwarz(rng)),
        ("fft_vs_direct_correlation", lambda: _check_fft_correlation(rng)),
        ("template_normalization", _check_template_normalization),
        ("quadrature_equivalence", lambda: _check_quadrature_equivalence(rng)),
        ("rotation_composition", lambda: _check_rotation_composition(rng)),
        ("haar_moments", _check_haar_moments),
        ("correlation_ratio_7112", _check_ratio),
    ]
    report = []
    for name, fn in checks:
        ok, detail = fn()
        report.append({"name": name, "status": "pass" if ok else "fail",
                       "detail": {k: float(v) for k, v in detail.items()}})
    return report
