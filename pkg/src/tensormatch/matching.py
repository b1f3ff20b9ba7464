"""Classical rotation-sampled matching and tensorial template matching (TTM).

Both paths share the same pre-processing: the search image is low-passed,
per-voxel weights ``w(x)`` come from :func:`grid.weight_map_filtered`, and the
template is reduced to its masked, normalized form before any rotation.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, VolumeFormatError
from .grid import (
    Correlator,
    SspConfig,
    VolumeGrid,
    WeightVolume,
    _volume_paths,
    isotropic_part,
    load_header,
    lowpass_array,
    normalize_template,
    parse_dims,
    read_payload,
    weight_map_filtered,
)
from .so3 import RotationSet, rotate_many
from .symtensor import (
    MultiIndexTable,
    SymTensor,
    ZEigenpair,
    multi_index_table,
    power_components,
    sphere_moments,
    sshopm,
)

log = logging.getLogger(__name__)

INDEX_ORDER = "graded-lex-desc"


@dataclass(eq=False)
class TensorField:
    table: MultiIndexTable
    comps: np.ndarray  # (K, nx, ny, nz)
    voxel_size: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.comps = np.asarray(self.comps, dtype=np.float64)
        if self.comps.ndim != 4 or self.comps.shape[0] != len(self.table):
            raise ConfigurationError(
                f"tensor field needs {len(self.table)} component volumes, got {self.comps.shape}"
            )

    @property
    def n_components(self) -> int:
        return len(self.table)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.comps.shape[1:])

    def at(self, pos) -> SymTensor:
        i, j, k = (int(p) for p in pos)
        return SymTensor(self.table, self.comps[:, i, j, k].copy())

    def component(self, alpha) -> VolumeGrid:
        if not isinstance(alpha, int):
            alpha = self.table.index[tuple(alpha)]
        return VolumeGrid(self.comps[alpha], self.voxel_size, bool(self.meta.get("center_origin", False)))


@dataclass
class Detection:
    pos: tuple[int, int, int]
    quat: np.ndarray
    lam: float
    frob: float
    border: bool
    converged: bool = True
    ncc_rescore: float | None = None

    def to_dict(self) -> dict:
        d = {
            "pos": [int(p) for p in self.pos],
            "quat": [float(x) for x in self.quat],
            "lambda": float(self.lam),
            "frob": float(self.frob),
            "border": bool(self.border),
        }
        if self.ncc_rescore is not None:
            d["ncc_rescore"] = float(self.ncc_rescore)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(tuple(d["pos"]), np.asarray(d["quat"], dtype=np.float64), d["lambda"], d["frob"],
                   d["border"], True, d.get("ncc_rescore"))


@dataclass(eq=False)
class ClassicalResult:
    best_c: VolumeGrid
    best_rot: np.ndarray
    n_correlations: int
    weights: WeightVolume
    samples: np.ndarray | None = None  # (n_rot, n_voxels) when requested


@dataclass
class PeakParams:
    k_sigma: float = 5.0
    min_sep: float | None = None  # defaults to cfg.r1
    restarts: int = 16
    alpha: object = "adaptive"
    tol: float = 1e-10
    max_iter: int = 500
    seed: int = 0
    rescore: bool = False
    refine: int = 0  # >0: move each peak to the max-λ voxel within this cube radius


@dataclass
class Peak:
    pos: tuple[int, int, int]
    value: float
    border: bool


def _prepare_image(f: VolumeGrid, cfg: SspConfig, eps_var):
    hf = lowpass_array(f.data, cfg, "wrap")
    corr = Correlator(hf)
    weights = weight_map_filtered(hf, cfg, eps_var, raw=f.data, correlator=corr)
    corr.count = 0
    return hf, corr, weights


def rotated_templates(t_hat: np.ndarray, quats, cfg: SspConfig) -> np.ndarray:
    """Rotations of ``t_hat``, flattened to ``(N, t_hat.size)``, each re-zeroed.

    Trilinear resampling leaks a little mass, and a nonzero template sum lets
    the image offset into the score. Subtracting a multiple of the (rotation
    invariant) mask restores ``Σ t̂_R = 0`` without widening the support.
    """
    r = rotate_many(t_hat, np.atleast_2d(quats), cfg.r1)
    m = cfg.mask(t_hat.shape).ravel()
    return r - (r.sum(axis=1) / m.sum())[:, None] * m[None, :]


def rotated_template(t_hat: np.ndarray, q, cfg: SspConfig) -> np.ndarray:
    return rotated_templates(t_hat, q, cfg)[0].reshape(t_hat.shape)


def classical_match(f: VolumeGrid, t: VolumeGrid, rots: RotationSet, cfg: SspConfig,
                    eps_var: float | None = None, record_at=None) -> ClassicalResult:
    """Max over ``rots`` of ``c(x, R) = w(x) ((h∗f) ⋆ t̂_R)(x)``, one FFT per rotation.

    The argmax index keeps the first rotation on ties. ``record_at`` is an
    optional ``(M, 3)`` voxel list; ``c`` at those voxels is kept for every
    rotation in ``result.samples``.
    """
    t_hat = normalize_template(t, cfg).data
    hf, corr, weights = _prepare_image(f, cfg, eps_var)
    w = weights.w.data
    best = None
    best_rot = np.zeros(f.dims, dtype=np.int64)
    samples = None
    if record_at is not None:
        record_at = np.atleast_2d(np.asarray(record_at, dtype=np.int64))
        samples = np.empty((len(rots), len(record_at)))
        sel = tuple(record_at.T)
    for i, q in enumerate(rots.quats):
        c = w * corr(rotated_template(t_hat, q, cfg))
        if samples is not None:
            samples[i] = c[sel]
        if best is None:
            best = c
        else:
            better = c > best
            best = np.where(better, c, best)
            best_rot[better] = i
    log.info("classical: %d correlations", corr.count)
    return ClassicalResult(f.like(best), best_rot, corr.count, weights, samples)


QUADRATURES = ("plain", "isotropic_cv")


def build_tensor_template(t: VolumeGrid, rots: RotationSet, cfg: SspConfig, n: int = 4,
                          batch: int = 256, threads: int = 1, quadrature: str = "plain") -> TensorField:
    """``T[α](z) = Σ_i w_i (q_i^⊙n)[α] t̂_{q_i}(z)`` over the rotation set.

    Rotations are processed in fixed batches; partial sums are reduced in batch
    order, so the result does not depend on ``threads``.

    ``quadrature="isotropic_cv"`` uses the radial average ``t̂_iso`` of t̂ as a
    control variate: it is rotation invariant, so its integral is exactly
    ``M[α] t̂_iso`` with ``M`` the moment tensor of the uniform sphere, and only
    ``t̂ - t̂_iso`` is sampled. The estimate stays unbiased with far less noise
    for templates with a large radial component.
    """
    table = multi_index_table(n)
    if len(rots) == 0:
        raise ConfigurationError("empty rotation set")
    if quadrature not in QUADRATURES:
        raise ConfigurationError(f"unknown quadrature {quadrature!r}; choose from {QUADRATURES}")
    t_hat = normalize_template(t, cfg).data
    iso = None
    if quadrature == "isotropic_cv":
        iso = isotropic_part(t_hat)
        m = cfg.mask(t_hat.shape)
        iso = iso - iso.sum() / m.sum() * m
        t_hat = t_hat - iso
    starts = list(range(0, len(rots), batch))

    def partial(s):
        q = rots.quats[s:s + batch]
        coeff = power_components(q, n) * rots.weights[s:s + batch, None]  # (B, K)
        return coeff.T @ rotated_templates(t_hat, q, cfg)  # (K, V)

    acc = np.zeros((len(table), t_hat.size))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            for part in pool.map(partial, starts):
                acc += part
    else:
        for s in starts:
            acc += partial(s)
    if iso is not None:
        moments = sphere_moments(table)
        acc += moments[:, None] * iso.ravel()[None, :]
    meta = {
        "rotset_seed": rots.seed,
        "rotset_count": len(rots),
        "ssp": cfg.to_dict(),
        "center_origin": True,
        "quadrature": quadrature,
    }
    log.info("tensor template: %d rotations, %d components", len(rots), len(table))
    return TensorField(table, acc.reshape((len(table),) + t_hat.shape), t.voxel_size, meta)


def correlation_tensor_field(f: VolumeGrid, T: TensorField, cfg: SspConfig,
                             eps_var: float | None = None) -> TensorField:
    """``C[α](x) = w(x) ((h∗f) ⋆ T[α])(x)``: exactly one FFT correlation per component."""
    hf, corr, weights = _prepare_image(f, cfg, eps_var)
    w = weights.w.data
    comps = np.empty((T.n_components,) + f.dims)
    for a in range(T.n_components):
        comps[a] = w * corr(T.comps[a])
    log.info("correlation tensor field: %d correlations", corr.count)
    meta = {"n_correlations": corr.count, "weights": weights, "hf": hf}
    return TensorField(T.table, comps, f.voxel_size, meta)


def frobenius_map(C: TensorField) -> VolumeGrid:
    mult = C.table.mult[:, None, None, None]
    return VolumeGrid(np.sqrt(np.sum(mult * C.comps * C.comps, axis=0)), C.voxel_size)


def is_border(pos, dims, width: float) -> bool:
    return any(p < width or p > n - 1 - width for p, n in zip(pos, dims))


def find_peaks(F: VolumeGrid, k_sigma: float = 5.0, min_sep: float = 10.0,
               border_width: float | None = None) -> list[Peak]:
    """26-neighbourhood maxima above ``mean + k_sigma std``, greedily thinned.

    Candidates are visited by descending value (ties in index order) and kept
    unless a kept peak lies within ``min_sep`` voxels.
    """
    if not min_sep > 0:
        raise ConfigurationError(f"min_sep must be positive, got {min_sep}")
    border_width = min_sep if border_width is None else border_width
    data = F.data
    threshold = data.mean() + k_sigma * data.std()
    local_max = ndimage.maximum_filter(data, size=3, mode="wrap") == data
    cand = np.argwhere(local_max & (data > threshold))
    if len(cand) == 0:
        return []
    values = data[tuple(cand.T)]
    order = np.argsort(-values, kind="stable")
    kept: list[np.ndarray] = []
    peaks = []
    sep2 = min_sep * min_sep
    for i in order:
        p = cand[i]
        if any(np.sum((p - k) ** 2) < sep2 for k in kept):
            continue
        kept.append(p)
        pos = tuple(int(x) for x in p)
        peaks.append(Peak(pos, float(values[i]), is_border(pos, F.dims, border_width)))
    return peaks


def recover_rotation(C: TensorField, pos, **solver) -> ZEigenpair:
    if any(not 0 <= int(p) < n for p, n in zip(pos, C.dims)):
        raise ConfigurationError(f"position {tuple(pos)} outside field dims {C.dims}")
    return sshopm(C.at(pos), **solver)


def local_score(hf: np.ndarray, w: np.ndarray, tq: np.ndarray, pos) -> float:
    """``c(pos, q)`` by a direct windowed sum (wrapping like the FFT path)."""
    idx = [(np.arange(n) - n // 2 + p) % s for n, p, s in zip(tq.shape, pos, hf.shape)]
    window = hf[np.ix_(*idx)]
    return float(w[tuple(pos)] * np.sum(window * tq))


def _cube_offsets(radius: int):
    rng = range(-radius, radius + 1)
    return [(i, j, k) for i in rng for j in rng for k in rng if (i, j, k) != (0, 0, 0)]


@dataclass(eq=False)
class TTMRun:
    detections: list
    field: TensorField
    frob: VolumeGrid
    n_correlations: int
    peaks: list


def run_ttm(f: VolumeGrid, t: VolumeGrid | None, rots: RotationSet | None, cfg: SspConfig,
            peak_params: PeakParams | None = None, tensor: TensorField | None = None,
            n: int = 4, eps_var: float | None = None, threads: int = 1,
            quadrature: str = "plain") -> TTMRun:
    """Full TTM pipeline; pass ``tensor`` to reuse a prebuilt template."""
    pp = peak_params or PeakParams()
    if tensor is None:
        if t is None or rots is None:
            raise ConfigurationError("need a template and rotation set, or a prebuilt tensor template")
        tensor = build_tensor_template(t, rots, cfg, n, threads=threads, quadrature=quadrature)
    C = correlation_tensor_field(f, tensor, cfg, eps_var)
    frob = frobenius_map(C)
    min_sep = cfg.r1 if pp.min_sep is None else pp.min_sep
    peaks = find_peaks(frob, pp.k_sigma, min_sep, border_width=cfg.r1)
    log.info("ttm: %d candidate peaks", len(peaks))
    solver = dict(restarts=pp.restarts, alpha=pp.alpha, tol=pp.tol, max_iter=pp.max_iter, seed=pp.seed)

    def solve(peak):
        pair = recover_rotation(C, peak.pos, **solver)
        if pp.refine <= 0:
            return peak.pos, pair
        best_pos, best = peak.pos, pair
        # The peak itself is tried first, so it wins ties.
        for d in _cube_offsets(pp.refine):
            pos = tuple(int(p + o) for p, o in zip(peak.pos, d))
            if any(not 0 <= p < n for p, n in zip(pos, C.dims)):
                continue
            cand = recover_rotation(C, pos, **solver)
            if cand.lam > best.lam:
                best_pos, best = pos, cand
        return best_pos, best

    if threads > 1 and len(peaks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            pairs = list(pool.map(solve, peaks))
    else:
        pairs = [solve(p) for p in peaks]

    t_hat = None
    if pp.rescore:
        if t is None:
            raise ConfigurationError("rescoring needs the template")
        t_hat = normalize_template(t, cfg).data
    detections = []
    fdata = frob.data
    for peak, (pos, pair) in zip(peaks, pairs):
        d = Detection(pos, pair.q, pair.lam, float(fdata[pos]), is_border(pos, f.dims, cfg.r1),
                      pair.converged)
        if t_hat is not None:
            d.ncc_rescore = local_score(C.meta["hf"], C.meta["weights"].w.data,
                                        rotated_template(t_hat, pair.q, cfg), pos)
        detections.append(d)
    # Stable sort keeps peak order among equal λ.
    detections.sort(key=lambda d: -d.lam)
    return TTMRun(detections, C, frob, C.meta["n_correlations"], peaks)


def ttm_match(f: VolumeGrid, t: VolumeGrid, rots: RotationSet, cfg: SspConfig,
              peak_params: PeakParams | None = None, **kw) -> list[Detection]:
    return run_ttm(f, t, rots, cfg, peak_params, **kw).detections


def write_tensor_template(T: TensorField, path) -> None:
    header_path, payload_path = _volume_paths(path)
    header = {
        "order": T.table.n,
        "dim": 4,
        "n_components": T.n_components,
        "index_order": INDEX_ORDER,
        "components": [list(map(int, e)) for e in T.table.entries],
        "dims": list(T.dims),
        "voxel_size": T.voxel_size,
        "layout": "x-fastest",
        "dtype": "f32le",
        "rotset_seed": T.meta.get("rotset_seed"),
        "rotset_count": T.meta.get("rotset_count"),
        "ssp": T.meta.get("ssp"),
        "quadrature": T.meta.get("quadrature", "plain"),
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header))
    with open(payload_path, "wb") as fh:
        for a in range(T.n_components):
            fh.write(T.comps[a].astype("<f4").ravel(order="F").tobytes())


def read_tensor_template(path) -> TensorField:
    header_path, payload_path = _volume_paths(path)
    header = load_header(header_path)
    for key in ("order", "dim", "n_components", "index_order", "dims"):
        if key not in header:
            raise VolumeFormatError(f"tensor header {header_path} lacks {key!r}")
    if header["dim"] != 4 or header["index_order"] != INDEX_ORDER:
        raise VolumeFormatError("tensor template must be dim 4 in graded-lex-desc order")
    try:
        table = multi_index_table(int(header["order"]))
    except ConfigurationError as exc:
        raise VolumeFormatError(str(exc)) from exc
    if header["n_components"] != len(table):
        raise VolumeFormatError(
            f"order {table.n} needs {len(table)} components, header says {header['n_components']}"
        )
    dims = parse_dims(header["dims"])
    vox = math.prod(dims)
    data = read_payload(payload_path, vox * len(table))
    comps = np.stack([data[a * vox:(a + 1) * vox].reshape(dims, order="F") for a in range(len(table))])
    meta = {k: header.get(k) for k in ("rotset_seed", "rotset_count", "ssp", "quadrature")}
    meta["center_origin"] = True
    return TensorField(table, comps, float(header.get("voxel_size", 1.0)), meta)


def write_detections(detections, path) -> None:
    lines = [json.dumps(d.to_dict()) for d in detections]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_detections(path) -> list[Detection]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(Detection.from_dict(json.loads(line)))
    return out
