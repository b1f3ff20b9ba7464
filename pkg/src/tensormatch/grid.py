"""Volumes, FFT correlation, the low-pass filter and mask, and S-norm algebra.

Arrays are indexed ``[x, y, z]``; on disk the payload is x-fastest. Correlation
is circular (FFT-native): scores within ``r1`` of a face see wrapped content.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft
from scipy import ndimage

from .errors import (
    ConfigurationError,
    DegenerateTemplateError,
    MissingFileError,
    VolumeFormatError,
)

FORMAT_LAYOUT = "x-fastest"
FORMAT_DTYPE = "f32le"


@dataclass(eq=False)
class VolumeGrid:
    data: np.ndarray
    voxel_size: float = 1.0
    center_origin: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ConfigurationError(f"volume must be 3-D with positive dims, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ConfigurationError("volume contains non-finite values")
        if not self.voxel_size > 0:
            raise ConfigurationError(f"voxel_size must be positive, got {self.voxel_size}")
        self.data = data

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def center(self) -> tuple[int, int, int]:
        return tuple(n // 2 for n in self.dims)

    def like(self, data: np.ndarray) -> "VolumeGrid":
        return VolumeGrid(data, self.voxel_size, self.center_origin)

    def world_coords(self) -> np.ndarray:
        """World coordinates of every voxel, shape ``(3, nx, ny, nz)``."""
        axes = [np.arange(n, dtype=np.float64) - (n // 2 if self.center_origin else 0) for n in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij")) * self.voxel_size


@dataclass(frozen=True)
class SspConfig:
    """Filter and mask parameters, all in voxels."""

    sigma_h: float = 1.0
    r0: float = 8.0
    r1: float = 10.0

    def __post_init__(self):
        if not self.sigma_h > 0:
            raise ConfigurationError(f"sigma_h must be positive, got {self.sigma_h}")
        if not self.r0 > 0:
            raise ConfigurationError(f"r0 must be positive, got {self.r0}")
        if not self.r1 > self.r0:
            raise ConfigurationError(f"r1 must exceed r0, got r0={self.r0} r1={self.r1}")

    def kernel1d(self) -> np.ndarray:
        radius = int(math.ceil(4.0 * self.sigma_h))
        x = np.arange(-radius, radius + 1, dtype=np.float64)
        k = np.exp(-0.5 * (x / self.sigma_h) ** 2)
        return k / k.sum()

    @property
    def mask_shape(self) -> tuple[int, int, int]:
        n = 2 * int(math.ceil(self.r1)) + 1
        return (n, n, n)

    def mask(self, shape: tuple[int, int, int] | None = None) -> np.ndarray:
        """Radial mask centred at ``shape // 2`` (defaults to the minimal box)."""
        shape = self.mask_shape if shape is None else tuple(shape)
        return radial_mask(shape, self.r0, self.r1)

    def to_dict(self) -> dict:
        return {"sigma_h": self.sigma_h, "r0": self.r0, "r1": self.r1}


def radial_mask(shape, r0: float, r1: float) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) - n // 2 for n in shape]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt(gx**2 + gy**2 + gz**2)
    taper = np.cos(np.pi * (r - r0) / (2.0 * (r1 - r0))) ** 2
    return np.where(r <= r0, 1.0, np.where(r < r1, taper, 0.0))


@dataclass(eq=False)
class WeightVolume:
    w: VolumeGrid
    valid: np.ndarray
    variance: np.ndarray
    eps_var: float
    m_sum: float = field(default=0.0)

    @property
    def all_invalid(self) -> bool:
        return not bool(self.valid.any())


def _check_template_fits(shape, dims):
    if any(s > d for s, d in zip(shape, dims)):
        raise ConfigurationError(f"template dims {tuple(shape)} exceed image dims {tuple(dims)}")


def embed_centered(g: np.ndarray, shape) -> np.ndarray:
    """Zero-embed ``g`` in ``shape`` with its centre voxel moved to index 0."""
    _check_template_fits(g.shape, shape)
    out = np.zeros(shape, dtype=np.float64)
    out[tuple(slice(0, n) for n in g.shape)] = g
    return np.roll(out, tuple(-(n // 2) for n in g.shape), axis=(0, 1, 2))


class Correlator:
    """Caches the spectrum of ``f`` for repeated ``(f ⋆ g)`` evaluations."""

    def __init__(self, f: np.ndarray):
        self.shape = f.shape
        try:
            self.spectrum = scipy.fft.rfftn(f)
        except (MemoryError, ValueError) as exc:
            raise ConfigurationError(f"cannot plan FFT of shape {f.shape}: {exc}") from exc
        self.count = 0

    def __call__(self, g: np.ndarray) -> np.ndarray:
        gf = scipy.fft.rfftn(embed_centered(g, self.shape))
        self.count += 1
        return scipy.fft.irfftn(self.spectrum * np.conj(gf), s=self.shape)


def correlate_arrays(f: np.ndarray, g: np.ndarray) -> np.ndarray:
    return Correlator(f)(g)


def cross_correlate(f: VolumeGrid, g: VolumeGrid) -> VolumeGrid:
    """``(f ⋆ g)(x) = Σ_z f(x + z) g(z)`` with ``z`` relative to g's centre voxel.

    Indices wrap around f's faces.
    """
    return f.like(correlate_arrays(f.data, g.data))


def lowpass_array(a: np.ndarray, cfg: SspConfig, mode: str = "wrap") -> np.ndarray:
    k = cfg.kernel1d()
    out = a
    for axis in range(3):
        out = ndimage.correlate1d(out, k, axis=axis, mode=mode)
    return out


def lowpass_mode(v: VolumeGrid) -> str:
    # Templates extend their edge values so that h∗(t+c) = h∗t + c inside the box.
    return "nearest" if v.center_origin else "wrap"


def apply_lowpass(v: VolumeGrid, cfg: SspConfig, mode: str | None = None) -> VolumeGrid:
    """Separable Gaussian truncated at 4σ with unit sum, so constants pass unchanged.

    Boundary handling defaults to ``wrap`` for search images and ``nearest`` for
    centre-origin templates and masks.
    """
    return v.like(lowpass_array(v.data, cfg, mode or lowpass_mode(v)))


def default_eps_var(f: np.ndarray, m_sum: float) -> float:
    span = float(f.max() - f.min())
    return 1e-8 * span * span * m_sum


def weight_map_filtered(hf: np.ndarray, cfg: SspConfig, eps_var: float | None = None,
                        raw: np.ndarray | None = None, correlator: Correlator | None = None) -> WeightVolume:
    """Weights for an image that is already low-passed (``hf = h∗f``)."""
    m = cfg.mask()
    m_sum = float(m.sum())
    if m_sum <= 0:
        raise ConfigurationError("mask is empty")
    constant = False
    if eps_var is None:
        eps_var = default_eps_var(hf if raw is None else raw, m_sum)
        constant = eps_var == 0.0
    elif not eps_var > 0:
        raise ConfigurationError(f"eps_var must be positive, got {eps_var}")
    corr = correlator or Correlator(hf)
    local_mean = corr(m)
    local_sq = Correlator(hf * hf)(m)
    v = local_sq - local_mean**2 / m_sum
    # A constant image has zero span, and its FFT round-off must not count as variance.
    valid = np.zeros(v.shape, dtype=bool) if constant else v > eps_var
    w = np.zeros_like(v)
    w[valid] = 1.0 / np.sqrt(v[valid])
    return WeightVolume(VolumeGrid(w), valid, v, float(eps_var), m_sum)


def weight_map(f: VolumeGrid, cfg: SspConfig, eps_var: float | None = None) -> WeightVolume:
    """Per-voxel ``w(x) = 1/‖P_S(τ_x f)‖_S`` from two FFT correlations.

    ``eps_var`` defaults to ``1e-8 (max f - min f)^2 ⟨1, m⟩``. Voxels whose local
    variance does not exceed it are marked invalid and get ``w = 0``.
    """
    hf = lowpass_array(f.data, cfg, lowpass_mode(f))
    out = weight_map_filtered(hf, cfg, eps_var, raw=f.data)
    out.w = f.like(out.w.data)
    return out


def _template_mask(t: VolumeGrid, cfg: SspConfig) -> np.ndarray:
    if any(n % 2 == 0 for n in t.dims):
        raise ConfigurationError(f"template dims must be odd, got {t.dims}")
    if any(a < b for a, b in zip(t.dims, cfg.mask_shape)):
        raise ConfigurationError(f"template dims {t.dims} smaller than mask box {cfg.mask_shape}")
    return cfg.mask(t.dims)


def _template_moments(t: VolumeGrid, cfg: SspConfig):
    m = _template_mask(t, cfg)
    ht = lowpass_array(t.data, cfg, "nearest")
    m_sum = float(m.sum())
    t1 = float(np.sum(ht * m))
    t2 = float(np.sum(ht * ht * m))
    var = t2 - t1 * t1 / m_sum
    if not var > 1e-12 * max(t2, np.finfo(np.float64).tiny):
        raise DegenerateTemplateError(
            f"template has zero variance under the mask (t2 - t1^2/m_sum = {var:.3e})"
        )
    return m, ht, -t1 / m_sum, 1.0 / math.sqrt(var)


def standardize_template(t: VolumeGrid, cfg: SspConfig) -> VolumeGrid:
    """``t_S (t + t_O)``: unmasked and unfiltered, with zero S-mean and unit S-norm."""
    _, _, t_offset, t_scale = _template_moments(t, cfg)
    return VolumeGrid(t_scale * (t.data + t_offset), t.voxel_size, True)


def normalize_template(t: VolumeGrid, cfg: SspConfig) -> VolumeGrid:
    """Masked, zero-mean, unit-S-norm template ``m t_S (h∗t + t_O)``."""
    m, ht, t_offset, t_scale = _template_moments(t, cfg)
    return VolumeGrid(m * t_scale * (ht + t_offset), t.voxel_size, True)


def isotropic_part(a: np.ndarray, dr: float = 0.5) -> np.ndarray:
    """Radial average of a centre-origin array, resampled back onto the grid.

    Voxel values are spread onto radial bins of width ``dr`` with linear
    weights; the profile is then interpolated at each voxel's radius.
    """
    axes = [np.arange(n, dtype=np.float64) - n // 2 for n in a.shape]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt(gx**2 + gy**2 + gz**2).ravel()
    pos = r / dr
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    nb = int(i0.max()) + 2
    vals = a.ravel()
    num = np.bincount(i0, vals * (1 - frac), nb) + np.bincount(i0 + 1, vals * frac, nb)
    den = np.bincount(i0, 1 - frac, nb) + np.bincount(i0 + 1, frac, nb)
    profile = np.divide(num, den, out=np.zeros(nb), where=den > 0)
    return np.interp(r, np.arange(nb) * dr, profile).reshape(a.shape)


def s_inner(f: VolumeGrid, g: VolumeGrid, cfg: SspConfig) -> float:
    """``⟨f, g⟩_S = ⟨h∗f, m·(h∗g)⟩`` with the mask centred on the grid centre."""
    if f.dims != g.dims:
        raise ConfigurationError(f"shape mismatch {f.dims} vs {g.dims}")
    m = cfg.mask(f.dims)
    hf = lowpass_array(f.data, cfg, lowpass_mode(f))
    hg = lowpass_array(g.data, cfg, lowpass_mode(g))
    return float(np.sum(hf * (m * hg)))


def s_norm(f: VolumeGrid, cfg: SspConfig) -> float:
    return math.sqrt(max(s_inner(f, f, cfg), 0.0))


def _volume_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".f32"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".f32")


def write_volume(v: VolumeGrid, path) -> None:
    header_path, payload_path = _volume_paths(path)
    header = {
        "dims": list(v.dims),
        "voxel_size": v.voxel_size,
        "layout": FORMAT_LAYOUT,
        "center_origin": bool(v.center_origin),
        "dtype": FORMAT_DTYPE,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header))
    v.data.astype("<f4").ravel(order="F").tofile(payload_path)


def parse_dims(dims) -> tuple[int, int, int]:
    if not isinstance(dims, list) or len(dims) != 3:
        raise VolumeFormatError(f"dims must be a list of 3 integers, got {dims!r}")
    if not all(isinstance(n, int) and not isinstance(n, bool) for n in dims):
        raise VolumeFormatError(f"dims must be integers, got {dims!r}")
    if min(dims) <= 0:
        raise VolumeFormatError(f"dims must be positive, got {dims!r}")
    return tuple(dims)


def read_payload(payload_path: Path, count: int) -> np.ndarray:
    if not payload_path.exists():
        raise MissingFileError(f"missing payload {payload_path}")
    raw = payload_path.read_bytes()
    if len(raw) != 4 * count:
        kind = "truncated" if len(raw) < 4 * count else "oversized"
        raise VolumeFormatError(
            f"{kind} payload {payload_path}: {len(raw)} bytes, expected {4 * count}"
        )
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def load_header(header_path: Path) -> dict:
    if not header_path.exists():
        raise MissingFileError(f"missing header {header_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed header {header_path}: {exc}") from exc
    if not isinstance(header, dict):
        raise VolumeFormatError(f"header {header_path} is not a JSON object")
    return header


def read_volume(path) -> VolumeGrid:
    header_path, payload_path = _volume_paths(path)
    header = load_header(header_path)
    for key in ("dims", "voxel_size", "layout", "center_origin", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"header {header_path} lacks {key!r}")
    if header["layout"] != FORMAT_LAYOUT or header["dtype"] != FORMAT_DTYPE:
        raise VolumeFormatError(f"unsupported layout/dtype {header['layout']}/{header['dtype']}")
    dims = parse_dims(header["dims"])
    voxel_size = header["voxel_size"]
    if not isinstance(voxel_size, (int, float)) or not voxel_size > 0:
        raise VolumeFormatError(f"voxel_size must be positive, got {voxel_size!r}")
    data = read_payload(payload_path, dims[0] * dims[1] * dims[2])
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"payload {payload_path} contains non-finite values")
    return VolumeGrid(data.reshape(dims, order="F"), float(voxel_size), bool(header["center_origin"]))
