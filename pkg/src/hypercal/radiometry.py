"""Radiometric calibration: flat-field fitting/application, dark-bias
models for both instruments, uniformity and SNR metrics, the in-orbit
flat-field update, and vicarious gain refinement."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cube import SpectralCube, DN_MAX
from .errors import CubeFormatError, EstimationError

R2_FLAG_THRESHOLD = 0.99
BAD_BAND_DEVIATION_PCT = 20.0


# ---------------------------------------------------------------------------
# sidecar I/O shared by the table types (raw little-endian f8 + text header)

def _write_arrays(path, header: dict, arrays: dict) -> None:
    path = Path(path)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for a in arrays.values())
    path.write_bytes(blob)
    lines = [f"{k} = {v}" for k, v in header.items()]
    lines.append("arrays = " + ",".join(arrays))
    lines.append("shape = " + ",".join(str(d) for d in
                                       next(iter(arrays.values())).shape))
    path.with_suffix(".hdr").write_text("\n".join(lines) + "\n",
                                        encoding="utf-8")


def _read_arrays(path):
    path = Path(path)
    hdr = {}
    for raw in path.with_suffix(".hdr").read_text(encoding="utf-8").splitlines():
        if "=" in raw:
            k, v = raw.split("=", 1)
            hdr[k.strip()] = v.strip()
    names = hdr["arrays"].split(",")
    shape = tuple(int(d) for d in hdr["shape"].split(","))
    count = int(np.prod(shape))
    flat = np.frombuffer(path.read_bytes(), dtype="<f8")
    if flat.size != count * len(names):
        raise CubeFormatError(f"sidecar {path} size mismatch")
    arrays = {n: flat[i * count:(i + 1) * count].reshape(shape).copy()
              for i, n in enumerate(names)}
    return hdr, arrays


# ---------------------------------------------------------------------------
# tables

@dataclass(frozen=True)
class FlatFieldTable:
    """Per-(band, sample) radiance-per-DN gain and DN offset."""

    gain: np.ndarray        # (B, S); NaN on masked/unfittable pixels
    offset: np.ndarray      # (B, S) DN
    r_squared: np.ndarray   # (B, S)
    provenance: str = "lab"  # or "in-orbit-update"
    epoch: str = "t0"

    def __post_init__(self):
        if self.provenance not in ("lab", "in-orbit-update"):
            raise EstimationError(f"unknown provenance {self.provenance!r}")
        finite = np.isfinite(self.gain)
        if np.any(self.gain[finite] <= 0):
            raise EstimationError("flat-field gains must be positive")

    @property
    def flagged(self) -> np.ndarray:
        """Pixels whose light-transfer fit was poor (R^2 < 0.99) or absent."""
        return ~(np.isfinite(self.gain) & (self.r_squared >= R2_FLAG_THRESHOLD))

    def save(self, path) -> None:
        _write_arrays(path, {"kind": "flatfield", "provenance": self.provenance,
                             "epoch": self.epoch},
                      {"gain": self.gain, "offset": self.offset,
                       "r_squared": self.r_squared})

    @classmethod
    def load(cls, path) -> "FlatFieldTable":
        hdr, arrays = _read_arrays(path)
        return cls(arrays["gain"], arrays["offset"], arrays["r_squared"],
                   hdr.get("provenance", "lab"), hdr.get("epoch", "t0"))


@dataclass(frozen=True)
class DarkModel:
    """Per-(band, sample) dark DN at the reference temperature plus a
    temperature slope (zero for VNIR)."""

    dark_dn: np.ndarray     # (B, S)
    slope_dn_per_k: np.ndarray  # (B, S)
    t_ref_k: float
    instrument: str = "vnir"
    stability_dn: float = 0.0

    def __post_init__(self):
        if np.any(self.dark_dn < 0):
            raise EstimationError("dark bias must be non-negative")
        if self.instrument == "vnir" and np.any(self.slope_dn_per_k != 0.0):
            raise EstimationError("VNIR dark model must have zero slope")

    def at(self, temperature_k: float) -> np.ndarray:
        return self.dark_dn + self.slope_dn_per_k * (temperature_k - self.t_ref_k)

    def save(self, path) -> None:
        _write_arrays(path, {"kind": "dark", "instrument": self.instrument,
                             "t_ref_k": self.t_ref_k,
                             "stability_dn": self.stability_dn},
                      {"dark_dn": self.dark_dn,
                       "slope_dn_per_k": self.slope_dn_per_k})

    @classmethod
    def load(cls, path) -> "DarkModel":
        hdr, arrays = _read_arrays(path)
        return cls(arrays["dark_dn"], arrays["slope_dn_per_k"],
                   float(hdr["t_ref_k"]), hdr.get("instrument", "vnir"),
                   float(hdr.get("stability_dn", 0.0)))

    @classmethod
    def constant(cls, dark: np.ndarray, instrument: str = "vnir",
                 t_ref_k: float = 293.0) -> "DarkModel":
        dark = np.asarray(dark, dtype=np.float64)
        return cls(dark, np.zeros_like(dark), t_ref_k, instrument)


@dataclass(frozen=True)
class VicariousResult:
    """Per-band vicarious gain refinement outcome."""

    multiplier: np.ndarray      # (B,), NaN where skipped
    deviation_pct: np.ndarray   # (B,) post-calibration
    pre_deviation_pct: np.ndarray
    bad_bands: np.ndarray       # (B,) bool

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["band", "multiplier", "deviation_pct",
                        "pre_deviation_pct", "flag"])
            for i in range(self.multiplier.shape[0]):
                w.writerow([i, repr(float(self.multiplier[i])),
                            repr(float(self.deviation_pct[i])),
                            repr(float(self.pre_deviation_pct[i])),
                            "bad" if self.bad_bands[i] else "good"])


# ---------------------------------------------------------------------------
# flat-field

def fit_flatfield(levels, epoch: str = "t0") -> FlatFieldTable:
    """Least-squares light-transfer fit DN = a*L + b per pixel.

    ``levels`` is a list of (radiance level, sphere cube) pairs covering at
    least 3 distinct levels.  Gain = 1/a, offset = b; pixels with a <= 0
    (masked channels) get NaN gain; fit R^2 is recorded and pixels below
    0.99 are flagged.
    """
    if len(levels) < 3:
        raise EstimationError("flat-field fit needs >= 3 radiance levels")
    lv = np.array([float(l) for l, _ in levels])
    if np.unique(lv).size < 3:
        raise EstimationError("flat-field levels are degenerate")
    cubes = [c for _, c in levels]
    shape = cubes[0].data.shape
    if any(c.data.shape != shape for c in cubes):
        raise EstimationError("sphere cubes must share dimensions")
    # per-pixel mean over lines at each level: (n_levels, S, B)
    means = np.stack([c.data.astype(np.float64).mean(axis=0) for c in cubes])
    x = lv[:, None, None]
    xm = lv.mean()
    ym = means.mean(axis=0)
    sxx = ((lv - xm) ** 2).sum()
    sxy = ((x - xm) * (means - ym)).sum(axis=0)
    a = sxy / sxx                       # DN per radiance unit, (S, B)
    b = ym - a * xm
    pred = a[None] * x + b[None]
    ss_res = ((means - pred) ** 2).sum(axis=0)
    ss_tot = ((means - ym) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, 0.0)
        gain = np.where(a > 0, 1.0 / a, np.nan)
    return FlatFieldTable(gain.T.copy(), b.T.copy(), r2.T.copy(),
                          provenance="lab", epoch=epoch)


def apply_flatfield(cube: SpectralCube, table: FlatFieldTable,
                    dark: DarkModel, temperature_k: float | None = None):
    """Convert DN to radiance: gain * (DN - dark(T)).

    Returns ``(radiance cube, validity mask, clamped count)``; negative
    radiances are clamped to 0 and counted, masked channels emit 0 with
    validity False.
    """
    if table.gain.shape != (cube.bands, cube.samples):
        raise EstimationError("flat-field table does not match cube")
    if dark.dark_dn.shape != (cube.bands, cube.samples):
        raise EstimationError("dark model does not match cube")
    if temperature_k is None:
        temperature_k = dark.t_ref_k
    d = dark.at(temperature_k).T[None, :, :]       # (1, S, B)
    g = table.gain.T[None, :, :]
    rad = g * (cube.data.astype(np.float64) - d)
    valid = np.broadcast_to(np.isfinite(g), rad.shape).copy()
    rad = np.where(valid, rad, 0.0)
    clamped = int(np.count_nonzero(rad < 0))
    rad = np.clip(rad, 0.0, None)
    meta = cube.band_meta
    return cube.with_data(rad, pixel_kind="radiance",
                          band_meta=meta), valid, clamped


def nonuniformity(frame: np.ndarray) -> float:
    """Across-track non-uniformity percentage of one band's frame:
    100 * std(column means) / mean(column means) (population std)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size == 0:
        raise EstimationError("empty frame")
    cols = frame.mean(axis=0) if frame.ndim == 2 else frame
    m = cols.mean()
    if m == 0:
        raise EstimationError("zero-mean frame: non-uniformity undefined")
    return float(100.0 * cols.std() / abs(m))


def update_flatfield_inorbit(scenes, old: FlatFieldTable,
                             epoch: str = "update") -> FlatFieldTable:
    """Refine flat-field gains from uniform in-orbit radiance scenes.

    Per band, each scene contributes a relative response estimate
    (column mean / swath mean); estimates are averaged across scenes
    weighted by scene signal level, and the old gains are divided by the
    result.  Bands with no usable scene keep their old gains (flagged via
    NaN in none — recorded by unchanged correction)."""
    if not scenes:
        raise EstimationError("no scenes supplied for in-orbit update")
    bands, samples = old.gain.shape
    num = np.zeros((bands, samples))
    den = np.zeros(bands)
    for cube in scenes:
        if cube.data.shape[1:] != (samples, bands):
            raise EstimationError("scene dimensions do not match table")
        prof = cube.data.astype(np.float64).mean(axis=0).T   # (B, S)
        level = prof.mean(axis=1)                            # (B,)
        usable = level > 1e-12
        ratio = np.ones_like(prof)
        ratio[usable] = prof[usable] / level[usable, None]
        num[usable] += level[usable, None] * ratio[usable]
        den[usable] += level[usable]
    correction = np.ones((bands, samples))
    updated = den > 0
    correction[updated] = num[updated] / den[updated, None]
    gain = old.gain / correction
    return FlatFieldTable(gain, old.offset.copy(), old.r_squared.copy(),
                          provenance="in-orbit-update", epoch=epoch)


# ---------------------------------------------------------------------------
# dark bias

def dark_bias_vnir(cube: SpectralCube, masked_channels) -> np.ndarray:
    """Per-sample dark estimate: median DN of the unilluminated channels
    over all lines."""
    masked = sorted(int(b) for b in masked_channels)
    if not masked:
        raise EstimationError("masked-channel set is empty")
    if max(masked) >= cube.bands:
        raise EstimationError("masked channel index outside cube")
    block = cube.data[:, :, masked].astype(np.float64)   # (L, S, M)
    return np.median(block, axis=(0, 2))


def fit_dark_swir(darks, t_ref_k: float = 293.0,
                  instrument: str = "swir") -> DarkModel:
    """Per-pixel linear dark-vs-temperature fit from shutter acquisitions.

    ``darks`` is a list of (temperature K, dark cube); needs >= 2 distinct
    temperatures.  The stability metric is the largest deviation of any
    acquisition's per-pixel mean from the fitted line."""
    if len(darks) < 2:
        raise EstimationError("dark fit needs >= 2 temperatures")
    temps = np.array([float(t) for t, _ in darks])
    if np.unique(temps).size < 2:
        raise EstimationError("dark temperatures are degenerate")
    means = np.stack([c.data.astype(np.float64).mean(axis=0).T
                      for _, c in darks])                 # (n, B, S)
    t = temps - t_ref_k
    tm = t.mean()
    ym = means.mean(axis=0)
    stt = ((t - tm) ** 2).sum()
    sty = ((t - tm)[:, None, None] * (means - ym)).sum(axis=0)
    slope = sty / stt
    d_ref = ym - slope * tm
    pred = d_ref[None] + slope[None] * t[:, None, None]
    stability = float(np.abs(means - pred).max())
    if instrument == "vnir":
        slope = np.zeros_like(slope)
    return DarkModel(np.clip(d_ref, 0.0, None), slope, t_ref_k, instrument,
                     stability)


# ---------------------------------------------------------------------------
# SNR

def snr(cube: SpectralCube, saturation_dn: float = DN_MAX):
    """Temporal SNR from repeated uniform frames (lines act as repeats).

    Returns ``(band_snr, low_signal)``: per-(band, sample) SNR is temporal
    mean / temporal std; the band value is the median over unsaturated
    samples.  Bands with every sample saturated raise; bands whose signal
    is within the noise floor are flagged low-signal."""
    if cube.lines < 50:
        raise EstimationError("SNR needs >= 50 repeated frames")
    data = cube.data.astype(np.float64)
    mean = data.mean(axis=0)            # (S, B)
    std = data.std(axis=0)
    sat = (data >= saturation_dn).any(axis=0)
    if sat.all(axis=0).any():
        raise EstimationError("a band is saturated in every sample")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(std > 0, mean / std, np.inf)
    ratio = np.where(sat, np.nan, ratio)
    band_snr = np.nanmedian(ratio, axis=0)
    med_mean = np.nanmedian(np.where(sat, np.nan, mean), axis=0)
    med_std = np.nanmedian(np.where(sat, np.nan, std), axis=0)
    low_signal = med_mean < 3.0 * med_std
    return band_snr, low_signal


# ---------------------------------------------------------------------------
# vicarious calibration

def vicarious_gains(measured: np.ndarray, reference: np.ndarray,
                    bad_threshold_pct: float = BAD_BAND_DEVIATION_PCT
                    ) -> VicariousResult:
    """Per-band gain refinement from target spectra.

    ``measured`` and ``reference`` are (targets, bands) radiance arrays for
    the same ground targets.  The multiplier is the median over targets of
    reference/measured; deviations are mean absolute percentage errors
    before and after applying it.  Bands whose post-calibration deviation
    exceeds the threshold are flagged bad; bands with zero reference are
    skipped (NaN multiplier, flagged)."""
    measured = np.asarray(measured, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if measured.shape != reference.shape or measured.ndim != 2:
        raise EstimationError("measured/reference must be (targets, bands)")
    if measured.shape[0] < 2:
        raise EstimationError("vicarious calibration needs >= 2 targets")
    bands = measured.shape[1]
    mult = np.full(bands, np.nan)
    dev = np.full(bands, np.nan)
    pre = np.full(bands, np.nan)
    bad = np.zeros(bands, dtype=bool)
    for b in range(bands):
        ref = reference[:, b]
        mea = measured[:, b]
        ok = (ref > 0) & (mea > 0)
        if ok.sum() < 2:
            bad[b] = True
            continue
        m = float(np.median(ref[ok] / mea[ok]))
        mult[b] = m
        pre[b] = float(np.mean(100.0 * np.abs(mea[ok] - ref[ok]) / ref[ok]))
        dev[b] = float(np.mean(100.0 * np.abs(m * mea[ok] - ref[ok]) / ref[ok]))
        bad[b] = dev[b] > bad_threshold_pct
    return VicariousResult(mult, dev, pre, bad)
