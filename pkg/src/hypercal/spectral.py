"""Spectral characterization and correction.

Covers relative-spectral-response analysis from monochromator sweeps,
smile estimation from spatially uniform scenes with atmospheric absorption
dips, absolute wavelength-shift recovery from the dip positions, and
keystone estimation/correction against a reference band.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cube import SpectralCube
from .errors import EstimationError
from .kernels import resample_rows
from .registration import shift_1d, shift_signal

SMILE_WINDOW = 10          # band-index correlation window
KEYSTONE_REF_BAND = 30
KEYSTONE_MAX_PX = 3.0
KEYSTONE_MIN_CONFIDENCE = 0.45
DIP_MIN_DEPTH = 0.02       # dip must sit >= 2% below the local continuum
QUADRATIC_GAIN = 0.25      # quadratic fit must cut residual RMS by 25%


# ---------------------------------------------------------------------------
# absorption-line library

@dataclass(frozen=True)
class AbsorptionLine:
    species: str            # "O2" | "H2O" | "CO2"
    nominal_nm: float
    strength: str = "strong"


ABSORPTION_LINES = (
    AbsorptionLine("O2", 760.0),
    AbsorptionLine("O2", 1265.0, "weak"),
    AbsorptionLine("O2", 1461.0, "weak"),
    AbsorptionLine("H2O", 823.04, "weak"),
    AbsorptionLine("H2O", 936.0),
    AbsorptionLine("H2O", 1133.0),
    AbsorptionLine("CO2", 1570.0, "weak"),
    AbsorptionLine("CO2", 1610.0, "weak"),
    AbsorptionLine("CO2", 2010.0),
    AbsorptionLine("CO2", 2060.0),
)


# ---------------------------------------------------------------------------
# RSR from monochromator sweeps

@dataclass(frozen=True)
class RSRCurve:
    band: int
    sample: int
    wavelengths_nm: np.ndarray
    response: np.ndarray      # normalized to peak 1
    center_nm: float
    fwhm_nm: float


@dataclass(frozen=True)
class RSRScan:
    """Per-(band, sample) centers and widths from a wavelength sweep."""

    wavelengths_nm: np.ndarray
    responses: np.ndarray       # (n_wl, bands, samples)
    center_nm: np.ndarray       # (bands, samples), NaN where flagged
    fwhm_nm: np.ndarray         # (bands, samples), NaN where flagged
    responding: np.ndarray      # (bands, samples) bool

    def curve(self, band: int, sample: int) -> RSRCurve:
        if not self.responding[band, sample]:
            raise EstimationError(
                f"band {band} sample {sample} never responded above the "
                "noise floor")
        resp = self.responses[:, band, sample]
        return RSRCurve(band, sample, self.wavelengths_nm.copy(),
                        resp / resp.max(), float(self.center_nm[band, sample]),
                        float(self.fwhm_nm[band, sample]))


def _parabolic_vertex(x: np.ndarray, y: np.ndarray) -> float:
    """Vertex abscissa of the parabola through three points."""
    d2 = y[0] - 2.0 * y[1] + y[2]
    if d2 == 0.0:
        return float(x[1])
    return float(x[1] + 0.5 * (y[0] - y[2]) / d2 * (x[2] - x[1]))


def _half_max_width(wl: np.ndarray, resp: np.ndarray) -> float:
    peak = resp.max()
    half = 0.5 * peak
    above = resp >= half
    idx = np.flatnonzero(above)
    i0, i1 = idx[0], idx[-1]
    if i0 == 0 or i1 == resp.shape[0] - 1:
        raise EstimationError("sweep does not cover the half-max crossings")
    # linear interpolation between the samples straddling half-max
    left = wl[i0 - 1] + (half - resp[i0 - 1]) / (resp[i0] - resp[i0 - 1]) \
        * (wl[i0] - wl[i0 - 1])
    right = wl[i1] + (half - resp[i1]) / (resp[i1 + 1] - resp[i1]) \
        * (wl[i1 + 1] - wl[i1])
    return float(right - left)


def rsr_from_scan(wavelengths_nm: np.ndarray, responses: np.ndarray,
                  noise_floor: float = 1e-9,
                  line_width_nm: float = 2.0) -> RSRScan:
    """Analyze a monochromator sweep.

    ``responses`` stacks per-wavelength response arrays as
    (n_wl, bands, samples); ``wavelengths_nm`` must be strictly increasing.
    Centers come from a parabolic refinement of the argmax; FWHM from
    linearly interpolated half-max crossings, deconvolved for the
    monochromator's own line width (a ``line_width_nm``-wide box, variance
    w^2/12).  Channels whose peak response stays at or below
    ``noise_floor`` are flagged non-responding.
    """
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    resp = np.asarray(responses, dtype=np.float64)
    if wl.ndim != 1 or resp.ndim != 3 or resp.shape[0] != wl.shape[0]:
        raise EstimationError("sweep shape must be (n_wl, bands, samples)")
    if np.any(np.diff(wl) <= 0):
        raise EstimationError("sweep wavelengths must be strictly increasing")
    _, nb, ns = resp.shape
    center = np.full((nb, ns), np.nan)
    fwhm = np.full((nb, ns), np.nan)
    ok = np.zeros((nb, ns), dtype=bool)
    for b in range(nb):
        for s in range(ns):
            r = resp[:, b, s]
            i = int(np.argmax(r))
            if r[i] <= noise_floor:
                continue
            if 0 < i < r.shape[0] - 1:
                center[b, s] = _parabolic_vertex(wl[i - 1:i + 2], r[i - 1:i + 2])
            else:
                center[b, s] = wl[i]
            try:
                width = _half_max_width(wl, r)
            except EstimationError:
                continue
            # remove the scan line's own broadening (FWHM-equivalent of a
            # box of width w is 2*sqrt(2 ln 2)*w/sqrt(12))
            broadening = (2.0 * np.sqrt(2.0 * np.log(2.0))) ** 2 \
                * line_width_nm ** 2 / 12.0
            fwhm[b, s] = np.sqrt(max(width ** 2 - broadening, 0.0))
            ok[b, s] = True
    return RSRScan(wl, resp, center, fwhm, ok)


# ---------------------------------------------------------------------------
# smile

@dataclass(frozen=True)
class SmileModel:
    """Per-sample wavelength offset relative to the center column."""

    instrument: str
    offsets_nm: np.ndarray      # (samples,), 0 at the center sample
    kind: str                   # "linear" | "quadratic"
    coefficients: tuple         # polynomial in (s - center), high order first
    peak_to_peak_nm: float
    residual_rms_nm: float

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic"):
            raise EstimationError(f"unknown smile fit kind {self.kind!r}")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({
            "instrument": self.instrument,
            "offsets_nm": self.offsets_nm.tolist(),
            "kind": self.kind,
            "coefficients": list(self.coefficients),
            "peak_to_peak_nm": self.peak_to_peak_nm,
            "residual_rms_nm": self.residual_rms_nm,
        }, indent=1), encoding="utf-8")

    @classmethod
    def from_json(cls, path) -> "SmileModel":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(raw["instrument"], np.asarray(raw["offsets_nm"]),
                   raw["kind"], tuple(raw["coefficients"]),
                   raw["peak_to_peak_nm"], raw["residual_rms_nm"])

    @classmethod
    def zero(cls, instrument: str, samples: int) -> "SmileModel":
        return cls(instrument, np.zeros(samples), "linear", (0.0, 0.0),
                   0.0, 0.0)


def _column_spectra(cube: SpectralCube) -> np.ndarray:
    return cube.data.astype(np.float64).mean(axis=0)   # (samples, bands)


def _detrended_std(w: np.ndarray) -> float:
    x = np.arange(w.shape[0], dtype=np.float64)
    return float(np.std(w - np.polyval(np.polyfit(x, w, 1), x)))


def _window_shift(a: np.ndarray, b: np.ndarray, max_shift: float,
                  iters: int = 5, tol: float = 1e-3):
    """Iteratively refined shift_1d: re-align ``b`` by the running estimate
    and accumulate residuals, canceling the short-window shrinkage bias."""
    total = 0.0
    conf = 0.0
    current = b
    for _ in range(iters):
        est = shift_1d(a, current, max_shift=max_shift)
        total += est.shift
        conf = est.confidence
        if abs(total) > max_shift:
            return float(np.clip(total, -max_shift, max_shift)), 0.0
        if abs(est.shift) < tol:
            break
        current, _ = shift_signal(b, -total)
    return total, conf


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values)
    v = values[order]
    w = weights[order]
    cum = np.cumsum(w)
    return float(v[np.searchsorted(cum, 0.5 * cum[-1])])


def estimate_smile(cube: SpectralCube, window: int = SMILE_WINDOW,
                   stride: int | None = None) -> SmileModel:
    """Estimate the across-swath wavelength offset curve.

    Expects a radiometrically corrected cube of a spatially uniform,
    spectrally structured scene.  Each column's line-mean spectrum is
    correlated against the center column's over sliding band windows; index
    shifts are converted to nm with the local inter-band spacing, averaged
    with confidence weights, then fit linear-vs-quadratic in sample
    position.  The model is anchored to exactly 0 at the center column.
    """
    spectra = _column_spectra(cube)
    samples, bands = spectra.shape
    if bands < window:
        raise EstimationError("fewer bands than the correlation window")
    if stride is None:
        stride = 2 if bands <= 64 else 8
    centers = cube.centers_nm
    spacing = np.gradient(centers)
    center_col = samples // 2
    ref = spectra[center_col]
    if np.std(ref) < 1e-9 * max(abs(np.mean(ref)), 1.0):
        raise EstimationError("featureless spectra: cannot estimate smile")

    starts = list(range(0, bands - window + 1, stride))
    ref_structure = np.array([_detrended_std(ref[w0:w0 + window])
                              for w0 in starts])
    # skip windows with no usable spectral feature
    usable = ref_structure > 0.05 * ref_structure.max()
    raw = np.full(samples, np.nan)
    for s in range(samples):
        vals = []
        wgts = []
        for wi, w0 in enumerate(starts):
            if not usable[wi]:
                continue
            a = ref[w0:w0 + window]
            b = spectra[s, w0:w0 + window]
            try:
                sh, conf = _window_shift(a, b, max_shift=window / 2.0)
            except EstimationError:
                continue
            if conf <= 0:
                continue
            vals.append(-sh * spacing[w0 + window // 2])
            wgts.append(conf * ref_structure[wi])
        if vals:
            # robust combine: confident outlier windows would poison a mean
            raw[s] = _weighted_median(np.asarray(vals), np.asarray(wgts))
    good = np.isfinite(raw)
    if good.sum() < 8:
        raise EstimationError("too few columns with usable spectral structure")

    u = np.arange(samples, dtype=np.float64) - center_col
    lin = np.polyfit(u[good], raw[good], 1)
    quad = np.polyfit(u[good], raw[good], 2)
    rms_lin = float(np.sqrt(np.mean((np.polyval(lin, u[good]) - raw[good]) ** 2)))
    rms_quad = float(np.sqrt(np.mean((np.polyval(quad, u[good]) - raw[good]) ** 2)))
    if rms_quad <= (1.0 - QUADRATIC_GAIN) * rms_lin:
        kind, coef, rms = "quadratic", quad, rms_quad
    else:
        kind, coef, rms = "linear", lin, rms_lin
    offsets = np.polyval(coef, u) - np.polyval(coef, 0.0)
    instrument = cube.band_meta[0].instrument if cube.band_meta else "vnir"
    return SmileModel(instrument, offsets, kind, tuple(float(c) for c in coef),
                      float(offsets.max() - offsets.min()), rms)


def correct_smile(cube: SpectralCube, model: SmileModel,
                  target_centers_nm: np.ndarray | None = None):
    """Resample every column's spectrum onto the center column's wavelength
    registration.  Returns ``(corrected cube, validity mask)`` where the
    mask flags spectral-edge pixels whose kernel support left the cube."""
    if model.offsets_nm.shape[0] != cube.samples:
        raise EstimationError("smile model sample count does not match cube")
    centers = np.asarray(target_centers_nm if target_centers_nm is not None
                         else cube.centers_nm, dtype=np.float64)
    spacing = np.gradient(centers)
    data = cube.data.astype(np.float64)
    out = np.empty_like(data)
    valid = np.empty(data.shape, dtype=bool)
    base = np.arange(cube.bands, dtype=np.float64)
    for s in range(cube.samples):
        coords = base - model.offsets_nm[s] / spacing
        rows = data[:, s, :]
        res, ok = resample_rows(rows, np.broadcast_to(coords, rows.shape))
        out[:, s, :] = res
        valid[:, s, :] = ok
    return cube.with_data(out, pixel_kind="radiance"), valid


# ---------------------------------------------------------------------------
# absolute wavelength shift

def absolute_shift(spectrum: np.ndarray, centers_nm: np.ndarray,
                   lines=ABSORPTION_LINES, search_nm: float = 15.0):
    """Absolute wavelength offset from atmospheric absorption dips.

    Each library line inside the band range is located by fitting a
    parabola (in log radiance, exact for Gaussian dips) through the
    continuum-normalized local minimum and its neighbors.  Returns
    ``(delta_nm, per_line)`` where ``delta_nm`` is the median of
    (observed - nominal) and ``per_line`` maps nominal wavelength to its
    individual offset.  Requires at least two detectable dips.
    """
    spectrum = np.asarray(spectrum, dtype=np.float64)
    centers = np.asarray(centers_nm, dtype=np.float64)
    if spectrum.shape != centers.shape or spectrum.ndim != 1:
        raise EstimationError("spectrum and band centers must be 1-D and equal")
    if np.any(spectrum <= 0):
        raise EstimationError("non-positive radiance in dip search")
    per_line = {}
    for line in lines:
        lo = line.nominal_nm - search_nm
        hi = line.nominal_nm + search_nm
        idx = np.flatnonzero((centers >= lo - 1e-9) & (centers <= hi + 1e-9))
        if idx.size < 3 or idx[0] < 3 or idx[-1] > centers.size - 4:
            continue
        w0, w1 = idx[0] - 3, idx[-1] + 3
        wl = centers[w0:w1 + 1]
        seg = spectrum[w0:w1 + 1]
        # linear continuum anchored on the 3 bands at each window edge
        edge_x = np.concatenate([wl[:3], wl[-3:]])
        edge_y = np.concatenate([seg[:3], seg[-3:]])
        cont = np.polyval(np.polyfit(edge_x, edge_y, 1), wl)
        if np.any(cont <= 0):
            continue
        ratio = seg / cont
        inner = slice(3, ratio.size - 3)
        i = 3 + int(np.argmin(ratio[inner]))
        if ratio[i] > 1.0 - DIP_MIN_DEPTH:
            continue
        if not (centers[w0 + i] >= lo and centers[w0 + i] <= hi):
            continue
        if i == 0 or i == ratio.size - 1:
            continue
        obs = _parabolic_vertex(wl[i - 1:i + 2], np.log(ratio[i - 1:i + 2]))
        per_line[line.nominal_nm] = obs - line.nominal_nm
    if len(per_line) < 2:
        raise EstimationError(
            f"only {len(per_line)} detectable absorption dips (need >= 2)")
    delta = float(np.median(list(per_line.values())))
    return delta, per_line


# ---------------------------------------------------------------------------
# keystone

@dataclass(frozen=True)
class KeystoneModel:
    """Per-(band, field position) spatial shift relative to a reference band."""

    ref_band: int
    field_samples: np.ndarray   # (F,) window-center sample positions
    coefficients: np.ndarray    # (F, deg+1) polynomial in band index
    samples: int
    bands: int
    max_px: float = KEYSTONE_MAX_PX

    def shifts(self) -> np.ndarray:
        """Evaluate kappa on the full (bands, samples) grid by polynomial
        evaluation per field position and linear interpolation across the
        swath."""
        b = np.arange(self.bands, dtype=np.float64)
        at_fields = np.stack([np.polyval(c, b) for c in self.coefficients],
                             axis=1)                      # (bands, F)
        at_fields -= at_fields[self.ref_band][None, :]    # exact 0 at ref
        s = np.arange(self.samples, dtype=np.float64)
        out = np.empty((self.bands, self.samples))
        for i in range(self.bands):
            out[i] = np.interp(s, self.field_samples, at_fields[i])
        return np.clip(out, -self.max_px, self.max_px)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({
            "ref_band": self.ref_band,
            "field_samples": self.field_samples.tolist(),
            "coefficients": self.coefficients.tolist(),
            "samples": self.samples,
            "bands": self.bands,
            "max_px": self.max_px,
        }, indent=1), encoding="utf-8")

    @classmethod
    def from_json(cls, path) -> "KeystoneModel":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(raw["ref_band"], np.asarray(raw["field_samples"]),
                   np.asarray(raw["coefficients"]), raw["samples"],
                   raw["bands"], raw["max_px"])

    @classmethod
    def zero(cls, bands: int, samples: int,
             ref_band: int = KEYSTONE_REF_BAND) -> "KeystoneModel":
        fields = np.array([0.0, samples - 1.0])
        coef = np.zeros((2, 2))
        return cls(ref_band, fields, coef, samples, bands)


def estimate_keystone(cube: SpectralCube, ref_band: int = KEYSTONE_REF_BAND,
                      n_fields: int = 5, window: int = 64,
                      min_confidence: float = KEYSTONE_MIN_CONFIDENCE,
                      degree: int = 2) -> KeystoneModel:
    """Estimate band-to-band spatial shifts from a high-contrast target.

    Line-averaged across-track profiles of each band are correlated against
    the reference band's profile at several field windows; a polynomial of
    degree <= 2 in band index is fit per field position.  If the mean
    correlation confidence falls below ``min_confidence`` (blurred or
    contaminated imagery), the estimate is refused.
    """
    data = cube.data.astype(np.float64)
    profiles = data.mean(axis=0).T            # (bands, samples)
    bands, samples = profiles.shape
    if not 0 <= ref_band < bands:
        raise EstimationError("reference band outside cube")
    ref = profiles[ref_band]
    if np.std(ref) < 1e-6 * max(abs(np.mean(ref)), 1.0):
        raise EstimationError("low-contrast input: cannot estimate keystone")
    window = min(window, samples)
    field_centers = np.linspace(window / 2.0, samples - window / 2.0, n_fields)
    starts = np.clip(np.round(field_centers - window / 2.0).astype(int),
                     0, samples - window)

    shifts = np.zeros((bands, n_fields))
    confs = np.zeros((bands, n_fields))
    for b in range(bands):
        for f, w0 in enumerate(starts):
            try:
                est = shift_1d(ref[w0:w0 + window],
                               profiles[b, w0:w0 + window],
                               max_shift=KEYSTONE_MAX_PX + 1.0)
            except EstimationError:
                continue
            shifts[b, f] = -est.shift
            confs[b, f] = est.confidence
    mean_conf = float(confs.mean())
    if mean_conf < min_confidence:
        raise EstimationError(
            f"keystone estimation refused: mean correlation confidence "
            f"{mean_conf:.3f} below {min_confidence}")
    low_frac = float(np.mean(confs < 0.5))
    if low_frac > 0.3:
        raise EstimationError(
            f"keystone estimation refused: {low_frac:.0%} of correlation "
            "windows have low confidence (contaminated imagery)")

    b_axis = np.arange(bands, dtype=np.float64)
    coefs = []
    fit_rms = []
    for f in range(n_fields):
        w = confs[:, f]
        if w.sum() <= 0:
            raise EstimationError("no usable windows at a field position")
        c = np.polyfit(b_axis, shifts[:, f], degree, w=w)
        resid = np.polyval(c, b_axis) - shifts[:, f]
        fit_rms.append(np.sqrt(np.average(resid ** 2, weights=w)))
        coefs.append(c)
    if max(fit_rms) > 0.2:
        raise EstimationError(
            f"keystone estimation refused: shift-vs-band fit residual "
            f"{max(fit_rms):.2f} px indicates unreliable correlations")
    return KeystoneModel(ref_band, field_centers, np.asarray(coefs),
                         samples, bands)


def correct_keystone(cube: SpectralCube, model: KeystoneModel):
    """Resample each band's rows by the negated keystone shift.  Returns
    ``(corrected cube, validity mask)``; the reference band passes through
    bit-identically."""
    if model.bands != cube.bands or model.samples != cube.samples:
        raise EstimationError("keystone model does not match cube dimensions")
    kappa = model.shifts()
    data = cube.data.astype(np.float64)
    out = np.empty_like(data)
    valid = np.empty(data.shape, dtype=bool)
    base = np.arange(cube.samples, dtype=np.float64)
    for b in range(cube.bands):
        coords = base - kappa[b]
        rows = data[:, :, b]
        res, ok = resample_rows(rows, np.broadcast_to(coords, rows.shape))
        out[:, :, b] = res
        valid[:, :, b] = ok
    kind = cube.pixel_kind
    if kind == "dn12":
        out = np.clip(np.rint(out), 0, 4095)
    return cube.with_data(out.astype(cube.data.dtype) if kind == "dn12"
                          else out, pixel_kind=kind), valid
