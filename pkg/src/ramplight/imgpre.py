"""Sky-image preprocessing on HxWx3 uint8 arrays.

Pipeline order is mask -> stabilize -> sun-centered crop -> 2x downsample ->
scale to [0, 1]. Rasters are exchanged as binary PPM (P6); masks as PGM (P5)
where 0 means masked out.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np


class ImageFormatError(ValueError):
    pass


class SunBelowHorizon(ValueError):
    pass


def _check_rgb(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    return img


def apply_mask(img, mask):
    img = _check_rgb(img)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {img.shape[:2]}")
    out = img.copy()
    out[~mask] = 0
    return out


def crop_centered(img, center, size: int):
    """size x size window centered at center=(x, y); outside the source is black."""
    img = _check_rgb(img)
    if size <= 0 or size % 2:
        raise ValueError("crop size must be even and positive")
    h, w = img.shape[:2]
    cx, cy = int(round(center[0])), int(round(center[1]))
    x0, y0 = cx - size // 2, cy - size // 2
    out = np.zeros((size, size, 3), dtype=img.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = img[sy0:sy1, sx0:sx1]
    return out


def downsample2(img):
    """Mean of each 2x2 block, rounded half up."""
    img = _check_rgb(img)
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        raise ValueError("downsample2 needs even width and height")
    blocks = img.astype(np.int64).reshape(h // 2, 2, w // 2, 2, 3).sum(axis=(1, 3))
    return ((blocks + 2) // 4).astype(img.dtype)


def pixel_normalize(img):
    return np.asarray(img, dtype=float) / 255.0


@dataclass
class ColorStabilizerState:
    mu: np.ndarray | None = None  # per-channel running mean intensity
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))  # last applied mu/i

    @property
    def initialized(self) -> bool:
        return self.mu is not None


def channel_intensity(img) -> np.ndarray:
    """Per-channel mean over pixels that are not pure black."""
    img = _check_rgb(img)
    keep = np.any(img != 0, axis=2)
    if not keep.any():
        raise ValueError("frame has no unmasked pixels")
    return img[keep].astype(float).mean(axis=0)


def stabilize_colors(img, state: ColorStabilizerState, smoothing: float = 0.9):
    """Low-pass the channel intensities and rescale the frame toward them.

    mu_t = 0.9 mu_{t-1} + 0.1 i_t (mu_0 = i_0); every channel is multiplied by
    mu_t / i_t, then rounded and clipped to [0, 255]. Returns (image, new state).
    """
    i_t = channel_intensity(img)
    if np.any(i_t <= 0):
        raise ValueError("a colour channel is zero on every unmasked pixel")
    mu = i_t.copy() if state.mu is None else smoothing * state.mu + (1 - smoothing) * i_t
    scale = mu / i_t
    out = np.clip(np.floor(img.astype(float) * scale + 0.5), 0, 255).astype(np.uint8)
    return out, ColorStabilizerState(mu, scale)


# --- sun geometry ---------------------------------------------------------------

@dataclass(frozen=True)
class FisheyeGeometry:
    """Equidistant fisheye: radius from center proportional to zenith angle.

    ``radius`` is the pixel distance of the horizon circle. With ``mirrored``
    (camera looking up, north at the top) east appears on the left.
    """

    cx: float = 783.0
    cy: float = 783.0
    radius: float = 760.0
    rotation_deg: float = 0.0
    mirrored: bool = True


def solar_position(epoch_seconds: float, latitude: float, longitude: float) -> tuple[float, float]:
    """(azimuth, elevation) in degrees, azimuth clockwise from north.

    Low-precision almanac formulas (about 0.01 deg for 1950-2050), no refraction.
    """
    n = epoch_seconds / 86400.0 + 2440587.5 - 2451545.0
    L = (280.460 + 0.9856474 * n) % 360
    g = math.radians((357.528 + 0.9856003 * n) % 360)
    lam = math.radians(L + 1.915 * math.sin(g) + 0.020 * math.sin(2 * g))
    eps = math.radians(23.439 - 4e-7 * n)
    ra = math.atan2(math.cos(eps) * math.sin(lam), math.cos(lam))
    dec = math.asin(math.sin(eps) * math.sin(lam))
    ut_hours = (epoch_seconds % 86400.0) / 3600.0
    # sidereal time from the 0h UT day count plus the elapsed UT hours
    gmst = (6.697375 + 0.0657098242 * (n - ut_hours / 24.0) + 1.00273790935 * ut_hours) % 24
    ha = math.radians(gmst * 15 + longitude) - ra
    phi = math.radians(latitude)
    sin_el = math.sin(dec) * math.sin(phi) + math.cos(dec) * math.cos(phi) * math.cos(ha)
    el = math.asin(max(-1.0, min(1.0, sin_el)))
    az = math.atan2(-math.sin(ha), math.tan(dec) * math.cos(phi) - math.sin(phi) * math.cos(ha))
    return math.degrees(az) % 360, math.degrees(el)


def project_fisheye(azimuth: float, elevation: float, geometry: FisheyeGeometry) -> tuple[float, float]:
    zenith = 90.0 - elevation
    rho = geometry.radius * zenith / 90.0
    a = math.radians(azimuth + geometry.rotation_deg)
    dx = rho * math.sin(a)
    if geometry.mirrored:
        dx = -dx
    return geometry.cx + dx, geometry.cy - rho * math.cos(a)


def sun_pixel(epoch_seconds: float, latitude: float, longitude: float,
              geometry: FisheyeGeometry) -> tuple[float, float]:
    az, el = solar_position(epoch_seconds, latitude, longitude)
    if el < 0:
        when = datetime.fromtimestamp(epoch_seconds, tz=timezone.utc).isoformat()
        raise SunBelowHorizon(f"sun is below the horizon at {when} (elevation {el:.2f} deg)")
    return project_fisheye(az, el, geometry)


def preprocess_frame(img, mask, state: ColorStabilizerState, center, crop_size: int = 448):
    """mask -> stabilize -> crop -> downsample; returns (uint8 image, new state)."""
    img = apply_mask(img, mask)
    img, state = stabilize_colors(img, state)
    img = crop_centered(img, center, crop_size)
    return downsample2(img), state


# --- PNM I/O ----------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    data = open(path, "rb").read()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise ImageFormatError(f"{path}: truncated header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} file, got {tokens[0][:2]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: bad header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit rasters are supported")
    pos += 1  # single whitespace byte after maxval
    n = w * h * channels
    body = data[pos:pos + n]
    if len(body) != n:
        raise ImageFormatError(f"{path}: expected {n} bytes of pixel data, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3).copy()


def write_ppm(path, img):
    img = _check_rgb(img)
    if img.dtype != np.uint8:
        raise ValueError("write_ppm expects uint8 data")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_mask_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1) != 0


def write_mask_pgm(path, mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write((mask.astype(np.uint8) * 255).tobytes())
