"""WGS-84 geometry: curvature radii, normal gravity, local NED projection and
road-frame covariance rotation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# WGS-84
SEMI_MAJOR = 6378137.0
ECC2 = 6.69437999014e-3
FLATTENING = 1.0 / 298.257223563
EARTH_RATE = 7.292115e-5  # rad/s
GRAVITY_EQUATOR = 9.7803253359
GRAVITY_K = 0.00193185265241
GRAVITY_M = 0.00344978650684  # omega^2 a^2 b / GM


@dataclass(frozen=True)
class GeodeticPosition:
    latitude: float  # rad
    longitude: float  # rad
    height: float  # m above ellipsoid

    def __post_init__(self) -> None:
        if not abs(self.latitude) <= math.pi / 2:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not abs(self.longitude) <= math.pi:
            raise ValueError(f"longitude out of range: {self.longitude}")
        if not math.isfinite(self.height):
            raise ValueError("height must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.latitude, self.longitude, self.height])

    @classmethod
    def from_degrees(cls, lat_deg: float, lon_deg: float, height: float = 0.0) -> "GeodeticPosition":
        return cls(math.radians(lat_deg), math.radians(lon_deg), height)


@dataclass(frozen=True)
class NedVector:
    north: float
    east: float
    down: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(c) for c in (self.north, self.east, self.down)):
            raise ValueError("NED components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.north, self.east, self.down])


def normalize_angle(angle: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class RoadFrame:
    """Road direction given as the angle from due north (positive towards east)."""

    theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @classmethod
    def from_degrees(cls, theta_deg: float) -> "RoadFrame":
        return cls(math.radians(theta_deg))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])


def radii_of_curvature(lat: float) -> tuple[float, float]:
    """Meridian and prime-vertical radii of curvature at geodetic latitude ``lat``.

    Returns
    -------
    (R_M, R_N) in meters.
    """
    if not abs(lat) <= math.pi / 2:
        raise ValueError(f"latitude out of range: {lat}")
    s2 = math.sin(lat) ** 2
    w = 1.0 - ECC2 * s2
    r_n = SEMI_MAJOR / math.sqrt(w)
    r_m = SEMI_MAJOR * (1.0 - ECC2) / (w * math.sqrt(w))
    return r_m, r_n


def normal_gravity(lat: float, height: float) -> float:
    """Magnitude of WGS-84 normal gravity (Somigliana plus free-air terms), m/s^2."""
    s2 = math.sin(lat) ** 2
    g0 = GRAVITY_EQUATOR * (1.0 + GRAVITY_K * s2) / math.sqrt(1.0 - ECC2 * s2)
    a = SEMI_MAJOR
    return g0 * (
        1.0 - 2.0 / a * (1.0 + FLATTENING + GRAVITY_M - 2.0 * FLATTENING * s2) * height + 3.0 * height**2 / a**2
    )


def geodetic_delta_to_ned(delta, at: GeodeticPosition) -> NedVector:
    """Convert a small (dL, dlambda, dh) offset at ``at`` into NED meters."""
    d_lat, d_lon, d_h = (float(v) for v in delta)
    r_m, r_n = radii_of_curvature(at.latitude)
    return NedVector(
        (r_m + at.height) * d_lat,
        (r_n + at.height) * math.cos(at.latitude) * d_lon,
        -d_h,
    )


def horizontal_scale(lat: float, height: float) -> tuple[float, float]:
    """Meters per radian of latitude and of longitude at the given point."""
    r_m, r_n = radii_of_curvature(lat)
    return r_m + height, (r_n + height) * math.cos(lat)


class LocalFrame:
    """Fixed tangent-plane NED frame anchored at ``origin``.

    The mapping is the linearised offset conversion evaluated at the origin, so
    ``to_geodetic`` and ``to_ned`` are exact inverses of each other.
    """

    def __init__(self, origin: GeodeticPosition) -> None:
        self.origin = origin
        self.scale_n, self.scale_e = horizontal_scale(origin.latitude, origin.height)

    def to_ned(self, lat, lon, height=None) -> np.ndarray:
        """Project geodetic coordinates (scalars or arrays) to local NED.

        Returns shape (..., 2) when ``height`` is omitted, else (..., 3).
        """
        n = self.scale_n * (np.asarray(lat) - self.origin.latitude)
        e = self.scale_e * (np.asarray(lon) - self.origin.longitude)
        if height is None:
            return np.stack([n, e], axis=-1)
        d = -(np.asarray(height) - self.origin.height)
        return np.stack([n, e, d], axis=-1)

    def to_geodetic(self, north, east, down=0.0) -> np.ndarray:
        """Inverse of :meth:`to_ned`; returns (..., 3) lat, lon, height."""
        lat = self.origin.latitude + np.asarray(north) / self.scale_n
        lon = self.origin.longitude + np.asarray(east) / self.scale_e
        h = self.origin.height - np.asarray(down) + 0.0 * lat
        return np.stack([lat, lon, h], axis=-1)


def rotate_road_covariance(frame: RoadFrame, sigma: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Rotate a 2x2 (longitudinal, lateral) covariance into the NED horizontal plane."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (2, 2):
        raise ValueError(f"expected a 2x2 covariance, got shape {sigma.shape}")
    if not np.allclose(sigma, sigma.T, rtol=0.0, atol=atol):
        raise ValueError("road-frame covariance is not symmetric")
    t = frame.rotation()
    out = t @ sigma @ t.T
    return 0.5 * (out + out.T)
