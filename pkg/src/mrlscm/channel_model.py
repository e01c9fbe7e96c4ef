"""Antenna array, beam codebooks and the beam-gain measurement matrix.

The expected multi-beam RSRP of a location is linear in its angular power
spectrum (APS): ``y = A @ x`` where column ``a`` of ``A`` is the coherent gain
of every beam towards the angle with flat index ``a``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from mrlscm.errors import InvalidArgumentError

GainPattern = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


def isotropic_gain(tilt, azimuth):
    return np.ones(np.broadcast(np.asarray(tilt), np.asarray(azimuth)).shape)


def parabolic_gain_pattern(tilt_3db=10.0, azimuth_3db=65.0, electrical_tilt=0.0,
                           max_attenuation_db=30.0) -> GainPattern:
    """3GPP-style parabolic element pattern, returned as linear gain.

    Attenuation is ``min(12 (dt/tilt_3db)^2 + 12 (az/azimuth_3db)^2, max_att)``
    in dB, with each term capped at ``max_att`` as in TR 38.901.
    """

    def pattern(tilt, azimuth):
        tilt = np.asarray(tilt, dtype=float)
        az = (np.asarray(azimuth, dtype=float) + 180.0) % 360.0 - 180.0
        att_v = np.minimum(12.0 * ((tilt - electrical_tilt) / tilt_3db) ** 2, max_attenuation_db)
        att_h = np.minimum(12.0 * (az / azimuth_3db) ** 2, max_attenuation_db)
        att = np.minimum(att_v + att_h, max_attenuation_db)
        return 10.0 ** (-att / 10.0)

    pattern.params = {"type": "parabolic", "tilt_3db": tilt_3db, "azimuth_3db": azimuth_3db,
                      "electrical_tilt": electrical_tilt,
                      "max_attenuation_db": max_attenuation_db}
    return pattern


@dataclass(frozen=True)
class AntennaConfig:
    """Uniform planar array. Spacings are in carrier wavelengths."""

    n_x: int = 8
    n_y: int = 4
    d_x: float = 0.5
    d_y: float = 0.5
    carrier_wavelength: float = 0.0857
    tx_power: float = 1.0
    gain_pattern: Optional[GainPattern] = None

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise InvalidArgumentError("antenna counts must be >= 1")
        if self.d_x <= 0 or self.d_y <= 0:
            raise InvalidArgumentError("antenna spacing must be positive")
        if self.tx_power <= 0:
            raise InvalidArgumentError("tx_power must be positive")

    @property
    def n_antennas(self):
        return self.n_x * self.n_y

    def gain(self, tilt, azimuth):
        pattern = self.gain_pattern or isotropic_gain
        g = np.asarray(pattern(tilt, azimuth), dtype=float)
        if np.any(g < 0) or not np.all(np.isfinite(g)):
            raise InvalidArgumentError("gain pattern must be finite and nonnegative")
        return g

    def to_dict(self):
        pattern = "isotropic"
        if self.gain_pattern is not None:
            pattern = getattr(self.gain_pattern, "params", "custom")
        return {"n_x": self.n_x, "n_y": self.n_y, "d_x": self.d_x, "d_y": self.d_y,
                "carrier_wavelength": self.carrier_wavelength, "tx_power": self.tx_power,
                "gain_pattern": pattern}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        pattern = d.pop("gain_pattern", "isotropic")
        gp = None
        if isinstance(pattern, dict):
            params = {k: v for k, v in pattern.items() if k != "type"}
            if pattern.get("type") != "parabolic":
                raise InvalidArgumentError(f"unknown gain pattern {pattern!r}")
            gp = parabolic_gain_pattern(**params)
        elif pattern not in ("isotropic", None):
            raise InvalidArgumentError(f"unknown gain pattern {pattern!r}")
        return cls(gain_pattern=gp, **d)


@dataclass(frozen=True, eq=False)
class AngularGrid:
    """Tilt x azimuth grid in degrees; flat index ``a = i * n_h + j``."""

    tilts: np.ndarray
    azimuths: np.ndarray

    def __post_init__(self):
        tilts = _frozen(self.tilts)
        azimuths = _frozen(self.azimuths)
        for name, v in (("tilts", tilts), ("azimuths", azimuths)):
            if v.ndim != 1 or v.size == 0:
                raise InvalidArgumentError(f"{name} must be a non-empty 1-d list")
            if np.any(np.diff(v) <= 0):
                raise InvalidArgumentError(f"{name} must be strictly increasing")
        object.__setattr__(self, "tilts", tilts)
        object.__setattr__(self, "azimuths", azimuths)

    @property
    def n_v(self):
        return self.tilts.size

    @property
    def n_h(self):
        return self.azimuths.size

    @property
    def n_a(self):
        return self.n_v * self.n_h

    def flat_index(self, i, j):
        return i * self.n_h + j

    def angles(self):
        """Per flat index (tilt, azimuth) arrays of length n_a."""
        tilt = np.repeat(self.tilts, self.n_h)
        az = np.tile(self.azimuths, self.n_v)
        return tilt, az

    def nearest_index(self, tilt, azimuth):
        """Flat index of the grid angle closest to (tilt, azimuth), azimuth wrapped."""
        i = int(np.argmin(np.abs(self.tilts - tilt)))
        daz = np.abs(wrap_degrees(self.azimuths - azimuth))
        j = int(np.argmin(daz))
        return self.flat_index(i, j)

    def __eq__(self, other):
        return (isinstance(other, AngularGrid)
                and np.array_equal(self.tilts, other.tilts)
                and np.array_equal(self.azimuths, other.azimuths))

    def __hash__(self):
        return hash((self.tilts.tobytes(), self.azimuths.tobytes()))

    def to_dict(self):
        return {"tilts": self.tilts.tolist(), "azimuths": self.azimuths.tolist()}


def wrap_degrees(d):
    """Wrap angle differences to (-180, 180]."""
    d = np.asarray(d, dtype=float)
    w = np.mod(d + 180.0, 360.0) - 180.0
    return np.where(w == -180.0, 180.0, w)


def _progression(start, stop, step, name):
    if not step > 0:
        raise InvalidArgumentError(f"{name} step must be positive")
    if stop < start:
        raise InvalidArgumentError(f"{name} stop must be >= start")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


def build_angular_grid(tilt_start=-90.0, tilt_stop=90.0, tilt_step=2.0,
                       az_start=-90.0, az_stop=265.0, az_step=5.0) -> AngularGrid:
    return AngularGrid(_progression(tilt_start, tilt_stop, tilt_step, "tilt"),
                       _progression(az_start, az_stop, az_step, "azimuth"))


def _antenna_indices(config):
    # 1-based antenna positions, x-major flattening
    x = np.repeat(np.arange(1, config.n_x + 1), config.n_y)
    y = np.tile(np.arange(1, config.n_y + 1), config.n_x)
    return x, y


def _response_phase(config, tilt, azimuth):
    t = np.deg2rad(np.asarray(tilt, dtype=float))[..., None]
    p = np.deg2rad(np.asarray(azimuth, dtype=float))[..., None]
    x, y = _antenna_indices(config)
    return 2.0 * np.pi * (config.d_x * x * np.cos(t) * np.sin(p) + config.d_y * y * np.sin(t))


def array_response(config: AntennaConfig, tilt, azimuth) -> np.ndarray:
    """Steering vector of length n_x * n_y (x-major) for one or many angles."""
    if not (np.all(np.isfinite(tilt)) and np.all(np.isfinite(azimuth))):
        raise InvalidArgumentError("angles must be finite")
    return np.exp(-1j * _response_phase(config, tilt, azimuth))


@dataclass(frozen=True, eq=False)
class BeamCodebook:
    """Per-beam phase offsets, shape (m, n_x, n_y), in radians."""

    phases: np.ndarray

    def __post_init__(self):
        ph = _frozen(self.phases)
        if ph.ndim != 3 or ph.shape[0] < 1:
            raise InvalidArgumentError("phases must have shape (m, n_x, n_y) with m >= 1")
        object.__setattr__(self, "phases", ph)

    @property
    def m(self):
        return self.phases.shape[0]

    def precoders(self):
        return np.exp(1j * self.phases)

    def permuted(self, order):
        return BeamCodebook(self.phases[np.asarray(order)])


def steered_codebook(config: AntennaConfig, pointings: Sequence[Sequence[float]]) -> BeamCodebook:
    """Conjugate-phase beams, each coherent towards one (tilt, azimuth) pointing."""
    pointings = np.asarray(pointings, dtype=float).reshape(-1, 2)
    phase = _response_phase(config, pointings[:, 0], pointings[:, 1])
    return BeamCodebook(phase.reshape(len(pointings), config.n_x, config.n_y))


DEFAULT_POINTINGS = [(6.0, az) for az in np.arange(-52.5, 53.0, 15.0)]
# post-adjustment codebook: extra downtilt and two tilt layers
ADJUSTED_POINTINGS = ([(3.0, az) for az in (-45.0, -15.0, 15.0, 45.0)]
                      + [(14.0, az) for az in (-45.0, -15.0, 15.0, 45.0)])


def default_codebook(config: AntennaConfig) -> BeamCodebook:
    return steered_codebook(config, DEFAULT_POINTINGS)


def adjusted_codebook(config: AntennaConfig) -> BeamCodebook:
    return steered_codebook(config, ADJUSTED_POINTINGS)


@dataclass(frozen=True, eq=False)
class MeasurementMatrix:
    a: np.ndarray
    config_digest: str = ""
    grid: Optional[AngularGrid] = field(default=None, compare=False)

    def __post_init__(self):
        a = _frozen(self.a)
        if a.ndim != 2:
            raise InvalidArgumentError("measurement matrix must be 2-d")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise InvalidArgumentError("measurement matrix entries must be finite and >= 0")
        if self.grid is not None and self.grid.n_a != a.shape[1]:
            raise InvalidArgumentError("grid size does not match matrix column count")
        object.__setattr__(self, "a", a)

    @property
    def m(self):
        return self.a.shape[0]

    @property
    def n_a(self):
        return self.a.shape[1]

    def with_grid(self, grid):
        return MeasurementMatrix(self.a, self.config_digest, grid)


def _digest(config, codebook, grid, gains):
    h = hashlib.sha256()
    h.update(json.dumps({k: v for k, v in config.to_dict().items() if k != "gain_pattern"},
                        sort_keys=True).encode())
    for arr in (gains, codebook.phases, grid.tilts, grid.azimuths):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def build_measurement_matrix(config: AntennaConfig, codebook: BeamCodebook,
                             grid: AngularGrid) -> MeasurementMatrix:
    if codebook.phases.shape[1:] != (config.n_x, config.n_y):
        raise InvalidArgumentError(
            f"codebook phases {codebook.phases.shape[1:]} do not match array "
            f"({config.n_x}, {config.n_y})")
    tilt, az = grid.angles()
    gains = config.gain(tilt, az)
    resp = array_response(config, tilt, az)                  # (n_a, N_T)
    w = codebook.precoders().reshape(codebook.m, -1)         # (m, N_T)
    coherent = np.einsum("mt,at->ma", w, resp)
    a = config.tx_power * gains[None, :] * np.abs(coherent) ** 2
    return MeasurementMatrix(a, _digest(config, codebook, grid, gains), grid)


def expected_rsrp(a: MeasurementMatrix, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (a.n_a,):
        raise InvalidArgumentError(f"APS length {x.shape} != {a.n_a}")
    if np.any(x < 0):
        raise InvalidArgumentError("APS entries must be nonnegative")
    return a.a @ x


def dbm_to_linear(v):
    return 10.0 ** (np.asarray(v, dtype=float) / 10.0)


def linear_to_dbm(v):
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        raise InvalidArgumentError("linear power must be positive")
    return 10.0 * np.log10(v)


def _grid_sidecar(path):
    return Path(str(path) + ".grid.json")


def write_matrix_bin(path, a):
    """Little-endian: uint32 M, uint32 N_A, then row-major float64.

    The angular grid, when known, goes to a ``<path>.grid.json`` sidecar.
    """
    arr = np.asarray(a.a if isinstance(a, MeasurementMatrix) else a, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())
    grid = a.grid if isinstance(a, MeasurementMatrix) else None
    if grid is not None:
        _grid_sidecar(path).write_text(json.dumps({"tilts": grid.tilts.tolist(),
                                                   "azimuths": grid.azimuths.tolist()}) + "\n")


def read_matrix_bin(path, grid=None) -> MeasurementMatrix:
    """Inverse of :func:`write_matrix_bin`.

    Without an explicit ``grid`` the sidecar is used; failing that, the
    default grid is assumed when its size matches N_A.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise InvalidArgumentError(f"{path}: truncated header")
    m, n = struct.unpack("<II", raw[:8])
    body = raw[8:]
    if len(body) != 8 * m * n:
        raise InvalidArgumentError(f"{path}: expected {m}x{n} float64 payload")
    a = np.frombuffer(body, dtype="<f8").reshape(m, n).astype(float)
    digest = hashlib.sha256(raw).hexdigest()[:16]
    if grid is None:
        side = _grid_sidecar(path)
        if side.exists():
            g = json.loads(side.read_text())
            grid = AngularGrid(np.array(g["tilts"], float), np.array(g["azimuths"], float))
        elif n == build_angular_grid().n_a:
            grid = build_angular_grid()
    if grid is not None and grid.n_a != n:
        raise InvalidArgumentError(f"{path}: grid has {grid.n_a} angles, matrix has {n} columns")
    return MeasurementMatrix(a, digest, grid)


def radio_from_dict(d):
    """(AntennaConfig, BeamCodebook, AngularGrid) from a matrix config dict."""
    config = AntennaConfig.from_dict(d.get("antenna", {}))
    cb = d.get("codebook", {})
    pointings = cb.get("pointings", DEFAULT_POINTINGS)
    codebook = steered_codebook(config, pointings)
    g = d.get("grid", {})
    tilt = g.get("tilt", [-90.0, 90.0, 2.0])
    azimuth = g.get("azimuth", [-90.0, 265.0, 5.0])
    grid = build_angular_grid(*tilt, *azimuth)
    return config, codebook, grid
