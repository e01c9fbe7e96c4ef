"""Synthetic MR data: ground-truth scenarios, trajectories, rendering, CSV I/O.

A scenario partitions the service area into Voronoi regions, each carrying a
planted sparse APS whose dominant path points along the line of sight from
the serving BS to the region centroid. Samples are rendered as ``A @ x``
plus per-beam log-normal shadowing, then masked like real measurement reports.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from mrlscm.channel_model import (
    ADJUSTED_POINTINGS,
    DEFAULT_POINTINGS,
    AntennaConfig,
    AngularGrid,
    MeasurementMatrix,
    array_response,
    build_angular_grid,
    build_measurement_matrix,
    dbm_to_linear,
    linear_to_dbm,
    steered_codebook,
    wrap_degrees,
)
from mrlscm.errors import InvalidArgumentError, ParseError

SENTINEL_DBM = -140.0
MISSING_TOKEN = "x"


@dataclass(frozen=True)
class Region:
    seed: tuple                 # Voronoi generator point (x, y)
    centroid: tuple             # centroid of the clipped cell
    aps_index: tuple            # flat angle indices of planted paths
    aps_power: tuple            # linear powers (mW)

    def aps_vector(self, n_a):
        x = np.zeros(n_a)
        x[list(self.aps_index)] = self.aps_power
        return x


@dataclass(frozen=True)
class NeighborCell:
    cell_id: str
    location: tuple             # (x, y, h)
    orientation_deg: float      # boresight bearing
    power_offset_db: float = 0.0


@dataclass(frozen=True)
class RadioConfig:
    antenna: AntennaConfig = field(default_factory=AntennaConfig)
    pointings_train: tuple = tuple(DEFAULT_POINTINGS)
    pointings_test: tuple = tuple(ADJUSTED_POINTINGS)
    grid_spec: tuple = (-90.0, 90.0, 2.0, -90.0, 265.0, 5.0)

    def grid(self) -> AngularGrid:
        return build_angular_grid(*self.grid_spec)

    def matrix(self, test=False) -> MeasurementMatrix:
        pts = self.pointings_test if test else self.pointings_train
        cb = steered_codebook(self.antenna, pts)
        return build_measurement_matrix(self.antenna, cb, self.grid())

    def to_dict(self):
        return {"antenna": self.antenna.to_dict(),
                "pointings_train": [list(p) for p in self.pointings_train],
                "pointings_test": [list(p) for p in self.pointings_test],
                "grid": list(self.grid_spec)}

    @classmethod
    def from_dict(cls, d):
        return cls(AntennaConfig.from_dict(d.get("antenna", {})),
                   tuple(tuple(p) for p in d.get("pointings_train", DEFAULT_POINTINGS)),
                   tuple(tuple(p) for p in d.get("pointings_test", ADJUSTED_POINTINGS)),
                   tuple(d.get("grid", cls.grid_spec)))


@dataclass(frozen=True)
class Scenario:
    bs_location: tuple
    area: tuple                 # (xmin, ymin, xmax, ymax)
    regions: tuple
    neighbors: tuple = ()
    c_true: int = 3
    rng_seed: int = 0
    radio: RadioConfig = field(default_factory=RadioConfig)
    serving_cell_id: str = "12595215_3"

    def region_of(self, xy):
        """Index of the region containing each point; raises outside the area."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        x0, y0, x1, y1 = self.area
        tol = 1e-9
        inside = ((xy[:, 0] >= x0 - tol) & (xy[:, 0] <= x1 + tol)
                  & (xy[:, 1] >= y0 - tol) & (xy[:, 1] <= y1 + tol))
        if not inside.all():
            bad = xy[~inside][0]
            raise InvalidArgumentError(f"position {tuple(bad)} lies outside the service area")
        seeds = np.array([r.seed for r in self.regions])
        d2 = ((xy[:, None, :] - seeds[None, :, :]) ** 2).sum(-1)
        return np.argmin(d2, axis=1)

    def aps_matrix(self, n_a):
        return np.stack([r.aps_vector(n_a) for r in self.regions])

    def to_dict(self):
        return {
            "bs_location": list(self.bs_location),
            "area": list(self.area),
            "c_true": self.c_true,
            "rng_seed": self.rng_seed,
            "serving_cell_id": self.serving_cell_id,
            "radio": self.radio.to_dict(),
            "regions": [{"seed": list(r.seed), "centroid": list(r.centroid),
                         "aps": [[int(i), float(p)] for i, p in zip(r.aps_index, r.aps_power)]}
                        for r in self.regions],
            "neighbors": [{"cell_id": n.cell_id, "location": list(n.location),
                           "orientation_deg": n.orientation_deg,
                           "power_offset_db": n.power_offset_db} for n in self.neighbors],
        }

    @classmethod
    def from_dict(cls, d):
        regions = tuple(Region(tuple(r["seed"]), tuple(r.get("centroid", r["seed"])),
                               tuple(int(i) for i, _ in r["aps"]),
                               tuple(float(p) for _, p in r["aps"])) for r in d["regions"])
        neighbors = tuple(NeighborCell(n["cell_id"], tuple(n["location"]),
                                       float(n.get("orientation_deg", 0.0)),
                                       float(n.get("power_offset_db", 0.0)))
                          for n in d.get("neighbors", []))
        return cls(tuple(d["bs_location"]), tuple(d["area"]), regions, neighbors,
                   int(d.get("c_true", 3)), int(d.get("rng_seed", 0)),
                   RadioConfig.from_dict(d.get("radio", {})),
                   d.get("serving_cell_id", "12595215_3"))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def save_scenario(scenario, path):
    with open(path, "w") as fh:
        json.dump(scenario.to_dict(), fh, indent=1, sort_keys=True)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return Scenario.from_dict(json.load(fh))


def path_loss_db(distance_m, pl0=40.0, exponent=3.0):
    return pl0 + 10.0 * exponent * np.log10(np.maximum(distance_m, 1.0))


def los_angles(bs_location, xy, orientation_deg=0.0):
    """(tilt, azimuth) of points as seen by an array; downtilt positive."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    dx = xy[:, 0] - bs_location[0]
    dy = xy[:, 1] - bs_location[1]
    dist = np.hypot(dx, dy)
    bearing = np.degrees(np.arctan2(dy, dx))
    tilt = np.degrees(np.arctan2(bs_location[2], dist))
    az = wrap_degrees(bearing - orientation_deg)
    return tilt, az, dist


def _voronoi_centroids(seeds, area, n=160):
    x0, y0, x1, y1 = area
    gx = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    gy = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    pts = np.stack(np.meshgrid(gx, gy, indexing="ij"), -1).reshape(-1, 2)
    lab = np.argmin(((pts[:, None, :] - seeds[None]) ** 2).sum(-1), axis=1)
    cents = seeds.copy()
    for k in range(len(seeds)):
        sel = lab == k
        if sel.any():
            cents[k] = pts[sel].mean(0)
    return cents


def generate_scenario(area, n_regions, c_true, seed, bs_location=(0.0, 0.0, 30.0),
                      n_neighbors=8, radio: Optional[RadioConfig] = None,
                      secondary_power=(0.1, 0.5), scatter_spread=(20.0, 8.0),
                      region_offset_db=(-12.0, 0.0)) -> Scenario:
    """Random Voronoi partition of ``area`` with planted sparse APS per region.

    Each region holds its LoS column plus ``c_true - 1`` weaker paths drawn
    within ``scatter_spread`` = (azimuth, tilt) degrees of the LoS column.
    A per-region attenuation drawn from ``region_offset_db`` (blockage,
    foliage) scales the whole APS.
    """
    x0, y0, x1, y1 = map(float, area)
    if not (x1 > x0 and y1 > y0):
        raise InvalidArgumentError("area must have positive width and height")
    if n_regions < 1 or c_true < 1:
        raise InvalidArgumentError("n_regions and c_true must be >= 1")
    radio = radio or RadioConfig()
    grid = radio.grid()
    rng = np.random.default_rng(seed)
    seeds = np.column_stack([rng.uniform(x0, x1, n_regions), rng.uniform(y0, y1, n_regions)])
    cents = _voronoi_centroids(seeds, (x0, y0, x1, y1))
    tilt_all, az_all = grid.angles()

    regions = []
    for k in range(n_regions):
        tilt, az, dist = los_angles(bs_location, cents[k])
        los = grid.nearest_index(tilt[0], az[0])
        offset_db = float(rng.uniform(*region_offset_db))
        p_los = float(dbm_to_linear(-path_loss_db(np.hypot(dist[0], bs_location[2])) + offset_db))
        idx, powers = [los], [p_los]
        # secondary scatterers around the device are seen from the BS within a
        # small angular spread of the LoS direction
        cand = np.flatnonzero((np.abs(wrap_degrees(az_all - az_all[los])) <= scatter_spread[0])
                              & (np.abs(tilt_all - tilt_all[los]) <= scatter_spread[1]))
        cand = cand[cand != los]
        extra = rng.choice(cand, size=min(c_true - 1, cand.size), replace=False) if c_true > 1 else []
        for j in np.sort(np.asarray(extra, dtype=int)):
            idx.append(int(j))
            powers.append(p_los * float(rng.uniform(*secondary_power)))
        order = np.argsort(idx)
        regions.append(Region(tuple(float(v) for v in seeds[k]), tuple(float(v) for v in cents[k]),
                              tuple(int(idx[o]) for o in order),
                              tuple(float(powers[o]) for o in order)))

    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    radius = 0.75 * max(x1 - x0, y1 - y0)
    neighbors = []
    for q in range(n_neighbors):
        ang = 2 * np.pi * (q + 0.5) / n_neighbors + rng.uniform(-0.2, 0.2)
        loc = (cx + radius * np.cos(ang), cy + radius * np.sin(ang), float(rng.uniform(20, 40)))
        facing = float(np.degrees(np.arctan2(cy - loc[1], cx - loc[0])))
        neighbors.append(NeighborCell(f"N{q + 1}", tuple(float(v) for v in loc), facing,
                                      float(rng.uniform(-3.0, 3.0))))
    return Scenario(tuple(float(v) for v in bs_location), (x0, y0, x1, y1), tuple(regions),
                    tuple(neighbors), int(c_true), int(seed), radio)


def simulate_trajectories(scenario: Scenario, n_calls, samples_per_call, speed, report_period,
                          seed, call_id_base=268615725, t_span=3600.0):
    """Random-waypoint walks; returns a list of (call_id, [(t, x, y), ...])."""
    if n_calls < 1 or samples_per_call < 1:
        raise InvalidArgumentError("counts must be >= 1")
    if speed < 0 or report_period <= 0:
        raise InvalidArgumentError("speed must be >= 0 and report_period > 0")
    x0, y0, x1, y1 = scenario.area
    rng = np.random.default_rng(seed)
    step = speed * report_period
    out = []
    for c in range(n_calls):
        t0 = float(np.floor(rng.uniform(0.0, t_span)))
        pos = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        target = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        pts = []
        for s in range(samples_per_call):
            pts.append((t0 + s * report_period, float(pos[0]), float(pos[1])))
            left = step
            # move at most one step; stop at the waypoint and draw a new one
            gap = target - pos
            dist = float(np.hypot(*gap))
            if dist <= left:
                pos = target.copy()
                target = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
            elif left > 0:
                pos = pos + gap * (left / dist)
        out.append((str(call_id_base + c), pts))
    return out


@dataclass(frozen=True)
class MissingPolicy:
    threshold_dbm: float = -105.0
    p_weak: float = 0.5
    p_random: float = 0.02
    neighbor_p_random: float = 0.25
    neighbor_p_weak: float = 0.8

    @classmethod
    def none(cls):
        return cls(threshold_dbm=-np.inf, p_weak=0.0, p_random=0.0,
                   neighbor_p_random=0.0, neighbor_p_weak=0.0)


@dataclass
class MRSample:
    timestamp: float
    call_id: str
    serving_cell_id: str
    serving_rsrp: np.ndarray            # (M,) dBm, sentinel where masked
    serving_mask: np.ndarray            # (M,) bool
    neighbor_rsrp: np.ndarray           # (Q, M) dBm
    neighbor_mask: np.ndarray           # (Q, M) bool
    true_location: Optional[tuple] = None
    is_labeled: bool = False

    def __eq__(self, other):
        if not isinstance(other, MRSample):
            return NotImplemented
        return (self.timestamp == other.timestamp and self.call_id == other.call_id
                and self.serving_cell_id == other.serving_cell_id
                and np.array_equal(self.serving_rsrp, other.serving_rsrp)
                and np.array_equal(self.serving_mask, other.serving_mask)
                and np.array_equal(self.neighbor_rsrp, other.neighbor_rsrp)
                and np.array_equal(self.neighbor_mask, other.neighbor_mask)
                and self.true_location == other.true_location
                and self.is_labeled == other.is_labeled)

    def feature_vector(self):
        """Stacked serving + neighbor dBm with masked entries at the sentinel."""
        return np.concatenate([np.where(self.serving_mask, self.serving_rsrp, SENTINEL_DBM),
                               np.where(self.neighbor_mask, self.neighbor_rsrp,
                                        SENTINEL_DBM).ravel()])


@dataclass
class Dataset:
    train: List[MRSample]
    test: List[MRSample]
    matrix_train: MeasurementMatrix
    matrix_test: MeasurementMatrix
    scenario_digest: str


def _apply_mask(rng, values_db, threshold, p_weak, p_random):
    weak = values_db < threshold
    u = rng.random(values_db.shape)
    drop = np.where(weak, u < p_weak, u < p_random)
    drop |= values_db < SENTINEL_DBM
    return ~drop


def _neighbor_rsrp(scenario, xy):
    """(n_points, Q, M) noiseless neighbor RSRP in dBm at exact LoS angles."""
    radio = scenario.radio
    cb = steered_codebook(radio.antenna, radio.pointings_train)
    w = cb.precoders().reshape(cb.m, -1)
    out = np.empty((len(xy), len(scenario.neighbors), cb.m))
    for q, nb in enumerate(scenario.neighbors):
        tilt, az, dist = los_angles(nb.location, xy, nb.orientation_deg)
        resp = array_response(radio.antenna, tilt, az)
        gain = np.abs(resp @ w.T) ** 2 * radio.antenna.gain(tilt, az)[:, None]
        pl = path_loss_db(np.hypot(dist, nb.location[2]))
        p_path = dbm_to_linear(-pl + nb.power_offset_db)
        lin = radio.antenna.tx_power * gain * p_path[:, None]
        out[:, q, :] = 10.0 * np.log10(np.maximum(lin, 1e-300))
    return out


def render_samples(scenario: Scenario, trajectories, a: MeasurementMatrix, shadowing_db,
                   missing: Optional[MissingPolicy], seed, label_all=False) -> List[MRSample]:
    """Measurement reports along the trajectories using beam-gain matrix ``a``."""
    if shadowing_db < 0:
        raise InvalidArgumentError("shadowing must be >= 0")
    missing = missing or MissingPolicy.none()
    rng = np.random.default_rng(seed)
    rows = [(cid, t, x, y) for cid, pts in trajectories for (t, x, y) in pts]
    if not rows:
        return []
    xy = np.array([(x, y) for _, _, x, y in rows])
    region = scenario.region_of(xy)
    X = scenario.aps_matrix(a.n_a)
    mean_lin = X @ a.a.T                                   # (R, M)
    if np.any(mean_lin <= 0):
        raise InvalidArgumentError("planted APS yields zero power on some beam")
    mean_db = linear_to_dbm(mean_lin)[region]
    nb_db = _neighbor_rsrp(scenario, xy) if scenario.neighbors else np.zeros((len(rows), 0, a.m))

    samples = []
    for n, (cid, t, x, y) in enumerate(rows):
        s_db = mean_db[n] + shadowing_db * rng.standard_normal(a.m)
        s_mask = _apply_mask(rng, s_db, missing.threshold_dbm, missing.p_weak, missing.p_random)
        if not s_mask.any():
            s_mask[int(np.argmax(s_db))] = True
        nbv = nb_db[n] + shadowing_db * rng.standard_normal(nb_db[n].shape)
        n_mask = _apply_mask(rng, nbv, missing.threshold_dbm, missing.neighbor_p_weak,
                             missing.neighbor_p_random)
        samples.append(MRSample(
            timestamp=float(t), call_id=cid, serving_cell_id=scenario.serving_cell_id,
            serving_rsrp=np.where(s_mask, s_db, SENTINEL_DBM), serving_mask=s_mask,
            neighbor_rsrp=np.where(n_mask, nbv, SENTINEL_DBM), neighbor_mask=n_mask,
            true_location=(float(x), float(y)), is_labeled=bool(label_all)))
    return samples


def make_dataset(scenario: Scenario, n_calls=100, samples_per_call=20, speed=1.5,
                 report_period=1.0, shadowing_db=4.0, missing=None, seed=0,
                 n_test_calls=None) -> Dataset:
    """Train samples with codebook A, disjoint test calls with codebook A'."""
    a_train = scenario.radio.matrix(test=False)
    a_test = scenario.radio.matrix(test=True)
    n_test_calls = n_test_calls if n_test_calls is not None else max(1, n_calls // 4)
    ss = np.random.SeedSequence([seed, 0x4D52])
    s_traj, s_test_traj, s_render, s_test_render = (int(c.generate_state(1)[0])
                                                    for c in ss.spawn(4))
    tr = simulate_trajectories(scenario, n_calls, samples_per_call, speed, report_period, s_traj)
    te = simulate_trajectories(scenario, n_test_calls, samples_per_call, speed, report_period,
                               s_test_traj, call_id_base=368615725)
    train = render_samples(scenario, tr, a_train, shadowing_db, missing, s_render)
    test = render_samples(scenario, te, a_test, shadowing_db, missing, s_test_render)
    return Dataset(train, test, a_train, a_test, scenario.digest())


def serving_arrays(samples: Sequence[MRSample]):
    """(Y_dbm, Y_linear, mask) for the serving cell; masked linear entries are 0."""
    y_db = np.array([s.serving_rsrp for s in samples], dtype=float)
    mask = np.array([s.serving_mask for s in samples], dtype=bool)
    y_lin = np.where(mask, dbm_to_linear(y_db), 0.0)
    return y_db, y_lin, mask


def feature_matrix(samples: Sequence[MRSample]):
    return np.array([s.feature_vector() for s in samples], dtype=float)


def true_locations(samples: Sequence[MRSample]):
    if any(s.true_location is None for s in samples):
        raise InvalidArgumentError("some samples have no true location")
    return np.array([s.true_location for s in samples], dtype=float)


# --------------------------------------------------------------------------
# CSV

def _fmt(v):
    return repr(float(v))


def write_csv(samples: Sequence[MRSample], path, m=None, q=None):
    if samples:
        m = samples[0].serving_rsrp.size
        q = samples[0].neighbor_rsrp.shape[0]
    m = 8 if m is None else m
    q = 0 if q is None else q
    header = (["Time", "gNodeBCellID", "CallID"] + [f"S{j + 1}" for j in range(m)]
              + [f"N{i + 1}_{j + 1}" for i in range(q) for j in range(m)]
              + ["X", "Y", "Labeled"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in samples:
            serving = [_fmt(v) if ok else MISSING_TOKEN
                       for v, ok in zip(s.serving_rsrp, s.serving_mask)]
            nb = [_fmt(v) if ok else MISSING_TOKEN
                  for v, ok in zip(s.neighbor_rsrp.ravel(), s.neighbor_mask.ravel())]
            loc = ["", ""] if s.true_location is None else [_fmt(c) for c in s.true_location]
            w.writerow([_fmt(s.timestamp), s.serving_cell_id, s.call_id] + serving + nb
                       + loc + [str(int(s.is_labeled))])


def _parse_beams(tokens, lineno):
    vals, mask = [], []
    for tok in tokens:
        tok = tok.strip()
        if tok in (MISSING_TOKEN, "×", ""):
            vals.append(SENTINEL_DBM)
            mask.append(False)
        else:
            try:
                vals.append(float(tok))
            except ValueError:
                raise ParseError(f"bad RSRP value {tok!r}", lineno) from None
            mask.append(True)
    return np.array(vals), np.array(mask, dtype=bool)


def read_csv(path) -> List[MRSample]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header", 1) from None
        if header[:3] != ["Time", "gNodeBCellID", "CallID"]:
            raise ParseError("header must start with Time,gNodeBCellID,CallID", 1)
        s_cols = [i for i, h in enumerate(header) if h.startswith("S") and h[1:].isdigit()]
        n_cols = [i for i, h in enumerate(header) if h.startswith("N") and "_" in h]
        m = len(s_cols)
        if m == 0:
            raise ParseError("no serving beam columns", 1)
        if len(n_cols) % m:
            raise ParseError("neighbor columns are not a multiple of the beam count", 1)
        q = len(n_cols) // m
        col = {h: i for i, h in enumerate(header)}
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                t = float(row[0])
            except ValueError:
                raise ParseError(f"bad timestamp {row[0]!r}", lineno) from None
            s_val, s_mask = _parse_beams([row[i] for i in s_cols], lineno)
            n_val, n_mask = _parse_beams([row[i] for i in n_cols], lineno)
            loc = None
            if "X" in col and row[col["X"]] != "":
                try:
                    loc = (float(row[col["X"]]), float(row[col["Y"]]))
                except ValueError:
                    raise ParseError("bad location", lineno) from None
            labeled = "Labeled" in col and row[col["Labeled"]].strip() == "1"
            out.append(MRSample(t, row[2], row[1], s_val, s_mask,
                                n_val.reshape(q, m), n_mask.reshape(q, m), loc, labeled))
    return out
