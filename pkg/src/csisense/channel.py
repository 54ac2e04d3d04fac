"""Clustered geometric channel synthesis for multistatic indoor links.

Single-bounce stochastic channel: cluster-center departure angles drawn over
the angular span the room subtends from the transmitter, per-ray Laplacian
offsets, every departure snapped to the scatter grid so each non-LOS ray
bounces exactly once at a grid point.  A passive disk target perturbs the
ray population by zeroing every ray whose tx->scatter or scatter->rx segment
crosses the disk, and adds target-scattered rays.

Angle conventions: transmitter local frame equals the global frame (omni tx).
A receiver-local angle is the global bearing minus the receiver boresight.
Arrival angles are the direction of propagation, i.e. the global bearing of
(receiver - source point) rotated into the receiver frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import IO, Sequence

import numpy as np

from .errors import ConfigError, EmptyGrid, InvalidPitch, ViewpointInsideTarget
from .geometry import Point2D, Target, segment_blocked, wrap_angle

# Table-style 7-beam sweep spanning [-pi/2, pi/2].
DEFAULT_BEAM_ANGLES = (
    -math.pi / 2,
    -math.pi / 3,
    -math.pi / 6,
    0.0,
    math.pi / 6,
    math.pi / 3,
    math.pi / 2,
)


@dataclass(frozen=True)
class Receiver:
    """Wall-mounted uniform linear array."""

    position: Point2D
    boresight: float
    n_antennas: int = 8

    def __post_init__(self):
        if self.n_antennas < 1:
            raise ConfigError(f"receiver needs >= 1 antenna, got {self.n_antennas}")
        object.__setattr__(self, "boresight", wrap_angle(self.boresight))

    def local_angle(self, global_bearing: float) -> float:
        return wrap_angle(global_bearing - self.boresight)


@dataclass(frozen=True)
class Scenario:
    """Room, device placement and channel-model constants for one deployment."""

    name: str
    tx: Point2D
    receivers: tuple[Receiver, ...]
    room_side: float = 5.0
    beam_angles: tuple[float, ...] = DEFAULT_BEAM_ANGLES
    n_clusters: int = 3
    n_rays: int = 5
    n_scatter: int = 1
    cluster_spread_deg: float = 5.0
    grid_pitch: float = 0.25
    include_los: bool = True
    los_gain: float = 1.0
    scatter_coeff: float = 1.0
    snr_db: float = 20.0
    env_seed: int = 0
    tx_omni: bool = True
    narrowband: bool = True

    def __post_init__(self):
        object.__setattr__(self, "receivers", tuple(self.receivers))
        object.__setattr__(self, "beam_angles", tuple(float(b) for b in self.beam_angles))
        if self.room_side <= 0:
            raise ConfigError(f"room side must be > 0, got {self.room_side}")
        if not self.receivers:
            raise ConfigError("scenario needs at least one receiver")
        counts = {rx.n_antennas for rx in self.receivers}
        if len(counts) != 1:
            raise ConfigError(f"receivers must share an antenna count, got {sorted(counts)}")
        if self.grid_pitch <= 0:
            raise InvalidPitch(f"grid pitch must be > 0, got {self.grid_pitch}")
        if self.n_clusters < 1 or self.n_rays < 1 or self.n_scatter < 0:
            raise ConfigError("need n_clusters >= 1, n_rays >= 1, n_scatter >= 0")
        if list(self.beam_angles) != sorted(self.beam_angles):
            raise ConfigError("beam angles must be sorted ascending")
        lim = math.pi / 2 + 1e-12
        if any(abs(b) > lim for b in self.beam_angles):
            raise ConfigError("beam angles must lie in [-pi/2, pi/2]")
        for p in [self.tx] + [rx.position for rx in self.receivers]:
            if not (0 <= p.x <= self.room_side and 0 <= p.y <= self.room_side):
                raise ConfigError(f"device at ({p.x}, {p.y}) outside room")

    @property
    def n_links(self) -> int:
        return len(self.receivers)

    @property
    def n_antennas(self) -> int:
        return self.receivers[0].n_antennas

    @property
    def n_beams(self) -> int:
        return len(self.beam_angles)

    @property
    def noise_level(self) -> float:
        """Per-element complex noise variance relative to unit mean path power."""
        if math.isinf(self.snr_db):
            return 0.0
        return 10.0 ** (-self.snr_db / 10.0)

    def device_positions(self) -> list[Point2D]:
        return [self.tx] + [rx.position for rx in self.receivers]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "room_side": self.room_side,
            "tx": [self.tx.x, self.tx.y],
            "receivers": [
                {
                    "position": [rx.position.x, rx.position.y],
                    "boresight": rx.boresight,
                    "n_antennas": rx.n_antennas,
                }
                for rx in self.receivers
            ],
            "beam_angles": list(self.beam_angles),
            "n_clusters": self.n_clusters,
            "n_rays": self.n_rays,
            "n_scatter": self.n_scatter,
            "cluster_spread_deg": self.cluster_spread_deg,
            "grid_pitch": self.grid_pitch,
            "include_los": self.include_los,
            "los_gain": self.los_gain,
            "scatter_coeff": self.scatter_coeff,
            "snr_db": self.snr_db,
            "env_seed": self.env_seed,
            "tx_omni": self.tx_omni,
            "narrowband": self.narrowband,
        }

    @staticmethod
    def from_dict(cfg: dict) -> "Scenario":
        known = {
            "name", "room_side", "tx", "receivers", "beam_angles", "n_clusters",
            "n_rays", "n_scatter", "cluster_spread_deg", "grid_pitch", "include_los",
            "los_gain", "scatter_coeff", "snr_db", "env_seed", "tx_omni", "narrowband",
        }
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        missing = {"name", "tx", "receivers"} - set(cfg)
        if missing:
            raise ConfigError(f"scenario config missing keys: {sorted(missing)}")
        try:
            receivers = tuple(
                Receiver(
                    position=Point2D(*[float(v) for v in r["position"]]),
                    boresight=float(r["boresight"]),
                    n_antennas=int(r.get("n_antennas", 8)),
                )
                for r in cfg["receivers"]
            )
            extra = {
                k: cfg[k]
                for k in known - {"name", "tx", "receivers", "beam_angles"}
                if k in cfg
            }
            kwargs = dict(extra)
            if "beam_angles" in cfg:
                kwargs["beam_angles"] = tuple(float(b) for b in cfg["beam_angles"])
            return Scenario(
                name=str(cfg["name"]),
                tx=Point2D(*[float(v) for v in cfg["tx"]]),
                receivers=receivers,
                **kwargs,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed scenario config: {exc}") from exc


@dataclass(frozen=True)
class Ray:
    """One propagation path of a link.

    For the direct path (`is_los`) the scatter field holds the receiver
    position and the cluster/ray indices are -1.
    """

    link: int
    cluster: int
    ray: int
    gain: complex
    aod: float
    aoa: float
    scatter: Point2D
    is_los: bool = False


@dataclass(frozen=True)
class ScatterRay:
    """Target-scattered path appended under the alternate hypothesis."""

    gain: complex
    aoa: float
    aod: float


@dataclass
class RaySet:
    """Per-link ray populations plus the cluster configuration that built them."""

    links: list[list[Ray]]
    n_clusters: int
    n_rays: int

    @property
    def n_links(self) -> int:
        return len(self.links)


def array_response(theta: float, n_antennas: int) -> np.ndarray:
    """ULA response at half-wavelength spacing: element k is exp(j*pi*k*sin(theta))."""
    if n_antennas < 1:
        raise ConfigError(f"need >= 1 antenna, got {n_antennas}")
    k = np.arange(n_antennas)
    return np.exp(1j * np.pi * k * math.sin(theta))


def beam_gain(aoa: float | np.ndarray, beam_angle: float, n_antennas: int) -> float | np.ndarray:
    """Conjugate-beamformer amplitude gain |a(beam)^H a(aoa)| / N, in [0, 1]."""
    a_beam = array_response(beam_angle, n_antennas)
    sin_aoa = np.sin(np.asarray(aoa, dtype=float))
    phases = np.pi * np.outer(np.arange(n_antennas), sin_aoa)
    dots = a_beam.conj() @ np.exp(1j * phases)
    g = np.abs(dots) / n_antennas
    return float(g[0]) if np.isscalar(aoa) else g


@lru_cache(maxsize=32)
def _grid_points(room_side: float, pitch: float) -> np.ndarray:
    """Cell centers of the scatter grid as an (n*n, 2) array."""
    n = int(math.floor(room_side / pitch + 1e-9))
    if n < 1:
        raise EmptyGrid(f"pitch {pitch} m leaves no grid cell in a {room_side} m room")
    coords = (np.arange(n) + 0.5) * pitch
    xx, yy = np.meshgrid(coords, coords, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    pts.setflags(write=False)  # cached and shared between callers
    return pts


def room_angular_span(tx: Point2D, room_side: float) -> tuple[float, float]:
    """(start, width) of the direction set from tx into the room.

    Full circle for an interior transmitter; for a wall-mounted one, the
    minimal arc covering the bearings to the room corners.
    """
    eps = 1e-12
    if eps < tx.x < room_side - eps and eps < tx.y < room_side - eps:
        return (-math.pi, 2.0 * math.pi)
    corners = [
        Point2D(0.0, 0.0),
        Point2D(room_side, 0.0),
        Point2D(room_side, room_side),
        Point2D(0.0, room_side),
    ]
    bearings = sorted(
        tx.bearing_to(c) for c in corners if tx.distance_to(c) > eps
    )
    gaps = [
        (bearings[(i + 1) % len(bearings)] - bearings[i]) % (2.0 * math.pi)
        for i in range(len(bearings))
    ]
    widest = int(np.argmax(gaps))
    start = bearings[(widest + 1) % len(bearings)]
    return (start, 2.0 * math.pi - gaps[widest])


def _angle_in_span(angle: float, span: tuple[float, float]) -> bool:
    start, width = span
    return (angle - start) % (2.0 * math.pi) <= width + 1e-12


def quantize_ray(
    tx: Point2D,
    raw_aod: float,
    rx: Receiver,
    grid_pitch: float,
    room_side: float,
) -> tuple[float, float, Point2D]:
    """Snap a raw departure angle to the scatter grid.

    Picks the in-room grid point whose bearing from the transmitter is
    closest to `raw_aod` (ties toward the nearer point), then returns the
    exact departure angle, the receiver-local arrival angle of the bounce,
    and the scatter point itself.
    """
    pts = _grid_points(room_side, grid_pitch)
    dx = pts[:, 0] - tx.x
    dy = pts[:, 1] - tx.y
    dist = np.hypot(dx, dy)
    usable = dist > 1e-12
    if not np.any(usable):
        raise EmptyGrid("no grid point distinct from the transmitter")
    angles = np.arctan2(dy[usable], dx[usable])
    ang_d = np.abs((angles - raw_aod + math.pi) % (2.0 * math.pi) - math.pi)
    best = ang_d.min()
    tied = np.flatnonzero(ang_d == best)
    choice = tied[np.argmin(dist[usable][tied])]
    idx = np.flatnonzero(usable)[choice]
    scatter = Point2D(float(pts[idx, 0]), float(pts[idx, 1]))
    aod = tx.bearing_to(scatter)
    aoa = rx.local_angle(scatter.bearing_to(rx.position))
    return aod, aoa, scatter


@lru_cache(maxsize=64)
def link_geometry(scenario: Scenario) -> tuple[tuple[tuple[float, float, Point2D], ...], ...]:
    """Fixed single-bounce geometry of every link: (aod, aoa, scatter) per ray.

    Cluster centers and per-ray offsets describe the deployment's reflective
    environment, so they derive from the scenario's env_seed (one independent
    stream per link index: a scenario that drops receivers keeps the same
    environment on the remaining links).  Per-realization randomness lives in
    the ray gains drawn by draw_null_rays.
    """
    span = room_angular_span(scenario.tx, scenario.room_side)
    pts = _grid_points(scenario.room_side, scenario.grid_pitch)
    bearings = np.arctan2(pts[:, 1] - scenario.tx.y, pts[:, 0] - scenario.tx.x)
    if not any(_angle_in_span(float(b), span) for b in bearings):
        raise EmptyGrid("no grid point inside the transmitter's angular span")
    spread = math.radians(scenario.cluster_spread_deg)
    out = []
    for l, rx in enumerate(scenario.receivers):
        rng = np.random.default_rng(np.random.SeedSequence([scenario.env_seed, l]))
        centers = span[0] + rng.uniform(0.0, span[1], size=scenario.n_clusters)
        offsets = rng.laplace(0.0, spread, size=(scenario.n_clusters, scenario.n_rays))
        link = []
        for v in range(scenario.n_clusters):
            for u in range(scenario.n_rays):
                raw = wrap_angle(centers[v] + offsets[v, u])
                link.append(
                    quantize_ray(scenario.tx, raw, rx, scenario.grid_pitch,
                                 scenario.room_side)
                )
        out.append(tuple(link))
    return tuple(out)


def draw_null_rays(scenario: Scenario, seed) -> RaySet:
    """Draw one realization of the ray population for every link.

    Ray directions come from the scenario's fixed single-bounce geometry;
    gains are circularly-symmetric complex Gaussian with one-based
    exponential inter-cluster decay exp(-v), normalized so the total mean
    path power per link is one.  The deterministic direct path (amplitude
    los_gain/distance, zero phase) is appended last when enabled.
    """
    rng = np.random.default_rng(seed)
    geometry = link_geometry(scenario)
    n_cl, n_ray = scenario.n_clusters, scenario.n_rays
    weights = np.exp(-np.arange(1, n_cl + 1, dtype=float))
    ray_var = weights / (n_ray * weights.sum())

    links: list[list[Ray]] = []
    for l, rx in enumerate(scenario.receivers):
        z = rng.standard_normal(size=(n_cl, n_ray, 2))
        rays: list[Ray] = []
        for v in range(n_cl):
            sd = math.sqrt(ray_var[v] / 2.0)
            for u in range(n_ray):
                aod, aoa, scatter = geometry[l][v * n_ray + u]
                gain = complex(sd * z[v, u, 0], sd * z[v, u, 1])
                rays.append(
                    Ray(link=l, cluster=v + 1, ray=u + 1, gain=gain,
                        aod=aod, aoa=aoa, scatter=scatter)
                )
        if scenario.include_los:
            d = scenario.tx.distance_to(rx.position)
            rays.append(
                Ray(
                    link=l, cluster=-1, ray=-1, gain=complex(scenario.los_gain / d, 0.0),
                    aod=scenario.tx.bearing_to(rx.position),
                    aoa=rx.local_angle(scenario.tx.bearing_to(rx.position)),
                    scatter=rx.position, is_los=True,
                )
            )
        links.append(rays)
    return RaySet(links=links, n_clusters=n_cl, n_rays=n_ray)


def _validate_target(scenario: Scenario, target: Target) -> None:
    s = scenario.room_side
    c = target.center
    if not (0.0 < c.x < s and 0.0 < c.y < s):
        raise ViewpointInsideTarget(f"target center ({c.x}, {c.y}) not strictly inside room")
    for p in scenario.device_positions():
        if target.contains(p):
            raise ViewpointInsideTarget(
                f"device at ({p.x}, {p.y}) inside target disk of radius {target.radius}"
            )


def apply_target(
    rays: RaySet,
    target: Target,
    scenario: Scenario,
    seed,
) -> tuple[RaySet, list[list[ScatterRay]]]:
    """Perturb a null-hypothesis ray population with a disk target.

    Zeroes every ray whose tx->scatter or scatter->rx segment crosses the
    disk (direct path: tx->rx segment), then appends target-scattered rays
    with amplitude scatter_coeff * radius / (d_tx * d_rx) and uniform phase.
    """
    _validate_target(scenario, target)
    rng = np.random.default_rng(seed)
    tx = scenario.tx
    out_links: list[list[Ray]] = []
    scatters: list[list[ScatterRay]] = []
    for l, rx in enumerate(scenario.receivers):
        link_rays = []
        for r in rays.links[l]:
            if r.is_los:
                blocked = segment_blocked(tx, rx.position, target)
            else:
                blocked = segment_blocked(tx, r.scatter, target) or segment_blocked(
                    r.scatter, rx.position, target
                )
            link_rays.append(replace(r, gain=0j) if blocked else r)
        out_links.append(link_rays)

        d_tx = tx.distance_to(target.center)
        d_rx = target.center.distance_to(rx.position)
        mag = scenario.scatter_coeff * target.radius / (d_tx * d_rx)
        aod = tx.bearing_to(target.center)
        aoa = rx.local_angle(target.center.bearing_to(rx.position))
        phases = rng.uniform(0.0, 2.0 * math.pi, size=scenario.n_scatter)
        scatters.append(
            [ScatterRay(gain=mag * complex(math.cos(p), math.sin(p)), aoa=aoa, aod=aod)
             for p in phases]
        )
    return RaySet(links=out_links, n_clusters=rays.n_clusters, n_rays=rays.n_rays), scatters


def beam_csi(
    rays: Sequence[Ray],
    scatter_rays: Sequence[ScatterRay],
    beam_angle: float,
    n_antennas: int,
    noise_level: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """CSI vector captured by one receive beam for one link.

    Each surviving path contributes gain * B(aoa; beam) * a(aoa) with B the
    conjugate-beamformer amplitude gain; noise is i.i.d. circular complex
    Gaussian with per-element variance `noise_level`.
    """
    h = np.zeros(n_antennas, dtype=complex)
    aoas = [r.aoa for r in rays] + [s.aoa for s in scatter_rays]
    gains = [r.gain for r in rays] + [s.gain for s in scatter_rays]
    if aoas:
        aoas_arr = np.asarray(aoas, dtype=float)
        gains_arr = np.asarray(gains, dtype=complex)
        steer = np.exp(1j * np.pi * np.outer(np.arange(n_antennas), np.sin(aoas_arr)))
        b = beam_gain(aoas_arr, beam_angle, n_antennas)
        h = steer @ (gains_arr * b)
    if noise_level > 0.0:
        if rng is None:
            raise ConfigError("noise_level > 0 requires an rng")
        z = rng.standard_normal(size=(2, n_antennas))
        h = h + math.sqrt(noise_level / 2.0) * (z[0] + 1j * z[1])
    return h


def sweep_csi(
    scenario: Scenario,
    rays: RaySet,
    scatter_rays: Sequence[Sequence[ScatterRay]] | None = None,
    rng: np.random.Generator | None = None,
    noise_level: float | None = None,
) -> list[list[np.ndarray]]:
    """Per-link, per-beam CSI vectors for one coherent capture.

    Noise is drawn link-major then beam-major from `rng`; pass noise_level=0
    for a noiseless capture.
    """
    nl = scenario.noise_level if noise_level is None else noise_level
    scat = scatter_rays if scatter_rays is not None else [[] for _ in rays.links]
    out = []
    for l in range(scenario.n_links):
        out.append(
            [
                beam_csi(rays.links[l], scat[l], beam, scenario.n_antennas, nl, rng)
                for beam in scenario.beam_angles
            ]
        )
    return out


def write_ray_dump(fp: IO[str], rays: RaySet) -> None:
    """Debug CSV: one row per ray; blocked-flag marks zeroed gains."""
    fp.write("link,cluster,ray,re_beta,im_beta,aod,aoa,sx,sy,blocked\n")
    for link_rays in rays.links:
        for r in link_rays:
            blocked = 1 if r.gain == 0 else 0
            fp.write(
                f"{r.link},{r.cluster},{r.ray},{r.gain.real!r},{r.gain.imag!r},"
                f"{r.aod!r},{r.aoa!r},{r.scatter.x!r},{r.scatter.y!r},{blocked}\n"
            )
