"""Synthetic multi-station CSI acquisition.

Generates a smooth pedestrian trajectory and per-station timestamped complex
CSI streams with Poisson frame timing, exponential on/off outages, and a
two-path (LOS + moving scatterer) channel model. Stands in for private
hardware datasets; the learning pipeline only ever sees (station, timestamp,
channel vector) triples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np

from .core import CsiFrame, RandomStream

SPEED_OF_LIGHT = 299792458.0


@dataclass(frozen=True)
class OutageSpec:
    """Exponential on/off process: up durations ~ Exp(mean_gap_s), outage
    durations ~ Exp(mean_len_s). mean_len_s = 0 disables outages."""

    mean_gap_s: float = 60.0
    mean_len_s: float = 5.0


def _default_station_positions(n: int, extent: Tuple[float, float]) -> tuple:
    """Evenly spread stations along the room perimeter."""
    x_max, y_max = extent
    perim = 2 * (x_max + y_max)
    pts = []
    for i in range(n):
        s = (i + 0.5) * perim / n
        if s < x_max:
            pts.append((s, 0.0))
        elif s < x_max + y_max:
            pts.append((x_max, s - x_max))
        elif s < 2 * x_max + y_max:
            pts.append((2 * x_max + y_max - s, y_max))
        else:
            pts.append((0.0, perim - s))
    return tuple(pts)


@dataclass(frozen=True)
class Scenario:
    n_stations: int = 8
    k_raw: int = 64
    # the carrier sits far below real WiFi bands on purpose: interference
    # fringes must vary on a scale coarser than the window-averaged motion
    # blur, or per-frame power normalization plus window averaging erases the
    # position signal and the regression task becomes unlearnable
    carrier_hz: float = 6e7
    bandwidth_hz: float = 4e7
    room_extent: Tuple[float, float] = (3.4, 3.0)
    ap_position: Tuple[float, float] = (1.7, 1.5)
    station_positions: tuple = None
    duration_s: float = 600.0
    mean_rate_hz: float = 20.0
    outage: OutageSpec = field(default_factory=OutageSpec)
    noise_std: float = 0.01
    scatter_coeff: float = 0.6

    def __post_init__(self):
        if self.station_positions is None:
            object.__setattr__(
                self,
                "station_positions",
                _default_station_positions(self.n_stations, self.room_extent),
            )
        if self.duration_s <= 0 or self.mean_rate_hz <= 0:
            raise ValueError("duration_s and mean_rate_hz must be positive")
        if len(self.station_positions) != self.n_stations:
            raise ValueError("station_positions length must equal n_stations")
        for p in self.station_positions + (self.ap_position,):
            if not (0 <= p[0] <= self.room_extent[0] and 0 <= p[1] <= self.room_extent[1]):
                raise ValueError(f"position {p} outside room extent {self.room_extent}")

    def subcarrier_frequencies(self) -> np.ndarray:
        k = np.arange(self.k_raw)
        return self.carrier_hz + (k - (self.k_raw - 1) / 2) * (self.bandwidth_hz / self.k_raw)


@dataclass(frozen=True)
class Trajectory:
    """Smooth back-and-forth walk; position(t) in meters, label(t) = x/x_max."""

    x_max: float
    y_max: float
    duration_s: float
    x_center: float
    x_amps: np.ndarray
    x_periods: np.ndarray
    x_phases: np.ndarray
    y_center: float
    y_amps: np.ndarray
    y_periods: np.ndarray
    y_phases: np.ndarray

    def position(self, t) -> np.ndarray:
        """(…, 2) positions for scalar or vector t."""
        t = np.asarray(t, dtype=float)
        x = self.x_center + sum(
            a * np.sin(2 * np.pi * t / p + ph)
            for a, p, ph in zip(self.x_amps, self.x_periods, self.x_phases)
        )
        y = self.y_center + sum(
            a * np.sin(2 * np.pi * t / p + ph)
            for a, p, ph in zip(self.y_amps, self.y_periods, self.y_phases)
        )
        return np.stack([x, y], axis=-1)

    def label(self, t):
        pos = self.position(t)
        return pos[..., 0] / self.x_max


@dataclass(frozen=True)
class CsiStream:
    station: int
    timestamps: np.ndarray  # strictly increasing, seconds
    values: np.ndarray  # (n_frames, k_raw) complex

    def __len__(self):
        return len(self.timestamps)

    def frames(self) -> List[CsiFrame]:
        return [
            CsiFrame(self.station, float(t), v)
            for t, v in zip(self.timestamps, self.values)
        ]


def gen_trajectory(scenario: Scenario, rng: RandomStream) -> Trajectory:
    """Sum of low-frequency sinusoids with randomized phases/periods, confined
    to the room; the x span is kept well inside [0, x_max] so labels resemble
    the mid-room range of a real walk."""
    x_max, y_max = scenario.room_extent
    g = rng.child("trajectory")
    # dominant slow sweep plus a faster small wobble; amplitudes sum < half-extent
    x_amps = np.array([0.34, 0.06]) * x_max
    x_periods = np.array([g.uniform(35.0, 55.0), g.uniform(11.0, 17.0)])
    x_phases = g.uniform(0, 2 * np.pi, 2)
    y_amps = np.array([0.25, 0.05]) * y_max
    y_periods = np.array([g.uniform(50.0, 80.0), g.uniform(13.0, 19.0)])
    y_phases = g.uniform(0, 2 * np.pi, 2)
    return Trajectory(
        x_max=x_max,
        y_max=y_max,
        duration_s=scenario.duration_s,
        x_center=0.5 * x_max,
        x_amps=x_amps,
        x_periods=x_periods,
        x_phases=x_phases,
        y_center=0.5 * y_max,
        y_amps=y_amps,
        y_periods=y_periods,
        y_phases=y_phases,
    )


def channel_response(
    pos, station: int, scenario: Scenario, scatter_coeff: float = None
) -> np.ndarray:
    """Two-path channel: fixed LOS (AP -> station) plus a single scattered path
    via the pedestrian at `pos`.

    h(k) = a_los * exp(-j 2 pi f_k tau_los) + a_sc * exp(-j 2 pi f_k tau_sc)

    Amplitudes follow inverse-distance path loss; the scattered path is
    attenuated by scenario.scatter_coeff and by the product of its two legs,
    so the envelope varies strongly and smoothly with pedestrian position.
    """
    pos = np.asarray(pos, dtype=float)
    x_max, y_max = scenario.room_extent
    if not (0 <= pos[0] <= x_max and 0 <= pos[1] <= y_max):
        raise ValueError(f"position {pos} outside room extent {scenario.room_extent}")
    if scatter_coeff is None:
        scatter_coeff = scenario.scatter_coeff
    ap = np.asarray(scenario.ap_position)
    st = np.asarray(scenario.station_positions[station])
    d_min = 0.1  # guard against singular path loss at contact
    d_los = max(float(np.linalg.norm(ap - st)), d_min)
    d1 = max(float(np.linalg.norm(ap - pos)), d_min)
    d2 = max(float(np.linalg.norm(pos - st)), d_min)
    a_los = 1.0 / d_los
    a_sc = scatter_coeff / (d1 * d2)
    tau_los = d_los / SPEED_OF_LIGHT
    tau_sc = (d1 + d2) / SPEED_OF_LIGHT
    f = scenario.subcarrier_frequencies()
    return a_los * np.exp(-2j * np.pi * f * tau_los) + a_sc * np.exp(
        -2j * np.pi * f * tau_sc
    )


def _channel_response_batch(positions: np.ndarray, station: int, scenario: Scenario) -> np.ndarray:
    """Vectorized channel_response over (n, 2) positions -> (n, k_raw)."""
    ap = np.asarray(scenario.ap_position)
    st = np.asarray(scenario.station_positions[station])
    d_min = 0.1
    d_los = max(float(np.linalg.norm(ap - st)), d_min)
    d1 = np.maximum(np.linalg.norm(positions - ap, axis=1), d_min)
    d2 = np.maximum(np.linalg.norm(positions - st, axis=1), d_min)
    a_los = 1.0 / d_los
    a_sc = scenario.scatter_coeff / (d1 * d2)
    tau_los = d_los / SPEED_OF_LIGHT
    tau_sc = (d1 + d2) / SPEED_OF_LIGHT
    f = scenario.subcarrier_frequencies()
    los = a_los * np.exp(-2j * np.pi * f * tau_los)
    return los[None, :] + a_sc[:, None] * np.exp(-2j * np.pi * np.outer(tau_sc, f))


def _poisson_arrivals(rate_hz: float, duration_s: float, rng: RandomStream) -> np.ndarray:
    # draw in one chunk with headroom, extend in the unlikely tail case
    n_guess = int(rate_hz * duration_s * 1.2) + 50
    gaps = rng.exponential(1.0 / rate_hz, n_guess)
    t = np.cumsum(gaps)
    while t[-1] < duration_s:
        more = rng.exponential(1.0 / rate_hz, n_guess)
        t = np.concatenate([t, t[-1] + np.cumsum(more)])
    return t[t <= duration_s]


def _outage_intervals(outage: OutageSpec, duration_s: float, rng: RandomStream) -> list:
    """[(start, end)] outage intervals of an alternating on/off renewal
    process starting in the up state."""
    if outage.mean_len_s <= 0:
        return []
    intervals = []
    t = 0.0
    while t < duration_s:
        t += rng.exponential(outage.mean_gap_s)
        if t >= duration_s:
            break
        length = rng.exponential(outage.mean_len_s)
        intervals.append((t, min(t + length, duration_s)))
        t += length
    return intervals


def gen_csi_streams(
    scenario: Scenario, traj: Trajectory, rng: RandomStream
) -> List[CsiStream]:
    """Per station: Poisson frame arrivals thinned by an exponential on/off
    outage process; frame values are the channel response at the pedestrian's
    position plus circular complex Gaussian noise."""
    streams = []
    for d in range(scenario.n_stations):
        g = rng.child(f"station{d}")
        t = _poisson_arrivals(scenario.mean_rate_hz, scenario.duration_s, g.child("arrivals"))
        for start, end in _outage_intervals(scenario.outage, scenario.duration_s, g.child("outage")):
            t = t[(t < start) | (t > end)]
        positions = traj.position(t)
        values = _channel_response_batch(positions, d, scenario)
        if scenario.noise_std > 0:
            s = scenario.noise_std / math.sqrt(2.0)
            gn = g.child("noise")
            noise = gn.normal(0, s, values.shape) + 1j * gn.normal(0, s, values.shape)
            values = values + noise
        streams.append(CsiStream(station=d, timestamps=t, values=values))
    return streams
