"""Synthetic decoded-CAN trip generator with labeled collision injection.

Stands in for a proprietary fleet corpus so the full pipeline can run end to
end. Dynamics are intentionally simple piecewise-smooth kinematics: a bounded
random-acceleration speed profile drives the dependent features (gear from
speed, brake anti-correlated with throttle, doors closed while moving, engine
speed from vehicle speed, ...). Noise scales are chosen so each continuous
feature's temporal-variation statistic lands well inside one rung of the
default bin ladder.

Collision windows get a deceleration spike whose 2-D acceleration direction
encodes one of 8 impact sectors, plus safety-flag activation. Hard-braking
near-misses are generated in normal traffic so the collision task is not
perfectly separable.

Everything is deterministic given the seed: each trip draws from its own
generator keyed by (seed, vehicle index, trip index), so generation order
does not matter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from canlm.errors import TaskError
from canlm.schema import SignalSchema
from canlm.trips import ERRVAL, MISSING, VALID, TripLog, empty_trip

IMPACT_CLASSES = (
    "front",
    "front_left",
    "front_right",
    "left",
    "right",
    "rear",
    "rear_left",
    "rear_right",
)

# empirical impact-location distribution used for sampling class labels
IMPACT_PROBS = {
    "rear": 0.217,
    "front": 0.186,
    "front_right": 0.153,
    "front_left": 0.138,
    "rear_left": 0.096,
    "rear_right": 0.074,
    "left": 0.070,
    "right": 0.066,
}

# (longitudinal, lateral) acceleration signature per impact sector. Every
# crash decelerates the vehicle, so pure side impacts still carry a negative
# longitudinal component; the sign pattern encodes the sector.
_IMPACT_DIR = {
    "front": (-1.0, 0.0),
    "rear": (0.9, 0.0),
    "left": (-0.75, 1.0),
    "right": (-0.75, -1.0),
    "front_left": (-0.8, 0.8),
    "front_right": (-0.8, -0.8),
    "rear_left": (0.75, 0.8),
    "rear_right": (0.75, -0.8),
}

NO_COLLISION = "none"


@dataclass(frozen=True)
class EventLabel:
    """Label of one window: ``none`` or an impact class."""

    vehicle_id: str
    trip_id: str
    window_start: int  # frame index of the window start within the trip
    kind: str

    @property
    def is_collision(self) -> bool:
        return self.kind != NO_COLLISION

    @property
    def impact_class(self) -> int:
        if not self.is_collision:
            raise TaskError("no impact class on a non-collision label")
        return IMPACT_CLASSES.index(self.kind)


@dataclass(frozen=True)
class GeneratorConfig:
    missing_rate: float = 0.003
    error_rate: float = 0.001
    hard_brake_rate: float = 0.008  # per-frame chance of starting a near-miss braking event


@dataclass(frozen=True)
class InjectionConfig:
    noise: float = 0.7  # additive accel noise on the impact signature (task difficulty knob)
    mild_fraction: float = 0.06  # collisions with magnitudes overlapping hard braking
    severe_lo: float = 8.5
    severe_hi: float = 16.0
    mild_lo: float = 7.0
    mild_hi: float = 8.5


def _required_features(schema: SignalSchema) -> None:
    from canlm.schema import reference_schema

    ref_names = {f.name for f in reference_schema().features}
    have = {f.name for f in schema.features}
    missing = ref_names - have
    if missing:
        raise TaskError(f"generator supports the bundled reference schema; missing features: {sorted(missing)}")


def _ou(rng, n, tau, sigma, x0=0.0):
    """Discrete Ornstein-Uhlenbeck path (mean zero)."""
    x = np.empty(n)
    x[0] = x0
    a = np.exp(-1.0 / tau)
    noise = rng.normal(0.0, sigma, size=n)
    for i in range(1, n):
        x[i] = a * x[i - 1] + noise[i]
    return x


def _hp_noise(rng, n, sigma, hp=0.55):
    """Measurement dither with negative lag-1 autocorrelation.

    Raises the one-step-difference to range ratio relative to white noise,
    which keeps dithered features in the coarse rungs of the bin ladder.
    """
    w = rng.normal(0.0, 1.0, n)
    x = w - hp * np.roll(w, 1)
    x[0] = w[0]
    return sigma * x / np.sqrt(1.0 + hp * hp)


def _state(trip, name, idx):
    trip.enum[name][:] = idx


def _generate_trip(schema: SignalSchema, vehicle_idx: int, trip_idx: int, n: int, seed: int, cfg: GeneratorConfig) -> TripLog:
    rng = np.random.default_rng(np.random.SeedSequence([seed, vehicle_idx, trip_idx]))
    vehicle_id = f"V{vehicle_idx:04d}"
    trip_id = f"T{trip_idx:03d}"
    start_time = float(vehicle_idx) * 1.0e6 + float(trip_idx) * 1.0e4
    trip = empty_trip(schema, vehicle_id, trip_id, start_time, n)

    park0 = int(rng.integers(4, 10))
    park1 = int(rng.integers(3, 8))
    park0 = min(park0, max(2, n // 8))
    park1 = min(park1, max(2, n // 8))
    driving = np.zeros(n, dtype=bool)
    driving[park0 : n - park1] = True

    # --- speed profile: segment targets + bounded random accelerations ---
    targets = np.zeros(n)
    t = park0
    while t < n - park1:
        dur = int(rng.integers(80, 160))
        tgt = float(rng.choice([0.0, 25.0, 45.0, 65.0, 90.0, 115.0], p=[0.10, 0.18, 0.24, 0.22, 0.16, 0.10]))
        targets[t : t + dur] = tgt
        t += dur
    # decelerate to rest before the end-of-trip parked phase
    targets[max(park0, n - park1 - 30) :] = 0.0

    # single forward pass: target following with occasional hard-braking
    # near-misses folded in, so the trajectory never jumps
    v = np.zeros(n)
    hard_brake = np.zeros(n, dtype=bool)
    accel_noise = rng.normal(0.0, 0.08, size=n)
    event_u = rng.random(n)
    drops = rng.uniform(7.5, 11.5, size=n)
    brake_left = 0
    for i in range(park0, n - park1):
        if brake_left > 0:
            v[i] = max(0.0, v[i - 1] - drops[i])
            hard_brake[i] = True
            brake_left -= 1
        elif event_u[i] < cfg.hard_brake_rate and v[i - 1] > 35.0:
            brake_left = int(rng.integers(1, 4))
            v[i] = max(0.0, v[i - 1] - drops[i])
            hard_brake[i] = True
        else:
            a = 0.10 * (targets[i] - v[i - 1]) + accel_noise[i]
            v[i] = max(0.0, v[i - 1] + min(max(a, -5.0), 3.2))
    v = np.clip(v, 0.0, 180.0)

    dv = np.diff(v, prepend=v[0])

    # --- vehicle dynamics ---
    c = trip.cont
    c["speed_kmh"][:] = v
    c["wheel_speed_front_kmh"][:] = np.clip(v + rng.normal(0.0, 9.0, n), 0.0, 250.0)
    c["wheel_speed_rear_kmh"][:] = np.clip(v + rng.normal(0.0, 9.0, n), 0.0, 250.0)

    gear_idx = np.digitize(v, [12.0, 25.0, 45.0, 70.0])
    ratios = np.array([110.0, 74.0, 54.0, 41.0, 32.0])
    rpm = 780.0 + v * ratios[gear_idx] * (1.0 + rng.normal(0.0, 0.01, n)) + rng.normal(0.0, 300.0, n)
    rpm[~driving] = 0.0
    engine_on = driving.copy()
    c["engine_rpm"][:] = np.clip(rpm, 0.0, 7600.0)

    lon = dv / 3.6 + _hp_noise(rng, n, 1.30)
    c["longitudinal_accel_ms2"][:] = np.clip(lon, -19.5, 19.5)

    lat = _ou(rng, n, tau=5.0, sigma=0.55) * (0.25 + v / 140.0) + _hp_noise(rng, n, 1.10)
    lat[~driving] = rng.normal(0.0, 0.02, int((~driving).sum()))
    c["lateral_accel_ms2"][:] = np.clip(lat, -19.5, 19.5)

    vert = _hp_noise(rng, n, 0.9) * (0.7 + v / 400.0)
    c["vertical_accel_ms2"][:] = np.clip(vert, -19.5, 19.5)

    v_ms = np.maximum(v / 3.6, 6.0)
    yaw = 57.3 * c["lateral_accel_ms2"] / v_ms + _hp_noise(rng, n, 7.5)
    c["yaw_rate_dps"][:] = np.clip(yaw, -115.0, 115.0)
    pitch = np.clip(-1.2 * np.diff(lon, prepend=lon[0]), -8.0, 8.0) + _hp_noise(rng, n, 3.2)
    c["pitch_rate_dps"][:] = np.clip(pitch, -58.0, 58.0)
    roll = np.clip(1.2 * np.diff(lat, prepend=lat[0]), -6.0, 6.0) + _hp_noise(rng, n, 2.6)
    c["roll_rate_dps"][:] = np.clip(roll, -58.0, 58.0)

    # --- driver behavior ---
    demand = np.clip((dv + 0.6) / 3.2, 0.0, 1.0)
    throttle = demand * 62.0 + v / 180.0 * 22.0 + _hp_noise(rng, n, 17.0)
    throttle[dv < -0.8] = np.abs(rng.normal(0.0, 1.0, int((dv < -0.8).sum())))
    throttle[~driving] = 0.0
    c["throttle_pct"][:] = np.clip(throttle, 0.0, 100.0)

    braking = (dv < -0.8) & driving
    brake = np.abs(rng.normal(0.0, 0.5, n))
    brake[braking] = np.clip(-dv[braking] * 3.2 + rng.normal(0.0, 18.0, int(braking.sum())), 4.0, 62.0)
    c["brake_pressure_bar"][:] = np.clip(brake, 0.0, 200.0)

    steer = 620.0 * c["lateral_accel_ms2"] / np.maximum(v / 3.6, 5.5) ** 1.5 + _hp_noise(rng, n, 22.0)
    c["steering_angle_deg"][:] = np.clip(steer, -535.0, 535.0)
    c["steering_rate_dps"][:] = np.clip(
        np.diff(c["steering_angle_deg"], prepend=c["steering_angle_deg"][0]) + _hp_noise(rng, n, 18.0),
        -715.0,
        715.0,
    )

    load = 14.0 + 0.62 * c["throttle_pct"] + 8.0 * c["engine_rpm"] / 4000.0 + _hp_noise(rng, n, 12.0)
    load[~engine_on] = 0.0
    c["engine_load_pct"][:] = np.clip(load, 0.0, 100.0)

    # --- safety indicators ---
    has_target = np.zeros(n, dtype=bool)
    state = rng.random() < 0.55
    flips = rng.random(n) < 0.13
    for i in range(n):
        if flips[i]:
            state = not state
        has_target[i] = state and driving[i] and v[i] > 5.0
    dist = np.where(has_target, np.clip(8.0 + v * 0.45 + _hp_noise(rng, n, 32.0), 2.0, 195.0), 198.0)
    c["following_distance_m"][:] = dist
    closing = np.clip(-np.diff(dist, prepend=dist[0]), 0.05, None)
    ttc = np.where(has_target, np.clip(dist / np.maximum(closing, 0.5), 0.0, 58.0), 58.0)
    ttc = ttc + _hp_noise(rng, n, 8.0)
    c["time_to_collision_s"][:] = np.clip(ttc, 0.0, 60.0)

    c["impact_severity_g"][:] = np.clip(np.abs(_hp_noise(rng, n, 1.5)) + 0.2 * np.abs(vert), 0.0, 49.0)

    # --- vehicle state & context ---
    battery = np.where(engine_on, 14.1 + _hp_noise(rng, n, 0.5), 12.5 + rng.normal(0.0, 0.05, n))
    c["battery_voltage_v"][:] = np.clip(battery, 8.5, 15.8)

    ambient_base = float(rng.uniform(16.0, 22.0))
    ambient = ambient_base + _ou(rng, n, tau=60.0, sigma=0.05) + _hp_noise(rng, n, 3.6)
    c["ambient_temp_c"][:] = np.clip(ambient, -39.0, 59.0)

    cool_start = ambient_base + float(rng.uniform(-14.0, 40.0))
    warm = 91.0 - (91.0 - cool_start) * np.exp(-np.arange(n) / 140.0)
    c["coolant_temp_c"][:] = np.clip(warm + _hp_noise(rng, n, 1.4), -39.0, 148.0)

    fuel0 = float(rng.uniform(15.0, 95.0))
    rate = 0.45 + c["engine_rpm"] / 900.0 * (0.5 + 2.1 * c["throttle_pct"] / 100.0) + _hp_noise(rng, n, 2.2)
    rate[~engine_on] = 0.0
    c["fuel_rate_lph"][:] = np.clip(rate, 0.0, 58.0)
    level = fuel0 - np.cumsum(c["fuel_rate_lph"]) / 3600.0 / 55.0 * 100.0 + _hp_noise(rng, n, 5.0)
    c["fuel_level_pct"][:] = np.clip(level, 0.5, 99.5)

    # --- enumerated features ---
    e = trip.enum
    gearP, gearR, gearN, gearD = 0, 1, 2, 3
    gear = np.full(n, gearD, dtype=np.int16)
    gear[~driving] = gearP
    stopped = (v < 0.5) & driving
    gear[stopped & (rng.random(n) < 0.15)] = gearN
    if rng.random() < 0.4 and park0 + 4 < n:  # backing out at trip start
        gear[park0 : park0 + int(rng.integers(2, 5))] = gearR
    e["gear"][:] = gear

    sig = np.zeros(n, dtype=np.int16)  # off/left/right
    burst = np.abs(c["lateral_accel_ms2"]) > 1.3
    direction = np.where(c["lateral_accel_ms2"] > 0, 1, 2)
    for i in np.flatnonzero(burst):
        lo = max(0, i - 2)
        sig[lo : i + 1] = direction[i]
    e["turn_signal"][:] = sig

    cruise = np.zeros(n, dtype=np.int16)
    cruise[(targets >= 85.0) & (np.abs(v - targets) < 6.0) & driving] = 2
    edges = np.flatnonzero(np.diff(cruise.astype(np.int8)) != 0)
    cruise[np.clip(edges, 0, n - 1)] = 1  # standby at engage/disengage edges
    e["cruise_control"][:] = cruise

    weather = int(rng.choice([0, 1, 2], p=[0.70, 0.18, 0.12]))
    wiper = np.zeros(n, dtype=np.int16)
    if weather:
        base = 1 if weather == 1 else 2
        wiper[:] = base
        for s in range(0, n, 45):
            if rng.random() < 0.4:
                wiper[s : s + 45] = min(3, base + int(rng.integers(0, 2)))
    wiper[~driving] = 0
    e["wiper_state"][:] = wiper

    night = rng.random() < 0.35
    head = np.full(n, 2 if night else 1, dtype=np.int16)
    if night:
        for s in range(0, n, 60):
            if rng.random() < 0.25:
                head[s : s + int(rng.integers(8, 30))] = 3
        head[v < 40.0] = 2
    head[~driving] = 0
    e["headlight_state"][:] = head

    horn = np.zeros(n, dtype=np.int16)
    for i in np.flatnonzero(rng.random(n) < 0.0008):
        horn[i : i + int(rng.integers(1, 3))] = 1
    e["horn_active"][:] = horn

    e["accel_pedal_switch"][:] = (c["throttle_pct"] > 2.0).astype(np.int16)
    e["brake_pedal_switch"][:] = (c["brake_pressure_bar"] > 1.5).astype(np.int16)

    warn = np.zeros(n, dtype=np.int16)
    warn[(c["time_to_collision_s"] < 4.5) & has_target] = 1
    warn[(c["time_to_collision_s"] < 2.0) & has_target] = 2
    hb_idx = np.flatnonzero(hard_brake)
    for i in hb_idx:
        if rng.random() < 0.7:
            warn[max(0, i - 1) : i + 1] = np.maximum(warn[max(0, i - 1) : i + 1], 1)
        if rng.random() < 0.35:
            warn[i] = 2
    e["collision_warning"][:] = warn

    e["abs_active"][:] = (hard_brake & (c["brake_pressure_bar"] > 40.0)).astype(np.int16)
    e["traction_control_active"][:] = ((np.abs(c["lateral_accel_ms2"]) > 2.4) & (v < 35.0)).astype(np.int16)
    e["stability_control_active"][:] = (np.abs(c["lateral_accel_ms2"]) > 2.8).astype(np.int16)
    _state(trip, "airbag_deployed", 0)
    e["seatbelt_driver"][:] = 1 if rng.random() < 0.97 else 0
    occupancy = int(rng.choice([1, 2, 3, 4, 5], p=[0.55, 0.25, 0.12, 0.05, 0.03]))
    e["seatbelt_passenger"][:] = 1 if (occupancy >= 2 and rng.random() < 0.9) else 0
    e["occupancy_count"][:] = occupancy

    doors_open = ~driving
    inner = np.zeros(n, dtype=bool)
    inner[: max(0, park0 - 2)] = True
    inner[n - max(1, park1 - 2) :] = True
    e["door_driver"][:] = (doors_open & inner).astype(np.int16)
    e["door_passenger"][:] = (doors_open & inner & (occupancy >= 2)).astype(np.int16)
    e["parking_brake"][:] = (~driving).astype(np.int16)

    # --- sentinel injection: missing / error markers ---
    for name, flags in trip.flags.items():
        u = rng.random(n)
        flags[u < cfg.error_rate] = ERRVAL
        flags[(u >= cfg.error_rate) & (u < cfg.error_rate + cfg.missing_rate)] = MISSING

    return trip


def generate_corpus(
    schema: SignalSchema,
    n_vehicles: int,
    trips_per_vehicle: int,
    trip_length_s: int,
    seed: int,
    config: GeneratorConfig = GeneratorConfig(),
) -> list[TripLog]:
    """Generate ``n_vehicles x trips_per_vehicle`` trips, deterministic in ``seed``."""
    if n_vehicles <= 0 or trips_per_vehicle <= 0 or trip_length_s <= 0:
        raise TaskError("generator counts must be positive")
    _required_features(schema)
    n = int(trip_length_s * schema.frame_rate_hz)
    if n < 2:
        raise TaskError("trip_length_s too short for the schema frame rate")
    return [
        _generate_trip(schema, vi, ti, n, seed, config)
        for vi in range(n_vehicles)
        for ti in range(trips_per_vehicle)
    ]


def inject_collisions(
    corpus: list[TripLog],
    schema: SignalSchema,
    rate: float,
    seed: int,
    config: InjectionConfig = InjectionConfig(),
) -> tuple[list[TripLog], list[EventLabel]]:
    """Overlay collision signatures on a fraction of windows; label every window.

    Returns the modified corpus (trips are mutated copies of the originals at
    the array level; the input list itself is not reordered) and one label per
    full window. Impact classes are drawn from the empirical distribution in
    ``IMPACT_PROBS``.
    """
    if not 0 <= rate < 1:
        raise TaskError("collision rate must lie in [0, 1)")
    _required_features(schema)
    w = schema.frames_per_window
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0111]))

    index = []  # (trip position in corpus, window start frame)
    for k, trip in enumerate(corpus):
        for s in range(0, trip.n_frames - w + 1, w):
            index.append((k, s))
    n_pos = int(round(rate * len(index)))
    chosen = set()
    if n_pos:
        picks = rng.choice(len(index), size=n_pos, replace=False)
        chosen = {int(p) for p in picks}

    classes = list(IMPACT_PROBS)
    probs = np.array([IMPACT_PROBS[c] for c in classes])
    probs = probs / probs.sum()

    labels: list[EventLabel] = []
    for pos, (k, s) in enumerate(index):
        trip = corpus[k]
        if pos not in chosen:
            labels.append(EventLabel(trip.vehicle_id, trip.trip_id, s, NO_COLLISION))
            continue
        cls = str(rng.choice(classes, p=probs))
        _apply_impact(trip, schema, s, w, cls, rng, config)
        labels.append(EventLabel(trip.vehicle_id, trip.trip_id, s, cls))
    return corpus, labels


def _apply_impact(trip: TripLog, schema: SignalSchema, start: int, w: int, cls: str, rng, cfg: InjectionConfig) -> None:
    c, e = trip.cont, trip.enum
    t0 = start + int(rng.integers(3, min(8, w - 2)))
    end = start + w
    mild = rng.random() < cfg.mild_fraction
    mag = float(rng.uniform(cfg.mild_lo, cfg.mild_hi) if mild else rng.uniform(cfg.severe_lo, cfg.severe_hi))
    dlon, dlat = _IMPACT_DIR[cls]
    weights = (1.0, 0.45, 0.15)

    v0 = c["speed_kmh"][max(t0 - 1, start)]
    for j, wt in enumerate(weights):
        t = t0 + j
        if t >= end:
            break
        c["longitudinal_accel_ms2"][t] = np.clip(mag * dlon * wt + rng.normal(0.0, cfg.noise), -19.5, 19.5)
        c["lateral_accel_ms2"][t] = np.clip(mag * dlat * wt + rng.normal(0.0, cfg.noise), -19.5, 19.5)
        c["impact_severity_g"][t] = np.clip(mag * wt * 1.8 + rng.normal(0.0, 1.0), 0.5, 49.0)
        c["brake_pressure_bar"][t] = np.clip(rng.uniform(52.0, 62.0), 0.0, 200.0)
        e["brake_pedal_switch"][t] = 1
        e["abs_active"][t] = 1
        e["stability_control_active"][t] = 1
        for name in ("longitudinal_accel_ms2", "lateral_accel_ms2", "impact_severity_g", "brake_pressure_bar"):
            trip.flags[name][t] = VALID
    # vehicle comes to rest within the window
    for t in range(t0, end):
        frac = max(0.0, 1.0 - 0.45 * (t - t0 + 1))
        c["speed_kmh"][t] = v0 * frac
        c["wheel_speed_front_kmh"][t] = c["speed_kmh"][t] * (1.0 + rng.normal(0.0, 0.02))
        c["wheel_speed_rear_kmh"][t] = c["speed_kmh"][t] * (1.0 + rng.normal(0.0, 0.02))
    if t0 - 1 >= start and rng.random() < 0.75:
        e["collision_warning"][t0 - 1] = 2
    e["collision_warning"][t0] = 2
    if not mild or rng.random() < 0.3:
        e["airbag_deployed"][t0:end] = 1


def rebalance(labels: list[EventLabel], ratio: float, seed: int) -> list[EventLabel]:
    """Subsample negatives to ``ratio`` negatives per positive (positives all kept)."""
    positives = [l for l in labels if l.is_collision]
    negatives = [l for l in labels if not l.is_collision]
    if not positives or not negatives:
        raise TaskError("rebalance needs at least one positive and one negative")
    n_keep = int(round(ratio * len(positives)))
    if n_keep > len(negatives):
        achievable = len(negatives) / len(positives)
        raise TaskError(
            f"ratio {ratio}:1 unattainable with {len(negatives)} negatives for "
            f"{len(positives)} positives (achievable {achievable:.1f}:1)"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA1A]))
    negatives.sort(key=lambda l: (l.vehicle_id, l.trip_id, l.window_start))
    picks = rng.choice(len(negatives), size=n_keep, replace=False)
    kept = [negatives[i] for i in np.sort(picks)]
    out = positives + kept
    out.sort(key=lambda l: (l.vehicle_id, l.trip_id, l.window_start))
    return out


# ---------------------------------------------------------------------------
# Labels file: one window reference per line
# ---------------------------------------------------------------------------


def write_labels(labels: list[EventLabel], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("vehicle_id,trip_id,window_start,label\n")
        for l in labels:
            f.write(f"{l.vehicle_id},{l.trip_id},{l.window_start},{l.kind}\n")


def read_labels(path) -> list[EventLabel]:
    labels = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "vehicle_id,trip_id,window_start,label":
            raise TaskError(f"{path}: not a labels file")
        for line in f:
            vehicle, trip, start, kind = line.strip().split(",")
            if kind != NO_COLLISION and kind not in IMPACT_CLASSES:
                raise TaskError(f"{path}: unknown label {kind!r}")
            labels.append(EventLabel(vehicle, trip, int(start), kind))
    return labels


def peak_deceleration(trip: TripLog, start: int, w: int) -> float:
    """Largest longitudinal deceleration magnitude over a window (valid cells)."""
    sl = slice(start, start + w)
    vals = trip.cont["longitudinal_accel_ms2"][sl]
    ok = trip.flags["longitudinal_accel_ms2"][sl] == VALID
    if not ok.any():
        return 0.0
    return float(np.max(np.abs(vals[ok])))


def single_feature_oracle_f1(corpus: list[TripLog], schema: SignalSchema, labels: list[EventLabel]) -> float:
    """Best F1 of a threshold classifier on per-window peak |deceleration|.

    Used to verify the injected tasks are learnable at all before any model
    sees them.
    """
    by_key = {t.key: t for t in corpus}
    w = schema.frames_per_window
    score = np.array([peak_deceleration(by_key[(l.vehicle_id, l.trip_id)], l.window_start, w) for l in labels])
    y = np.array([l.is_collision for l in labels], dtype=bool)
    order = np.argsort(-score)
    ys = y[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(~ys)
    fn = y.sum() - tp
    f1 = 2 * tp / np.maximum(2 * tp + fp + fn, 1)
    return float(f1.max())
