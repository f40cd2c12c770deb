"""Synthetic corridor counts and the flow statistics used to calibrate them.

The generator builds a corridor of signalized intersections. Each has four
approaches with left/through/right movements. The northbound and southbound
throughs are the corridor movements; everything else is a turning stream
whose volume is a noisy fraction of the corridor flow entering that
intersection.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter

from .dataio import CorridorTopology, MovementTable

log = logging.getLogger(__name__)

APPROACHES = ("NB", "SB", "EB", "WB")
TURNS = ("L", "T", "R")
CORRIDOR_APPROACHES = ("NB", "SB")

# mean share of the entering corridor flow taken by each turning movement
DEFAULT_TURN_RATIOS = {
    "NB:L": 0.153, "NB:R": 0.135,
    "SB:L": 0.153, "SB:R": 0.135,
    "EB:L": 0.090, "EB:T": 0.099, "EB:R": 0.081,
    "WB:L": 0.090, "WB:T": 0.099, "WB:R": 0.081,
}


@dataclass(frozen=True)
class SynthConfig:
    n_intersections: int = 6
    days: int = 180
    start: str = "2025-01-06T00:00"
    seed: int = 0
    # movements that cannot occur, as "<approach>:<turn>" per intersection number
    zero_movements: tuple[str, ...] = (
        "I2:WB:L", "I2:WB:T", "I2:WB:R",
        "I5:EB:L", "I5:EB:T", "I5:EB:R",
    )
    # diurnal profile, vehicles per 15 min on a corridor through movement
    peak_volume: float = 110.0
    off_peak_floor: float = 0.04
    midday_level: float = 0.45
    am_peak_hour: float = 7.75
    pm_peak_hour: float = 17.25
    peak_width_hours: float = 1.4
    am_amplitude: tuple[float, float] = (1.0, 0.7)  # NB, SB
    pm_amplitude: tuple[float, float] = (0.7, 1.0)
    direction_factor: tuple[float, float] = (1.0, 0.92)
    weekend_factor: float = 0.75
    # corridor noise: log-space AR(1) per direction shared along the corridor,
    # plus an independent per-intersection component
    corridor_noise: float = 0.18
    corridor_noise_rho: float = 0.9
    local_corridor_noise: float = 0.08
    day_noise: float = 0.08
    # turning streams
    turn_ratios: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TURN_RATIOS))
    turn_ratio_spread: float = 0.35
    turn_noise: float = 0.68
    turn_noise_rho: float = 0.5
    local_demand: float = 0.5

    def validate(self) -> None:
        if self.n_intersections < 1:
            raise ValueError("n_intersections must be >= 1")
        if self.days < 1:
            raise ValueError("days must be >= 1")
        for name in ("corridor_noise", "local_corridor_noise", "day_noise", "turn_noise",
                     "turn_ratio_spread", "local_demand", "peak_volume"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("corridor_noise_rho", "turn_noise_rho"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        for z in self.zero_movements:
            parts = z.split(":")
            if len(parts) != 3 or parts[1] in CORRIDOR_APPROACHES and parts[2] == "T":
                raise ValueError(f"bad zero movement {z!r}; corridor throughs cannot be zero")
        unknown = set(self.turn_ratios) - set(DEFAULT_TURN_RATIOS)
        if unknown:
            raise ValueError(f"unknown turning movements in turn_ratios: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zero_movements"] = list(self.zero_movements)
        d["am_amplitude"] = list(self.am_amplitude)
        d["pm_amplitude"] = list(self.pm_amplitude)
        d["direction_factor"] = list(self.direction_factor)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("zero_movements", "am_amplitude", "pm_amplitude", "direction_factor"):
            if key in d:
                d[key] = tuple(d[key])
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown SynthConfig fields: {sorted(extra)}")
        return cls(**d)


def corridor_layout(n_intersections: int, zero_movements=()) -> CorridorTopology:
    """Topology for ``n_intersections`` four-leg intersections, 12 movements each."""
    zero = set(zero_movements)
    ids, corridor, groups, mask = [], [], [], []
    for k in range(1, n_intersections + 1):
        g = []
        for a in APPROACHES:
            for t in TURNS:
                i = len(ids)
                mid = f"I{k}:{a}:{t}"
                ids.append(mid)
                g.append(i)
                mask.append(0.0 if mid in zero else 1.0)
                if a in CORRIDOR_APPROACHES and t == "T":
                    corridor.append(i)
        groups.append(np.array(g, dtype=np.intp))
    mask = np.array(mask)
    return CorridorTopology(
        movement_ids=tuple(ids),
        corridor_idx=np.array(corridor, dtype=np.intp),
        active_idx=np.flatnonzero(mask == 1).astype(np.intp),
        groups=tuple(groups),
        zero_mask=mask,
        group_names=tuple(f"I{k}" for k in range(1, n_intersections + 1)),
    )


def diurnal_profile(cfg: SynthConfig, hours: np.ndarray, direction: int) -> np.ndarray:
    """Relative demand at fractional hour-of-day for one corridor direction."""
    w = cfg.peak_width_hours

    def bump(center):
        d = (hours - center + 12.0) % 24.0 - 12.0
        return np.exp(-0.5 * (d / w) ** 2)

    # daytime plateau between roughly 06:30 and 20:30
    day = 1.0 / (1.0 + np.exp(-(hours - 6.5) * 2.0)) / (1.0 + np.exp((hours - 20.5) * 1.2))
    return (
        cfg.off_peak_floor
        + cfg.midday_level * day
        + cfg.am_amplitude[direction] * bump(cfg.am_peak_hour)
        + cfg.pm_amplitude[direction] * bump(cfg.pm_peak_hour)
    )


def _ar1(rng: np.random.Generator, n: int, rho: float, sigma: float, width: int = 1) -> np.ndarray:
    """Stationary Gaussian AR(1) with marginal std ``sigma``; shape ``(n, width)``."""
    innov = rng.standard_normal((n, width)) * sigma * np.sqrt(1.0 - rho * rho)
    innov[0] = rng.standard_normal(width) * sigma
    return lfilter([1.0], [1.0, -rho], innov, axis=0)


def generate_corridor_data(cfg: SynthConfig | None = None) -> tuple[MovementTable, CorridorTopology]:
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    topo = corridor_layout(cfg.n_intersections, cfg.zero_movements)
    K = cfg.n_intersections
    m = cfg.days * 96
    start = np.datetime64(cfg.start, "m")
    stamps = start + np.arange(m) * np.timedelta64(15, "m")
    tod = np.arange(m) % 96 / 4.0 + 0.125
    day = np.arange(m) // 96
    weekday = (stamps.astype("datetime64[D]").view("int64") + 3) % 7  # 0 = Monday
    weekend = weekday >= 5

    day_level = np.exp(rng.standard_normal(cfg.days) * cfg.day_noise)[day]
    level = np.where(weekend, cfg.weekend_factor, 1.0) * day_level

    counts = np.zeros((m, topo.n_movements))
    col = {mid: i for i, mid in enumerate(topo.movement_ids)}

    # corridor throughs; lognormal terms are mean-one
    entering = np.zeros((m, K, 2))
    for d in range(2):
        prof = diurnal_profile(cfg, tod, d)
        prof = np.where(weekend, 0.6 * prof + 0.4 * prof.mean(), prof)
        shared = _ar1(rng, m, cfg.corridor_noise_rho, cfg.corridor_noise)[:, 0]
        local = rng.standard_normal((m, K)) * cfg.local_corridor_noise
        log_noise = shared[:, None] + local - 0.5 * (cfg.corridor_noise**2 + cfg.local_corridor_noise**2)
        site = 1.0 + 0.15 * np.sin(np.arange(K) + d)  # fixed per-intersection volume differences
        mean_flow = cfg.peak_volume * cfg.direction_factor[d] * site[None, :] * (prof * level)[:, None]
        entering[:, :, d] = mean_flow * np.exp(log_noise)
        flows = np.round(entering[:, :, d])
        for k in range(K):
            counts[:, col[f"I{k + 1}:{CORRIDOR_APPROACHES[d]}:T"]] = flows[:, k]

    # turning streams
    s = cfg.turn_noise
    for k in range(K):
        for key, base in cfg.turn_ratios.items():
            mid = f"I{k + 1}:{key}"
            i = col[mid]
            ratio = base * np.exp(cfg.turn_ratio_spread * rng.standard_normal() - 0.5 * cfg.turn_ratio_spread**2)
            approach = key.split(":")[0]
            if approach in CORRIDOR_APPROACHES:
                feed = entering[:, k, CORRIDOR_APPROACHES.index(approach)]
            else:
                feed = entering[:, k, :].mean(axis=1)
            noise = _ar1(rng, m, cfg.turn_noise_rho, s)[:, 0] - 0.5 * s * s
            lam = ratio * feed * np.exp(noise) + cfg.local_demand * level
            counts[:, i] = rng.poisson(lam)
    counts[:, topo.zero_mask == 0] = 0.0
    return MovementTable(stamps, counts, topo.movement_ids), topo


# -- statistics -----------------------------------------------------------


@dataclass
class FlowStats:
    corridor_volume_share: float
    cv_corridor: float
    cv_turning: float
    mean_corr: float
    mean_r2: float
    total_var: np.ndarray  # per movement, population variance
    expected_cond_var: np.ndarray
    var_cond_mean: np.ndarray
    n_bins: int
    skipped: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "corridor_volume_share": self.corridor_volume_share,
            "cv_corridor": self.cv_corridor,
            "cv_turning": self.cv_turning,
            "mean_corr": self.mean_corr,
            "mean_r2": self.mean_r2,
            "n_bins": self.n_bins,
        }


def equal_count_bins(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin label per element; bins hold equal counts (up to one) by rank."""
    order = np.argsort(values, kind="stable")
    labels = np.empty(values.shape[0], dtype=np.intp)
    labels[order] = np.arange(values.shape[0]) * n_bins // values.shape[0]
    return labels


def variance_decomposition(y: np.ndarray, labels: np.ndarray, n_bins: int):
    """Population-variance split of each column of ``y`` given discrete ``labels``.

    Returns ``(total, mean within-bin variance, variance of bin means)``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n = y.shape[0]
    w = np.bincount(labels, minlength=n_bins).astype(np.float64)
    sums = np.zeros((n_bins, y.shape[1]))
    np.add.at(sums, labels, y)
    nonempty = w > 0
    means = np.zeros_like(sums)
    means[nonempty] = sums[nonempty] / w[nonempty, None]
    grand = y.mean(axis=0)
    resid = y - means[labels]
    within = (resid * resid).sum(axis=0) / n
    between = (w[:, None] * (means - grand) ** 2).sum(axis=0) / n
    total = ((y - grand) ** 2).sum(axis=0) / n
    return total, within, between


def compute_flow_statistics(table: MovementTable, topology: CorridorTopology, n_bins: int = 20) -> FlowStats:
    if len(table) == 0:
        raise ValueError("empty table")
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    y = table.counts
    corridor = topology.corridor_idx
    turning = topology.turning_idx
    yc = y[:, corridor].sum(axis=1)
    total_volume = y.sum()
    share = float(y[:, corridor].sum() / total_volume) if total_volume > 0 else 0.0

    mean = y.mean(axis=0)
    std = y.std(axis=0)

    def class_cv(idx):
        idx = [i for i in idx if mean[i] > 0]
        return float(np.mean(std[idx] / mean[idx])) if idx else float("nan")

    skipped = []
    corrs = []
    yc_c = yc - yc.mean()
    yc_sd = yc.std()
    for i in turning:
        if std[i] == 0 or yc_sd == 0:
            skipped.append(topology.movement_ids[i])
            continue
        corrs.append(float(((y[:, i] - mean[i]) * yc_c).mean() / (std[i] * yc_sd)))
    if skipped:
        warnings.warn(f"zero-variance movements skipped for correlation/R^2: {skipped}", stacklevel=2)
    corrs = np.clip(np.array(corrs), -1.0, 1.0)

    labels = equal_count_bins(yc, n_bins)
    total, within, between = variance_decomposition(y, labels, n_bins)
    return FlowStats(
        corridor_volume_share=share,
        cv_corridor=class_cv(corridor),
        cv_turning=class_cv(turning),
        mean_corr=float(corrs.mean()) if corrs.size else float("nan"),
        # simple regression on one regressor: R^2 is the squared correlation
        mean_r2=float((corrs**2).mean()) if corrs.size else float("nan"),
        total_var=total,
        expected_cond_var=within,
        var_cond_mean=between,
        n_bins=n_bins,
        skipped=skipped,
    )
