"""Dataset storage, variable sets, normalization, solar forcing, and the
synthetic spherical reference climate used for desk-scale experiments.

On-disk layout (format "RSL-DS-1"):
    <dir>/manifest.json      grid, variable names, time axis (6-hourly,
                             proleptic Gregorian), generator provenance
    <dir>/stats.json         per-variable mean/std with the range they cover
    <dir>/constants.bin      (K_c, H, W) float32 little-endian
    <dir>/<var>/<year>.bin   (steps_in_year, H, W) float32 little-endian
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, ShapeError
from .grid import GridSpec, make_grid
from .spectral import SHTPlan, plan_sht, sht_inverse

FORMAT_VERSION = "RSL-DS-1"
STEP = timedelta(hours=6)
STEP_HOURS = 6
SOLAR_CONSTANT = 1361.0       # W/m^2, constant total solar irradiance
STD_FLOOR = 1e-6

PRESSURE_LEVELS_33 = (925, 850, 700, 600, 500, 250)
DEFAULT_EVAL_SUBSET = ("tas", "uas", "vas", "ta850", "zg500")


# ---------------------------------------------------------------- variables

@dataclass(frozen=True)
class VariableSet:
    name: str
    prognostic: tuple[str, ...]
    constants: tuple[str, ...] = ("lsm", "orog", "lat", "lon")
    forcings: tuple[str, ...] = ("tisr",)
    evaluation_subset: tuple[str, ...] = DEFAULT_EVAL_SUBSET

    def __post_init__(self):
        missing = [v for v in self.evaluation_subset if v not in self.prognostic]
        if missing:
            raise ConfigError(
                f"evaluation subset variables {missing} not in prognostic set")

    @property
    def n_prognostic(self) -> int:
        return len(self.prognostic)


def variable_set(name: str, n_prognostic: int | None = None) -> VariableSet:
    """Paper presets 'vars33'/'vars8', or 'custom' with an explicit count."""
    if name == "vars33":
        prog = ["tas", "uas", "vas"]
        for var in ("ta", "zg", "hus", "ua", "va"):
            prog += [f"{var}{p}" for p in PRESSURE_LEVELS_33]
        return VariableSet("vars33", tuple(prog))
    if name == "vars8":
        prog = ("tas", "uas", "vas", "ta850", "zg1000", "zg700", "zg500", "zg300")
        return VariableSet("vars8", prog)
    if name == "custom":
        if not n_prognostic or n_prognostic < 1:
            raise ConfigError("custom variable set needs n_prognostic >= 1")
        # Keep the standard evaluation names when there is room for them.
        if n_prognostic >= 5:
            prog = list(DEFAULT_EVAL_SUBSET)
            prog += [f"v{i:02d}" for i in range(n_prognostic - 5)]
            return VariableSet("custom", tuple(prog))
        prog = tuple(f"v{i:02d}" for i in range(n_prognostic))
        return VariableSet("custom", prog, evaluation_subset=prog)
    raise ConfigError(f"unknown variable set {name!r}")


# ---------------------------------------------------------------- time axis

def parse_date(s: str) -> datetime:
    return datetime.strptime(s, "%Y-%m-%d")


def parse_timestamp(s: str) -> datetime:
    return datetime.fromisoformat(s)


def range_end(end_date: datetime) -> datetime:
    """Last 6-hourly timestamp of an inclusive date range."""
    return end_date + timedelta(hours=18)


def sample_index(start_date: datetime, end_date: datetime, m_steps: int = 0,
                 data_end: datetime | None = None) -> list[datetime]:
    """Initial-condition timestamps: 00/06/12/18 UTC for every day in the range.

    Samples whose m_steps-step horizon extends past `data_end` are dropped.
    """
    if end_date < start_date:
        raise ConfigError("end date before start date")
    out = []
    day = start_date
    horizon = m_steps * STEP
    while day <= end_date:
        for hour in (0, 6, 12, 18):
            t = day + timedelta(hours=hour)
            if data_end is None or t + horizon <= data_end:
                out.append(t)
        day += timedelta(days=1)
    return out


# ---------------------------------------------------------------- solar flux

def _solar_declination(doy, day_frac):
    """Low-precision sinusoidal declination (Cooper formula), radians.

    Purely sinusoidal, so insolation is antisymmetric under
    (lat, day) -> (-lat, day + half year) up to the half-day pairing offset."""
    d = np.asarray(doy, np.float64) + day_frac
    return np.deg2rad(23.44) * np.sin(2.0 * np.pi * (284.0 + d) / 365.0)


def compute_tisr(timestamp: datetime, grid: GridSpec,
                 substep_minutes: int = 10) -> np.ndarray:
    """Mean top-of-atmosphere incident flux (W/m^2) over the 6 h window
    ending at `timestamp`, on the grid. Circular orbit: S0 is constant."""
    lat = np.deg2rad(grid.latitudes)
    lon = np.deg2rad(grid.longitudes)
    n_sub = int(round(6 * 60 / substep_minutes))
    offs = (np.arange(n_sub) + 0.5) * (6.0 / n_sub)   # hours into the window
    t0 = timestamp - timedelta(hours=6)
    base_hours = t0.hour + t0.minute / 60.0 + t0.second / 3600.0
    doy0 = t0.timetuple().tm_yday
    hours = base_hours + offs
    doy = doy0 + np.floor(hours / 24.0)               # substeps may cross midnight
    utc = np.mod(hours, 24.0)
    dec = _solar_declination(doy, utc / 24.0)
    ha = np.pi * (utc[:, None] / 12.0 - 1.0) + lon[None, :]   # (n_sub, W)
    cosz = (np.sin(lat)[None, :, None] * np.sin(dec)[:, None, None]
            + np.cos(lat)[None, :, None] * np.cos(dec)[:, None, None]
            * np.cos(ha)[:, None, :])
    return SOLAR_CONSTANT * np.maximum(cosz, 0.0).mean(axis=0)


def daily_mean_insolation(doy: int, grid: GridSpec) -> np.ndarray:
    """Analytic daily-mean TOA insolation per latitude (length H)."""
    lat = np.deg2rad(grid.latitudes)
    dec = float(_solar_declination(doy, 0.5))
    cos_h0 = np.clip(-np.tan(lat) * np.tan(dec), -1.0, 1.0)
    h0 = np.arccos(cos_h0)
    return (SOLAR_CONSTANT / np.pi) * (
        h0 * np.sin(lat) * np.sin(dec) + np.cos(lat) * np.cos(dec) * np.sin(h0))


# ---------------------------------------------------------------- statistics

@dataclass
class NormalizationStats:
    values: dict[str, tuple[float, float]]      # name -> (mean, std)
    range: tuple[str, str] | None = None        # dates the stats cover

    def normalize(self, name: str, x: np.ndarray) -> np.ndarray:
        mu, sd = self.values[name]
        return (x - mu) / sd

    def denormalize(self, name: str, x: np.ndarray) -> np.ndarray:
        mu, sd = self.values[name]
        return x * sd + mu

    def to_json(self) -> dict:
        return {"range": list(self.range) if self.range else None,
                "values": {k: {"mean": m, "std": s}
                           for k, (m, s) in sorted(self.values.items())}}

    @staticmethod
    def from_json(d: dict) -> "NormalizationStats":
        vals = {k: (v["mean"], v["std"]) for k, v in d["values"].items()}
        rng = tuple(d["range"]) if d.get("range") else None
        return NormalizationStats(vals, rng)


# ---------------------------------------------------------------- the store

class DatasetStore:
    """Chunked-binary gridded dataset with a uniform 6-hourly time axis."""

    def __init__(self, root: Path, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ConfigError(
                f"unsupported dataset format {manifest.get('format_version')!r}")
        self.grid = GridSpec.from_manifest(manifest["grid"])
        self.start = parse_timestamp(manifest["time"]["start"])
        self.n_steps = int(manifest["time"]["n_steps"])
        v = manifest["variables"]
        self.prognostic = tuple(v["prognostic"])
        self.constants = tuple(v["constants"])
        self.forcings = tuple(v["forcings"])
        self._years = _year_chunks(self.start, self.n_steps)
        self._cache: dict[str, np.ndarray] = {}
        self._const: np.ndarray | None = None

    # -- construction

    @staticmethod
    def open(root) -> "DatasetStore":
        root = Path(root)
        with open(root / "manifest.json") as f:
            return DatasetStore(root, json.load(f))

    @staticmethod
    def create(root, grid: GridSpec, varset: VariableSet, start: datetime,
               n_steps: int, provenance: dict | None = None) -> "DatasetStore":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": FORMAT_VERSION,
            "grid": grid.to_manifest(),
            "variables": {"prognostic": list(varset.prognostic),
                          "constants": list(varset.constants),
                          "forcings": list(varset.forcings),
                          "evaluation_subset": list(varset.evaluation_subset),
                          "set_name": varset.name},
            "time": {"start": start.isoformat(), "step_hours": STEP_HOURS,
                     "n_steps": n_steps, "calendar": "proleptic_gregorian"},
        }
        if provenance:
            manifest["generator"] = provenance
        with open(root / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        return DatasetStore(root, manifest)

    # -- time axis

    @property
    def end(self) -> datetime:
        return self.start + (self.n_steps - 1) * STEP

    def time_index(self, t: datetime) -> int:
        delta = t - self.start
        steps, rem = divmod(int(delta.total_seconds()), STEP_HOURS * 3600)
        if rem != 0 or steps < 0 or steps >= self.n_steps:
            raise ConfigError(f"timestamp {t} outside store time axis")
        return steps

    def timestamp(self, i: int) -> datetime:
        return self.start + i * STEP

    @property
    def varset(self) -> VariableSet:
        v = self.manifest["variables"]
        return VariableSet(v.get("set_name", "custom"), tuple(v["prognostic"]),
                           tuple(v["constants"]), tuple(v["forcings"]),
                           tuple(v.get("evaluation_subset", DEFAULT_EVAL_SUBSET)))

    # -- binary IO

    def write_year(self, var: str, year: int, arr: np.ndarray) -> None:
        count = next(c for y, _, c in self._years if y == year)
        if arr.shape != (count,) + self.grid.shape:
            raise ShapeError(f"{var}/{year}: shape {arr.shape}, expected "
                             f"{(count,) + self.grid.shape}")
        d = self.root / var
        d.mkdir(exist_ok=True)
        np.ascontiguousarray(arr, dtype="<f4").tofile(d / f"{year}.bin")
        self._cache.pop(var, None)

    def write_constants(self, fields: dict[str, np.ndarray]) -> None:
        arr = np.stack([fields[name] for name in self.constants])
        np.ascontiguousarray(arr, dtype="<f4").tofile(self.root / "constants.bin")
        self._const = None

    def _load_var(self, var: str) -> np.ndarray:
        if var not in self._cache:
            parts = []
            for year, _, count in self._years:
                raw = np.fromfile(self.root / var / f"{year}.bin", dtype="<f4")
                parts.append(raw.reshape((count,) + self.grid.shape))
            self._cache[var] = np.concatenate(parts) if len(parts) > 1 else parts[0]
        return self._cache[var]

    def read_steps(self, var: str, indices) -> np.ndarray:
        return self._load_var(var)[np.asarray(indices)]

    def read_range(self, var: str, i0: int, i1: int) -> np.ndarray:
        return self._load_var(var)[i0:i1]

    def read_constants(self) -> np.ndarray:
        if self._const is None:
            raw = np.fromfile(self.root / "constants.bin", dtype="<f4")
            self._const = raw.reshape((len(self.constants),) + self.grid.shape)
        return self._const

    # -- stats

    def save_stats(self, stats: NormalizationStats) -> None:
        with open(self.root / "stats.json", "w") as f:
            json.dump(stats.to_json(), f, indent=1, sort_keys=True)

    def load_stats(self) -> NormalizationStats:
        with open(self.root / "stats.json") as f:
            return NormalizationStats.from_json(json.load(f))


def _year_chunks(start: datetime, n_steps: int) -> list[tuple[int, int, int]]:
    """(year, first_global_index, step_count) triples covering the time axis."""
    out = []
    i = 0
    t = start
    while i < n_steps:
        nxt = datetime(t.year + 1, 1, 1)
        hop = min(int((nxt - t).total_seconds()) // (STEP_HOURS * 3600), n_steps - i)
        out.append((t.year, i, hop))
        i += hop
        t = nxt
    return out


# ---------------------------------------------------------------- normalize

def compute_normalization(store: DatasetStore, start_date: datetime,
                          end_date: datetime) -> NormalizationStats:
    """Unweighted mean/std of every prognostic and forcing variable over all
    grid points of the date range (streaming, float64 accumulators)."""
    i0 = store.time_index(start_date)
    i1 = store.time_index(range_end(end_date)) + 1
    if i1 <= i0:
        raise ConfigError("empty normalization range")
    values = {}
    for var in store.prognostic + store.forcings:
        s = s2 = 0.0
        n = 0
        for c0 in range(i0, i1, 4096):
            chunk = store.read_range(var, c0, min(c0 + 4096, i1)).astype(np.float64)
            s += chunk.sum()
            s2 += (chunk * chunk).sum()
            n += chunk.size
        mean = s / n
        var_ = max(s2 / n - mean * mean, 0.0)
        std = np.sqrt(var_)
        if std < STD_FLOOR:
            warnings.warn(f"variable {var!r} is nearly constant; std floored")
            std = STD_FLOOR
        values[var] = (float(mean), float(std))
    return NormalizationStats(values, (start_date.strftime("%Y-%m-%d"),
                                       end_date.strftime("%Y-%m-%d")))


def normalized_constants(store: DatasetStore) -> np.ndarray:
    """Constants scaled once: lat/lon to [-1, 1], others by their own mean/std."""
    fields = store.read_constants().astype(np.float64)
    out = np.empty_like(fields, dtype=np.float32)
    for i, name in enumerate(store.constants):
        f = fields[i]
        if name == "lat":
            out[i] = f / 90.0
        elif name == "lon":
            out[i] = (f - 180.0) / 180.0
        else:
            sd = max(f.std(), STD_FLOOR)
            out[i] = (f - f.mean()) / sd
    return out


def load_batch(store: DatasetStore, stats: NormalizationStats,
               timestamps: list[datetime], m_steps: int):
    """Normalized training tensors for a batch of initial conditions.

    Returns (X_seq, F_seq, C): X_seq has m_steps+1 arrays (B, K_p, H, W),
    F_seq has m_steps arrays (B, K_f, H, W), C is (K_c, H, W).
    """
    base = np.array([store.time_index(t) for t in timestamps])
    if np.any(base + m_steps >= store.n_steps):
        raise ConfigError("batch horizon extends past the store time axis")
    x_seq, f_seq = [], []
    for m in range(m_steps + 1):
        x = np.stack([stats.normalize(v, store.read_steps(v, base + m))
                      for v in store.prognostic], axis=1)
        x_seq.append(x.astype(np.float32))
        if m < m_steps:
            f = np.stack([stats.normalize(v, store.read_steps(v, base + m))
                          for v in store.forcings], axis=1)
            f_seq.append(f.astype(np.float32))
    return x_seq, f_seq, normalized_constants(store)


def forcing_provider(store: DatasetStore, stats: NormalizationStats):
    """step_index -> normalized forcing (K_f, H, W), for rollouts."""
    def provide(i: int) -> np.ndarray:
        return np.stack([stats.normalize(v, store.read_steps(v, [i])[0])
                         for v in store.forcings]).astype(np.float32)
    return provide


# ---------------------------------------------------------------- generator

@dataclass
class SyntheticConfig:
    seed: int
    years: int
    grid: GridSpec = field(default_factory=lambda: make_grid(32, 16))
    variable_set: VariableSet = field(default_factory=lambda: variable_set("vars8"))
    start_year: int = 2006
    band_limit: int = 10          # spectral band limit of the generated fields
    damping: float = 0.25         # per-step OU memory of the banded modes
    rotation_steps: int = 128     # solid-body rotation period, in 6 h steps
    coupling: float = 0.08        # rotation angle mixing neighboring variables
    seasonal_frac: float = 0.45   # share of variability driven by the season
    slow_amp: float = 0.25        # amplitude of the interannual (slow) modes
    slow_band: int = 3            # band limit of the slow modes
    slow_tau_years: float = 1.0   # e-folding time of the slow modes


def generate_synthetic_climate(cfg: SyntheticConfig, out_dir) -> DatasetStore:
    """Band-limited stochastic dynamics on the sphere: solid-body rotation plus
    diffusion-damped spectral noise, a TISR-phased seasonal cycle, and weak
    linear coupling between variables. Stationary in distribution across years
    and fully determined by the seed."""
    if cfg.years < 1:
        raise ConfigError("years must be >= 1")
    grid = cfg.grid
    plan = plan_sht(grid)
    lb = min(cfg.band_limit, plan.lmax)
    mb = min(lb, plan.mmax)
    kp = cfg.variable_set.n_prognostic
    rng = np.random.default_rng(cfg.seed)

    start = datetime(cfg.start_year, 1, 1)
    end_excl = datetime(cfg.start_year + cfg.years, 1, 1)
    n_steps = int((end_excl - start).total_seconds()) // (STEP_HOURS * 3600)

    store = DatasetStore.create(
        out_dir, grid, cfg.variable_set, start, n_steps,
        provenance={"kind": "synthetic", "seed": cfg.seed, "years": cfg.years,
                    "band_limit": lb, "damping": cfg.damping,
                    "rotation_steps": cfg.rotation_steps,
                    "coupling": cfg.coupling})

    # Per-degree target spectrum, shared by all variables so that the
    # orthogonal variable mixing preserves stationarity.
    ls = np.arange(plan.lmax + 1, dtype=np.float64)
    sigma_l = np.where((ls >= 1) & (ls <= lb), 1.0 / (1.0 + ls) ** 1.5, 0.0)
    mmask = np.zeros((plan.lmax + 1, plan.mmax + 1))
    for l in range(1, lb + 1):
        mmask[l, : min(l, mb) + 1] = 1.0
    gamma = cfg.damping
    inj = np.sqrt(1.0 - gamma * gamma)
    phase = np.exp(-1j * np.arange(plan.mmax + 1) * 2.0 * np.pi / cfg.rotation_steps)

    # Orthogonal coupling between consecutive variables.
    if kp > 1:
        a = np.zeros((kp, kp))
        for i in range(kp):
            a[i, (i + 1) % kp] = 1.0
        qmix = expm(cfg.coupling * (a - a.T))
    else:
        qmix = np.ones((1, 1))

    def draw_noise(sigma, mask):
        re = rng.standard_normal((kp, plan.lmax + 1, plan.mmax + 1))
        im = rng.standard_normal((kp, plan.lmax + 1, plan.mmax + 1))
        im[:, :, 0] = 0.0
        z = (re + 1j * im) * mask
        z[:, :, 1:] /= np.sqrt(2.0)
        return z * sigma[None, :, None]

    state = draw_noise(sigma_l, mmask)        # stationary initial condition

    # Slow interannual modes: low-degree OU with a year-scale memory. Degrees
    # l >= 1 have zero area mean, so global-mean drift diagnostics are
    # unaffected while period climatologies genuinely wander.
    sb = min(cfg.slow_band, lb)
    sigma_slow = np.where((ls >= 1) & (ls <= sb),
                          cfg.slow_amp / (1.0 + ls) ** 1.5, 0.0)
    smask = np.zeros_like(mmask)
    for l in range(1, sb + 1):
        smask[l, : min(l, mb) + 1] = 1.0
    gamma_slow = float(np.exp(-1.0 / (cfg.slow_tau_years * 365.25 * 4)))
    inj_slow = np.sqrt(1.0 - gamma_slow * gamma_slow)
    slow_state = draw_noise(sigma_slow, smask)
    base = 270.0 + 30.0 * rng.random(kp)
    amp = 5.0 + 10.0 * rng.random(kp)
    seas_amp = amp * cfg.seasonal_frac / (1.0 - cfg.seasonal_frac)

    # Band-limited zonal seasonal pattern, one profile per day of year,
    # phased by the daily-mean TISR anomaly.
    zonal_tab = plan.legendre_table[: lb + 1, 0, :]       # (lb+1, H)
    profiles = np.stack([daily_mean_insolation(d, grid) for d in range(1, 367)])
    profiles -= profiles.mean(axis=0, keepdims=True)      # anomaly vs annual mean
    profiles /= profiles.std() + 1e-12
    coefs = (profiles * plan.quadrature_weights) @ zonal_tab.T   # (366, lb+1)
    seasonal = coefs @ zonal_tab                                  # (366, H)

    # Smooth band-limited constants; lat/lon are exact coordinate grids.
    cfields = {}
    for name in cfg.variable_set.constants:
        if name == "lat":
            cfields[name] = np.tile(grid.latitudes[:, None], (1, grid.n_lon))
        elif name == "lon":
            cfields[name] = np.tile(grid.longitudes[None, :], (grid.n_lat, 1))
        else:
            c, f = _random_smooth(plan, rng, lb)
            lo, hi = f.min(), f.max()
            f = (f - lo) / max(hi - lo, 1e-12)
            cfields[name] = f if name == "lsm" else 2000.0 * f
    store.write_constants(cfields)

    names = cfg.variable_set.prognostic
    t = start
    for year, _, count in store._years:
        block = np.empty((count, kp, grid.n_lat, grid.n_lon), dtype=np.float32)
        tisr = np.empty((count, grid.n_lat, grid.n_lon), dtype=np.float32)
        for j in range(count):
            doy = t.timetuple().tm_yday
            fields = sht_inverse(state + slow_state, plan)   # (kp, H, W)
            block[j] = (base[:, None, None]
                        + amp[:, None, None] * fields
                        + seas_amp[:, None, None] * seasonal[doy - 1][None, :, None]
                        ).astype(np.float32)
            tisr[j] = compute_tisr(t, grid).astype(np.float32)
            mixed = np.einsum("pq,qlm->plm", qmix, state)
            state = gamma * (mixed * phase[None, None, :]) + inj * draw_noise(sigma_l, mmask)
            slow_state = gamma_slow * slow_state + inj_slow * draw_noise(sigma_slow, smask)
            t += STEP
        for k, name in enumerate(names):
            store.write_year(name, year, block[:, k])
        store.write_year("tisr", year, tisr)
    return store


def _random_smooth(plan: SHTPlan, rng: np.random.Generator, lb: int):
    c = np.zeros((plan.lmax + 1, plan.mmax + 1), dtype=np.complex128)
    for l in range(lb + 1):
        for m in range(min(l, plan.mmax) + 1):
            re = rng.standard_normal()
            im = 0.0 if m == 0 else rng.standard_normal()
            c[l, m] = (re + 1j * im) / (1.0 + l) ** 1.2
    return c, sht_inverse(c, plan)
