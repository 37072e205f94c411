"""File formats: landmark maps, run and estimate CSVs, metrics, configs and manifests.

Floats are written with ``repr`` so that a value read back is bit-identical
to the value written, and repeated pipelines produce byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import ConfigError, SchemaError
from .evaluation import ErrorSeries, TimingStats, Track
from .filter import FilterConfig, RunResult, StepData
from .geometry import Landmark, LandmarkMap, VehicleState
from .models import DrivingNoiseParams, MeasurementNoiseParams
from .simulator import POLICIES, GroundTruthRun, ScenarioConfig

RUN_COLUMNS = ["t", "true_x", "true_y", "true_theta", "true_gamma", "u_s", "u_t", "y_c", "y_h", "L"]
COV_COLUMNS = [f"P{i}{j}" for i in range(4) for j in range(i, 4)]
ESTIMATE_COLUMNS = (
    ["timestamp", "est_x", "est_y", "est_theta", "est_gamma"]
    + COV_COLUMNS
    + ["d_gated", "L", "ess", "update_micros"]
)
_IU = np.triu_indices(4)


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _open_for_read(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


# --------------------------------------------------------------------------
# landmark maps


def write_map(path, landmark_map: LandmarkMap | Iterable[Landmark]) -> None:
    lms = sorted(landmark_map, key=lambda m: m.id)
    data = [{"id": m.id, "x": m.x, "y": m.y, "theta": m.theta, "l": m.l, "w": m.w} for m in lms]
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def read_map(path) -> LandmarkMap:
    p = _open_for_read(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{p}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(data, list):
        raise SchemaError(f"{p}: expected a JSON array of landmarks")
    out = []
    for i, d in enumerate(data):
        try:
            out.append(Landmark(int(d["id"]), float(d["x"]), float(d["y"]),
                                float(d["theta"]), float(d["l"]), float(d["w"])))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{p}: landmark #{i}: {e}") from e
    return LandmarkMap(out)


# --------------------------------------------------------------------------
# run files


@dataclass
class RunFile:
    """Contents of a run CSV.  True-state columns may be NaN (field logs)."""

    t: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    y_c: np.ndarray
    y_h: np.ndarray
    det_offsets: np.ndarray
    det_values: np.ndarray

    def __len__(self) -> int:
        return self.t.shape[0]

    def step_data(self) -> StepData:
        return StepData(self.t, self.controls, self.y_c, self.y_h, self.det_offsets, self.det_values)

    def track(self) -> Track:
        return Track(self.t, self.states)

    @classmethod
    def from_run(cls, r: GroundTruthRun) -> "RunFile":
        return cls(r.t, r.states, r.controls, r.y_c, r.y_h, r.det_offsets, r.det_values)


def write_run_csv(path, run: GroundTruthRun | RunFile) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        offs = run.det_offsets
        for k in range(run.t.shape[0]):
            z = run.det_values[offs[k]:offs[k + 1]]
            row = [fmt(run.t[k])] + [fmt(v) for v in run.states[k]]
            row += [fmt(run.controls[k, 0]), fmt(run.controls[k, 1]), fmt(run.y_c[k]), fmt(run.y_h[k])]
            row.append(str(z.shape[0]))
            row += [fmt(v) for v in z.ravel()]
            w.writerow(row)


def _parse_float(s: str, where: str) -> float:
    if s == "":
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise SchemaError(f"{where}: not a number: {s!r}") from None


def _check_times(t: np.ndarray, where) -> None:
    bad = np.flatnonzero(~(np.diff(t) > 0))
    if bad.size:
        k = int(bad[0]) + 1
        raise SchemaError(f"{where}: timestamps not strictly increasing at row {k + 1}")


def read_run_csv(path) -> RunFile:
    p = _open_for_read(path)
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][: len(RUN_COLUMNS)] != RUN_COLUMNS:
        raise SchemaError(f"{p}: header must start with {','.join(RUN_COLUMNS)}")
    rows = rows[1:]
    if not rows:
        raise SchemaError(f"{p}: no data rows")
    K = len(rows)
    fixed = np.empty((K, 9))
    offsets = np.zeros(K + 1, dtype=np.int64)
    values = []
    for k, row in enumerate(rows):
        where = f"{p}:{k + 2}"
        if len(row) < len(RUN_COLUMNS):
            raise SchemaError(f"{where}: expected at least {len(RUN_COLUMNS)} columns")
        fixed[k] = [_parse_float(s, where) for s in row[:9]]
        try:
            L = int(row[9])
        except ValueError:
            raise SchemaError(f"{where}: L must be an integer, got {row[9]!r}") from None
        if L < 0 or len(row) != len(RUN_COLUMNS) + 2 * L:
            raise SchemaError(f"{where}: L={L} but {len(row) - len(RUN_COLUMNS)} detection values")
        values += [_parse_float(s, where) for s in row[10:]]
        offsets[k + 1] = offsets[k] + L
    t = fixed[:, 0]
    if not np.all(np.isfinite(t)):
        raise SchemaError(f"{p}: missing timestamp")
    _check_times(t, p)
    return RunFile(
        t.copy(), fixed[:, 1:5].copy(), fixed[:, 5:7].copy(), fixed[:, 7].copy(), fixed[:, 8].copy(),
        offsets, np.array(values, dtype=float).reshape(-1, 2),
    )


# --------------------------------------------------------------------------
# estimate files


def write_estimate_csv(path, res: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_COLUMNS)
        for k in range(res.t.shape[0]):
            row = [fmt(res.t[k])] + [fmt(v) for v in res.mean[k]]
            row += [fmt(v) for v in res.cov[k][_IU]]
            row += [str(int(res.d_gated[k])), str(int(res.n_detections[k])),
                    fmt(res.ess[k]), fmt(res.update_micros[k])]
            w.writerow(row)


@dataclass
class EstimateFile:
    t: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    d_gated: np.ndarray
    n_detections: np.ndarray
    ess: np.ndarray
    update_micros: np.ndarray

    def track(self) -> Track:
        return Track(self.t, self.mean)


def read_estimate_csv(path) -> EstimateFile:
    p = _open_for_read(path)
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ESTIMATE_COLUMNS:
        raise SchemaError(f"{p}: header must be {','.join(ESTIMATE_COLUMNS)}")
    n = len(ESTIMATE_COLUMNS)
    data = np.empty((len(rows) - 1, n))
    for k, row in enumerate(rows[1:]):
        if len(row) != n:
            raise SchemaError(f"{p}:{k + 2}: expected {n} columns, got {len(row)}")
        data[k] = [_parse_float(s, f"{p}:{k + 2}") for s in row]
    if data.shape[0] == 0:
        raise SchemaError(f"{p}: no data rows")
    _check_times(data[:, 0], p)
    cov = np.zeros((data.shape[0], 4, 4))
    cov[:, _IU[0], _IU[1]] = data[:, 5:15]
    cov[:, _IU[1], _IU[0]] = data[:, 5:15]
    return EstimateFile(
        data[:, 0], data[:, 1:5], cov, data[:, 15].astype(np.int64),
        data[:, 16].astype(np.int64), data[:, 17], data[:, 18],
    )


def read_track(path) -> Track:
    """A state track from either an estimate CSV or a run CSV (its true states)."""
    p = _open_for_read(path)
    with open(p, newline="") as fh:
        header = next(csv.reader(fh), [])
    if header == ESTIMATE_COLUMNS:
        return read_estimate_csv(p).track()
    if header[: len(RUN_COLUMNS)] == RUN_COLUMNS:
        return read_run_csv(p).track()
    raise SchemaError(f"{p}: neither an estimate nor a run file")


# --------------------------------------------------------------------------
# metrics


def write_rmse_csv(path, t, rmse_dr, rmse_sss) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "rmse_dr", "rmse_sss"])
        for row in zip(t, rmse_dr, rmse_sss):
            w.writerow([fmt(v) for v in row])


def write_cf_csv(path, thresholds, p_dr, p_sss) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "p_dr", "p_sss"])
        for row in zip(thresholds, p_dr, p_sss):
            w.writerow([fmt(v) for v in row])


def write_timing_csv(path, stats: Optional[TimingStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d_gated", "mean_micros", "n"])
        if stats is not None:
            for d, m, n in zip(stats.d_gated, stats.mean_micros, stats.n):
                w.writerow([str(int(d)), fmt(m), str(int(n))])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PipelineConfig:
    scenario: ScenarioConfig
    filter: FilterConfig
    initial_sigma: tuple[float, float, float, float] = (0.01, 0.01, 0.001, 0.01)
    map_path: Optional[str] = None
    source_text: str = ""

    @property
    def seed(self) -> int:
        return self.scenario.seed

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, scenario=replace(self.scenario, seed=seed), filter=replace(self.filter, seed=seed))

    def digest(self) -> str:
        return hashlib.sha256(self.source_text.encode()).hexdigest()


_SCENARIO_KEYS = {
    "duration": float, "ping_rate": float, "seed": int, "grid_spacing": float,
    "grid_extent": float, "landmark_length": float, "landmark_width": float,
    "landmark_orientation": None, "initial_state": list, "current_mean": float,
    "current_std": float, "map": str, "landmarks": list,
}
_POLICY_KEYS = {
    "kind": str, "hold": float, "speed_range": list, "turn_range": list, "leg_length": float,
    "leg_spacing": float, "legs": int, "speed": float, "max_turn_rate": float, "segments": list,
}
_MOTION_KEYS = {"sigma_s": float, "sigma_t": float, "sigma_theta": float, "sigma_gamma": float}
_SENSOR_KEYS = {
    "sigma_d": float, "sigma_c": float, "sigma_h": float, "p_det": float, "mu_c": float,
    "r_max": float, "clutter_model": str, "sigma_d_overrides": dict,
}
_FILTER_KEYS = {
    "particle_count": int, "gamma_gate": float, "association": str, "analytic_skip": bool,
    "skip_sigma": float, "initial_sigma": list,
}
SECTIONS = {
    "scenario": _SCENARIO_KEYS, "policy": _POLICY_KEYS, "motion": _MOTION_KEYS, "truth": _MOTION_KEYS,
    "sensor": _SENSOR_KEYS, "filter": _FILTER_KEYS,
}


def _typed(section: str, key: str, value, kind):
    where = f"[{section}].{key}"
    if kind is None:
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if not isinstance(value, kind):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {value!r}")
    return value


def _sections(doc: dict) -> dict[str, dict]:
    out = {}
    for name, body in doc.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
        keys = SECTIONS[name]
        sec = {}
        for k, v in body.items():
            if k not in keys:
                raise ConfigError(f"[{name}].{k}: unknown key")
            sec[k] = _typed(name, k, v, keys[k])
        out[name] = sec
    for name in SECTIONS:
        out.setdefault(name, {})
    return out


def _pair(section, key, v) -> tuple[float, float]:
    if len(v) != 2:
        raise ConfigError(f"[{section}].{key}: expected two numbers")
    return (_typed(section, key, v[0], float), _typed(section, key, v[1], float))


def build_config(doc: dict, source_text: str = "", base_dir: Optional[Path] = None) -> PipelineConfig:
    s = _sections(doc)
    sc, po, mo, se, fi = s["scenario"], s["policy"], s["motion"], s["sensor"], s["filter"]
    try:
        driving = DrivingNoiseParams(**mo)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[motion]: {e}") from e
    # [truth] overrides the driving noise of the simulated vehicle only
    try:
        truth_driving = DrivingNoiseParams(**{**mo, **s["truth"]})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[truth]: {e}") from e
    sens = dict(se)
    if "sigma_d_overrides" in sens:
        try:
            sens["sigma_d_overrides"] = {int(k): float(v) for k, v in sens["sigma_d_overrides"].items()}
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[sensor].sigma_d_overrides: {e}") from e
    try:
        meas = MeasurementNoiseParams(**sens)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[sensor]: {e}") from e

    kw: dict[str, Any] = {}
    for k in ("duration", "ping_rate", "seed", "grid_spacing", "grid_extent", "landmark_length",
              "landmark_width", "current_mean", "current_std"):
        if k in sc:
            kw[k] = sc[k]
    if "landmark_orientation" in sc:
        o = sc["landmark_orientation"]
        if o == "random":
            kw["landmark_orientation"] = None
        else:
            kw["landmark_orientation"] = _typed("scenario", "landmark_orientation", o, float)
    if "initial_state" in sc:
        v = sc["initial_state"]
        if len(v) != 4:
            raise ConfigError("[scenario].initial_state: expected [x, y, theta, gamma]")
        try:
            kw["initial_state"] = VehicleState(*[_typed("scenario", "initial_state", x, float) for x in v])
        except ValueError as e:
            raise ConfigError(f"[scenario].initial_state: {e}") from e
    map_path = None
    if "map" in sc:
        mp = Path(sc["map"])
        if base_dir is not None and not mp.is_absolute():
            mp = base_dir / mp
        map_path = str(mp)
        kw["landmarks"] = tuple(read_map(mp))
    if "landmarks" in sc:
        if "map" in sc:
            raise ConfigError("[scenario]: give either map or landmarks, not both")
        lms = []
        for i, v in enumerate(sc["landmarks"]):
            if not isinstance(v, list) or len(v) != 6:
                raise ConfigError(f"[scenario].landmarks[{i}]: expected [id, x, y, theta, l, w]")
            try:
                lms.append(Landmark(int(v[0]), *[_typed("scenario", f"landmarks[{i}]", x, float) for x in v[1:]]))
            except ValueError as e:
                raise ConfigError(f"[scenario].landmarks[{i}]: {e}") from e
        kw["landmarks"] = tuple(lms)
    kind = po.get("kind", "random")
    if kind not in POLICIES:
        raise ConfigError(f"[policy].kind: must be one of {POLICIES}, got {kind!r}")
    kw["policy"] = kind
    for k in ("hold", "leg_length", "leg_spacing", "legs", "speed", "max_turn_rate"):
        if k in po:
            kw[k] = po[k]
    for k in ("speed_range", "turn_range"):
        if k in po:
            kw[k] = _pair("policy", k, po[k])
    if "segments" in po:
        segs = []
        for i, sg in enumerate(po["segments"]):
            if not isinstance(sg, list) or len(sg) != 3:
                raise ConfigError(f"[policy].segments[{i}]: expected [duration, speed, turn_rate]")
            segs.append(tuple(_typed("policy", f"segments[{i}]", x, float) for x in sg))
        kw["segments"] = tuple(segs)
    try:
        scenario = ScenarioConfig(driving=truth_driving, measurement=meas, **kw)
    except (ConfigError, ValueError) as e:
        raise ConfigError(f"[scenario]: {e}") from e

    fkw = {k: fi[k] for k in ("particle_count", "gamma_gate", "association", "analytic_skip", "skip_sigma") if k in fi}
    try:
        fcfg = FilterConfig(driving=driving, measurement=meas, seed=scenario.seed, record_timing=False, **fkw)
    except ValueError as e:
        raise ConfigError(f"[filter]: {e}") from e
    init_sig = (0.01, 0.01, 0.001, 0.01)
    if "initial_sigma" in fi:
        v = fi["initial_sigma"]
        if len(v) != 4:
            raise ConfigError("[filter].initial_sigma: expected four numbers")
        init_sig = tuple(_typed("filter", "initial_sigma", x, float) for x in v)
        if min(init_sig) < 0:
            raise ConfigError("[filter].initial_sigma: must be >= 0")
    return PipelineConfig(scenario, fcfg, init_sig, map_path, source_text)


PRESETS = ("sim", "hydrone", "iver3")


def preset_text(name: str) -> str:
    return resources.files("sssnav.presets").joinpath(f"{name}.toml").read_text()


def load_config(path_or_preset) -> PipelineConfig:
    """Load a TOML config file, or one of the bundled presets by name."""
    p = Path(path_or_preset)
    if p.is_file():
        text = p.read_text()
        base = p.parent
    elif str(path_or_preset) in PRESETS:
        text = preset_text(str(path_or_preset))
        base = None
    else:
        raise FileNotFoundError(f"no such config file: {p}")
    return loads_config(text, base, where=str(p))


def loads_config(text: str, base_dir: Optional[Path] = None, where: str = "<config>") -> PipelineConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{where}: {e}") from e
    try:
        return build_config(doc, text, base_dir)
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from e


def apply_overrides(text: str, overrides: Sequence[str]) -> str:
    """Append ``section.key=value`` overrides (TOML values) to a config text."""
    if not overrides:
        return text
    doc = tomllib.loads(text)
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override {ov!r}: expected section.key=value")
        lhs, rhs = ov.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        try:
            val = tomllib.loads(f"v = {rhs.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            val = rhs.strip()
        doc.setdefault(sec, {})[key] = val
    return dumps_toml(doc)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))} = {_toml_value(x)}" for k, x in v.items()) + "}"
    raise ConfigError(f"cannot serialise {v!r}")


def dumps_toml(doc: dict) -> str:
    lines = []
    for sec, body in doc.items():
        lines.append(f"[{sec}]")
        for k, v in body.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    map: str
    runs: list[str] = field(default_factory=list)
    outputs: dict[str, list[str]] = field(default_factory=dict)
    tool_version: str = __version__
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def write(self, path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def read(cls, path) -> "RunManifest":
        p = _open_for_read(path)
        try:
            d = json.loads(p.read_text())
            m = cls(**d)
        except (json.JSONDecodeError, TypeError) as e:
            raise SchemaError(f"{p}: invalid manifest: {e}") from e
        return m

    def check_files(self, root) -> None:
        root = Path(root)
        for rel in [self.map, *self.runs, *[x for v in self.outputs.values() for x in v]]:
            if not rel:
                continue
            if not (root / rel).is_file():
                raise FileNotFoundError(f"manifest references missing file: {root / rel}")
