"""Command-line entry point: simulate, filter, evaluate and sweep."""

from __future__ import annotations

import argparse
import logging
import math
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import MisalignedSeries, SSSNavError
from .evaluation import cf_curve, rmse_series, summarize, tail_mean, timing_by_gated
from .filter import FilterConfig, GaussianBelief, run_arrays
from .geometry import LandmarkMap, VehicleState
from .io import (
    PipelineConfig,
    RunFile,
    RunManifest,
    apply_overrides,
    load_config,
    loads_config,
    preset_text,
    PRESETS,
    read_estimate_csv,
    read_map,
    read_run_csv,
    read_track,
    write_cf_csv,
    write_estimate_csv,
    write_json,
    write_map,
    write_rmse_csv,
    write_run_csv,
    write_timing_csv,
)
from .simulator import build_map, run_scenario

log = logging.getLogger("sssnav")

MODES = ("sss", "dr", "exact-assoc")
STREAM_FILTER = 4
CF_STEP = 0.1


def filter_seed(base: int, run_index: int) -> int:
    return int(np.random.SeedSequence([base, run_index, STREAM_FILTER]).generate_state(1)[0])


@contextmanager
def staged_output(out: Path):
    """Write into a scratch directory and move the results into ``out`` on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(parents=True, exist_ok=True)
    for entry in sorted(tmp.iterdir()):
        dest = out / entry.name
        if dest.is_dir():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        shutil.move(str(entry), str(dest))
    tmp.rmdir()


def _config_text(config: str, overrides: Sequence[str]) -> str:
    p = Path(config)
    if p.is_file():
        text = p.read_text()
    elif config in PRESETS:
        text = preset_text(config)
    else:
        raise FileNotFoundError(f"no such config file: {p}")
    return apply_overrides(text, overrides)


def _load(config: str, overrides: Sequence[str], seed: Optional[int]) -> tuple[PipelineConfig, str]:
    text = _config_text(config, overrides)
    base = Path(config).parent if Path(config).is_file() else None
    cfg = loads_config(text, base, where=config)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg, text


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*items)))


# --------------------------------------------------------------------------
# simulate


def _simulate_one(cfg: PipelineConfig, landmark_map: LandmarkMap, index: int, path: str) -> float:
    r = run_scenario(cfg.scenario, index, landmark_map)
    write_run_csv(path, r)
    return r.observation_frequency


def simulate(cfg: PipelineConfig, config_text: str, out: Path, runs: int, jobs: int = 1) -> RunManifest:
    if runs < 1:
        raise SSSNavError("runs must be >= 1")
    landmark_map = build_map(cfg.scenario)
    with staged_output(out) as tmp:
        (tmp / "runs").mkdir()
        (tmp / "config.toml").write_text(config_text)
        write_map(tmp / "map.json", landmark_map)
        names = [f"runs/run_{i:04d}.csv" for i in range(runs)]
        freqs = _pmap(_simulate_one, [(cfg, landmark_map, i, str(tmp / n)) for i, n in enumerate(names)], jobs)
        man = RunManifest(
            config_hash=cfg.digest(), seed=cfg.seed, map="map.json", runs=names,
            outputs={"config": ["config.toml"]},
            extra={"observation_frequency": [repr(f) for f in freqs],
                   "mean_observation_frequency": repr(float(np.mean(freqs)))},
        )
        man.write(tmp / "manifest.json")
    log.info("wrote %d runs to %s", runs, out)
    return man


# --------------------------------------------------------------------------
# filter


def _filter_config(cfg: PipelineConfig, mode: str, timing: bool, particles: Optional[int]) -> FilterConfig:
    fc = replace(cfg.filter, record_timing=timing)
    if particles is not None:
        fc = replace(fc, particle_count=particles)
    if mode == "dr":
        fc = FilterConfig.dead_reckoning(fc)
    elif mode == "exact-assoc":
        fc = replace(fc, association="exact")
    return fc


def _initial_belief(run: RunFile, cfg: PipelineConfig) -> GaussianBelief:
    s0 = run.states[0]
    if not np.all(np.isfinite(s0)):
        s0 = cfg.scenario.initial_state.as_array()
    return GaussianBelief.from_state(VehicleState.from_array(s0), cfg.initial_sigma)


def _run_index(path: Path, fallback: int) -> int:
    tail = path.stem.rsplit("_", 1)[-1]
    return int(tail) if tail.isdigit() else fallback


def _filter_one(cfg: PipelineConfig, fc: FilterConfig, landmark_map: LandmarkMap,
                run_path: str, index: int, out_path: str) -> None:
    run = read_run_csv(run_path)
    fc = replace(fc, seed=filter_seed(fc.seed, index))
    res = run_arrays(run.step_data(), _initial_belief(run, cfg), landmark_map, fc)
    write_estimate_csv(out_path, res)


def _collect_runs(inputs: Sequence[str]) -> tuple[list[Path], Optional[Path]]:
    """Run CSVs named by ``inputs``; a directory written by ``simulate`` expands to its runs."""
    files, root = [], None
    for s in inputs:
        p = Path(s)
        if p.is_dir():
            man = p / "manifest.json"
            if man.is_file():
                m = RunManifest.read(man)
                m.check_files(p)
                files += [p / r for r in m.runs]
                root = root or p
            else:
                files += sorted(p.glob("*.csv"))
        elif p.is_file():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such file or directory: {p}")
    if not files:
        raise SSSNavError("no run files given")
    return files, root


def filter_runs(
    cfg: PipelineConfig,
    run_files: Sequence[Path],
    landmark_map: LandmarkMap,
    out: Path,
    mode: str = "sss",
    jobs: int = 1,
    timing: bool = False,
    particles: Optional[int] = None,
) -> list[Path]:
    fc = _filter_config(cfg, mode, timing, particles)
    # read everything first so that schema errors leave no partial output
    for f in run_files:
        read_run_csv(f)
    names = [Path(f).name for f in run_files]
    if len(set(names)) != len(names):
        raise SSSNavError("run files must have distinct names")
    with staged_output(out) as tmp:
        items = [
            (cfg, fc, landmark_map, str(f), _run_index(Path(f), i), str(tmp / n))
            for i, (f, n) in enumerate(zip(run_files, names))
        ]
        _pmap(_filter_one, items, jobs)
        RunManifest(
            config_hash=cfg.digest(), seed=fc.seed, map="", runs=[Path(f).name for f in run_files],
            outputs={"estimates": names}, extra={"mode": mode},
        ).write(tmp / "manifest.json")
    return [out / n for n in names]


# --------------------------------------------------------------------------
# evaluate


def _expand(inputs: Optional[Sequence[str]]) -> list[Path]:
    if not inputs:
        return []
    out = []
    for s in inputs:
        p = Path(s)
        if p.is_dir():
            man = p / "manifest.json"
            if man.is_file():
                m = RunManifest.read(man)
                rel = m.outputs.get("estimates") or m.runs
                out += [p / r for r in rel]
            else:
                out += sorted(p.glob("*.csv"))
        elif p.is_file():
            out.append(p)
        else:
            raise FileNotFoundError(f"no such file or directory: {p}")
    for p in out:
        if not p.is_file():
            raise FileNotFoundError(f"no such file: {p}")
    return out


def evaluate(truth_files: Sequence[Path], sss_files: Sequence[Path], dr_files: Sequence[Path], out: Path) -> dict:
    if not truth_files:
        raise SSSNavError("no truth runs given")
    if not sss_files and not dr_files:
        raise SSSNavError("give --sss and/or --dr estimates")
    truths = [read_track(p) for p in truth_files]
    series = {}
    timing = None
    for name, files in (("sss", sss_files), ("dr", dr_files)):
        if not files:
            continue
        if len(files) != len(truths):
            raise MisalignedSeries(f"{len(files)} {name} estimates for {len(truths)} runs")
        series[name] = rmse_series([read_track(p) for p in files], truths)
    if sss_files:
        d, m = [], []
        for p in sss_files:
            try:
                e = read_estimate_csv(p)
            except SSSNavError:
                continue
            d.append(e.d_gated[1:])
            m.append(e.update_micros[1:])
        if d and np.any(np.concatenate(m) > 0):
            timing = timing_by_gated(np.concatenate(d), np.concatenate(m))

    t = next(iter(series.values())).t
    nan = np.full(t.shape, math.nan)
    r_dr = series["dr"].rmse_2d if "dr" in series else nan
    r_sss = series["sss"].rmse_2d if "sss" in series else nan
    emax = max(float(s.err_2d.max()) for s in series.values())
    th = np.round(np.arange(0.0, math.ceil(emax / CF_STEP) + 1) * CF_STEP, 10)
    p_dr = cf_curve(series["dr"], th)[1] if "dr" in series else np.full(th.shape, math.nan)
    p_sss = cf_curve(series["sss"], th)[1] if "sss" in series else np.full(th.shape, math.nan)

    summary = {"rmse_definition": "pooled across runs per step; 2-D (x, y) headline, 3-D includes altitude"}
    if "dr" in series and "sss" in series:
        summary.update(summarize(series["dr"], series["sss"]))
    else:
        for name, s in series.items():
            summary[f"final_rmse_{name}"] = float(s.rmse_2d[-1])
            summary[f"final_window_rmse_{name}"] = tail_mean(s.rmse_2d, t, 120.0)
            summary[f"final_rmse_3d_{name}"] = float(s.rmse_3d[-1])
            summary["runs"] = s.runs
    if timing is not None:
        summary["timing"] = {
            "slope_micros_per_landmark": timing.slope, "intercept_micros": timing.intercept,
            "quadratic_coef": timing.quad_coef, "quadratic_pvalue": timing.quad_pvalue,
            "quadratic_relative": timing.quad_relative,
        }
    with staged_output(out) as tmp:
        write_rmse_csv(tmp / "rmse.csv", t, r_dr, r_sss)
        write_cf_csv(tmp / "cf.csv", th, p_dr, p_sss)
        write_timing_csv(tmp / "timing.csv", timing)
        write_json(tmp / "summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# sweep


def _parse_spacings(s: str) -> list[Optional[float]]:
    out = []
    for tok in s.split(","):
        tok = tok.strip().lower()
        out.append(None if tok in ("none", "dr", "") else float(tok))
    return out


def sweep(cfg: PipelineConfig, config_text: str, out: Path, spacings, runs: int,
          jobs: int = 1, particles: Optional[int] = None) -> list[dict]:
    rows = []
    with staged_output(out) as tmp:
        for s in spacings:
            name = "spacing_none" if s is None else f"spacing_{s:g}"
            sc = replace(cfg.scenario, grid_spacing=s, landmarks=None if s is None else cfg.scenario.landmarks)
            if s is None:
                sc = replace(sc, landmarks=())
            c = replace(cfg, scenario=sc)
            d = tmp / name
            man = simulate(c, config_text, d, runs, jobs)
            run_files = [d / r for r in man.runs]
            lm = read_map(d / "map.json")
            sss = filter_runs(c, run_files, lm, d / "sss", "sss", jobs, False, particles)
            dr = filter_runs(c, run_files, lm, d / "dr", "dr", jobs, False, particles)
            summ = evaluate(run_files, sss, dr, d / "metrics")
            rows.append({
                "spacing": "none" if s is None else s,
                "observation_frequency": float(man.extra["mean_observation_frequency"]),
                "final_rmse_dr": summ["final_rmse_dr"],
                "final_rmse_sss": summ["final_rmse_sss"],
                "final_window_rmse_sss": summ["final_window_rmse_sss"],
            })
        with open(tmp / "sweep.csv", "w") as fh:
            fh.write("spacing,observation_frequency,final_rmse_dr,final_rmse_sss,final_window_rmse_sss\n")
            for r in rows:
                fh.write(",".join(str(r[k]) if k == "spacing" else repr(float(r[k])) for k in r) + "\n")
    return rows


# --------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sssnav", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help=f"TOML config file or preset name ({', '.join(PRESETS)})")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, help="base seed (overrides the config)")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("simulate", help="generate simulated runs")
    common(p)
    p.add_argument("--runs", type=int, default=1)

    p = sub.add_parser("filter", help="run the navigation filter over run files")
    common(p, config_required=False)
    p.add_argument("inputs", nargs="+", help="run CSVs or simulate output directories")
    p.add_argument("--map", help="landmark map JSON (default: from the simulate directory)")
    p.add_argument("--mode", choices=MODES, default="sss")
    p.add_argument("--timing", action="store_true", help="record update durations (output not reproducible)")
    p.add_argument("--particles", type=int, help="override the particle count")

    p = sub.add_parser("evaluate", help="compute RMSE, CF and timing metrics")
    p.add_argument("--runs", nargs="+", required=True, help="truth run CSVs or directory")
    p.add_argument("--sss", nargs="+", help="SSS estimate CSVs or directory")
    p.add_argument("--dr", nargs="+", help="DR estimate CSVs or directory")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("sweep", help="simulate, filter and evaluate over landmark spacings")
    common(p)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--spacings", default="25,80,200,none", help="comma-separated grid spacings; 'none' = no landmarks")
    p.add_argument("--particles", type=int, help="override the particle count")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "simulate":
            cfg, text = _load(args.config, args.overrides, args.seed)
            simulate(cfg, text, args.out, args.runs, args.jobs)
        elif args.command == "filter":
            run_files, root = _collect_runs(args.inputs)
            if args.config:
                cfg, _ = _load(args.config, args.overrides, args.seed)
            elif root is not None:
                cfg, _ = _load(str(root / "config.toml"), args.overrides, args.seed)
            else:
                raise SSSNavError("--config is required when run files are given directly")
            if args.map:
                lm = read_map(args.map)
            elif root is not None:
                lm = read_map(root / "map.json")
            else:
                raise SSSNavError("--map is required when run files are given directly")
            filter_runs(cfg, run_files, lm, args.out, args.mode, args.jobs, args.timing, args.particles)
        elif args.command == "evaluate":
            summary = evaluate(_expand(args.runs), _expand(args.sss), _expand(args.dr), args.out)
            for k in sorted(summary):
                if k.startswith("final"):
                    print(f"{k}: {summary[k]:.4f}")
        elif args.command == "sweep":
            cfg, text = _load(args.config, args.overrides, args.seed)
            rows = sweep(cfg, text, args.out, _parse_spacings(args.spacings), args.runs, args.jobs, args.particles)
            for r in rows:
                print(f"spacing {r['spacing']}: obs {r['observation_frequency']:.4f} "
                      f"final rmse dr {r['final_rmse_dr']:.3f} sss {r['final_rmse_sss']:.3f}")
    except (SSSNavError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
