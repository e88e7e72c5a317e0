"""
End-to-end orchestration: sample, integrate, measure, grid, assemble, solve,
replay and export.

Every run writes its artifacts into one directory::

    config.ini          the resolved configuration (defaults filled in)
    strains.csv         pooled strains and their weights
    grid.csv            grid nodes
    histogram.csv       weighted strain histogram on [-R, R]
    result.csv          node, learned and true a' and a
    trajectories/       one CSV per experiment at the measurement times (+ JSON)
    replay_<seed>.csv   paired true/learned trajectories (when replay is on)
    manifest.json       seeds, versions, timings, solver and error summaries

If a stage raises, a ``.failed`` file naming the stage is written next to the
artifacts produced so far.
"""

from __future__ import annotations

import json
import logging
import os
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy

from . import __version__
from .chain import grad_x_energy
from .config import ExperimentConfig
from .ensemble import (
    N_HIST_BINS,
    InitialLaw,
    adaptive_grid,
    criticality_defect,
    default_mean,
    extract_strains,
    measurement_times,
    run_experiments,
    sample_initial,
    snap_indices,
)
from .flow import dissipation
from .presets import get_preset
from .recon import (
    assemble,
    band_limits,
    export_system,
    integrate_aprime,
    reconstruction_error,
    solve_constrained_ls,
)
from .replay import learned_model, replay, support_distance, trajectory_error

log = logging.getLogger(__name__)

FAILED_MARKER = ".failed"
FMT = "%.17g"


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunReport:
    outdir: str
    manifest: dict
    fn: object = None
    samples: object = None
    measurements: object = None
    trajectories: list = field(default_factory=list)
    replays: dict = field(default_factory=dict)

    @property
    def sup_error(self) -> float:
        return self.manifest["reconstruction"]["sup_error"]


# ---------------------------------------------------------------------------
# csv helpers
# ---------------------------------------------------------------------------


def write_csv(path, header, columns):
    """Write equal-length columns with a fixed 17-digit format."""
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns]) if columns else np.empty((0, 0))
    np.savetxt(path, data, fmt=FMT, delimiter=",", header=",".join(header), comments="")


def read_csv(path):
    """Return ``(header, array)``; the array is 2-d even for one row."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def _state_header(prefix, d):
    return [f"{prefix}_{i + 1}" for i in range(d)]


# ---------------------------------------------------------------------------
# the pipeline
# ---------------------------------------------------------------------------


class _Stages:
    def __init__(self, outdir):
        self.outdir = outdir
        self.timings = {}

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        except Exception as exc:
            with open(os.path.join(self.outdir, FAILED_MARKER), "w") as fh:
                fh.write(f"stage: {name}\nerror: {type(exc).__name__}: {exc}\n")
            raise PipelineError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - t0


def initial_law(cfg: ExperimentConfig, model, seed=None) -> InitialLaw:
    ens = cfg.ensemble
    if ens.mean == "interp":
        mean = default_mean(model)
    else:
        mean = np.array([float(v) for v in ens.mean.split(",")])
    return InitialLaw(mean=mean, sigma=ens.sigma, seed=ens.seed if seed is None else seed)


def parameter_table(cfg: ExperimentConfig) -> dict:
    """The figure-table parameters of a run."""
    return {
        "d": cfg.model.d,
        "T": cfg.model.T,
        "M1": cfg.recon.M1,
        "M2": cfg.recon.M2,
        "N_e": cfg.ensemble.N_e,
        "N": cfg.ensemble.N,
        "D(N)": cfg.recon.K,
        "K": cfg.recon.nodes(cfg.ensemble.N),
        "epsilon": cfg.flow.epsilon,
    }


def run_pipeline(cfg: ExperimentConfig, outdir: str | None = None, write_trajectories: bool = True) -> RunReport:
    """Run every stage for one configuration and export the artifacts."""
    outdir = outdir or cfg.output_dir()
    os.makedirs(outdir, exist_ok=True)
    marker = os.path.join(outdir, FAILED_MARKER)
    if os.path.exists(marker):
        os.remove(marker)
    stage = _Stages(outdir)
    t_start = time.perf_counter()

    with stage("config"):
        cfg.check()
        with open(os.path.join(outdir, "config.ini"), "w") as fh:
            fh.write(cfg.to_text())
        model = cfg.chain_model()
        params = cfg.flow_params()
        K = cfg.recon.nodes(cfg.ensemble.N)

    with stage("sample"):
        law = initial_law(cfg, model)
        x0, u0 = sample_initial(model, law, cfg.ensemble.N)

    with stage("integrate"):
        trajs = run_experiments(model, params, x0, u0)

    with stage("extract"):
        t_meas, _ = measurement_times(model.T, cfg.ensemble.N_e)
        ms, samples = extract_strains(model, trajs, t_meas)
        defect = criticality_defect(model, ms)

    with stage("grid"):
        grid = adaptive_grid(samples, K, cfg.spacing_floor())

    with stage("assemble"):
        system = assemble(model, ms, grid, cfg.recon.y_mode)
        if cfg.recon.export_system:
            export_system(system, os.path.join(outdir, "system_coo.csv"), os.path.join(outdir, "system_Y.csv"))

    with stage("solve"):
        fn = solve_constrained_ls(system, cfg.solve_config())
        sup, l2, scale = reconstruction_error(fn, model, samples, cfg.recon.band)
        band = band_limits(samples, cfg.recon.band)

    replays = {}
    replay_summary = []
    if cfg.replay.enabled:
        with stage("replay"):
            learned = learned_model(model, fn)
            for seed in cfg.replay.seeds:
                xr, ur = sample_initial(model, initial_law(cfg, model, seed), 1)
                true = replay(model, params, xr[0], ur[0])
                hat = replay(learned, params, xr[0], ur[0])
                err_max, err_l1 = trajectory_error(true, hat)
                dist = support_distance(model, hat, samples)
                diam = float(np.max(true.states) - np.min(true.states))
                replays[seed] = (true, hat)
                replay_summary.append(
                    {
                        "seed": int(seed),
                        "max_error": err_max,
                        "l1_error": err_l1,
                        "state_diameter": diam,
                        "support_distance": dist,
                    }
                )

    with stage("export"):
        _export(outdir, cfg, model, trajs, ms, samples, grid, fn, replays, write_trajectories)

    manifest = {
        "package_version": __version__,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "preset_parameters": parameter_table(cfg),
        "config": {k: _jsonable(v) for k, v in _flat(cfg).items()},
        "seeds": {"ensemble": cfg.ensemble.seed, "replay": list(cfg.replay.seeds) if cfg.replay.enabled else []},
        "timings": {k: round(v, 6) for k, v in stage.timings.items()},
        "total_seconds": round(time.perf_counter() - t_start, 6),
        "flow": {
            "step": params.h,
            "n_steps": params.n_steps,
            "max_newton_residual": max(t.max_residual for t in trajs),
            "mean_dissipation": float(np.mean([dissipation(model, t) for t in trajs])),
            "criticality_defect": defect,
        },
        "grid": {
            "K_requested": K,
            "K": grid.K,
            "R": samples.R,
            "min": float(grid.nodes[0]),
            "max": float(grid.nodes[-1]),
        },
        "assembly": {
            "rows": system.M.shape[0],
            "cols": system.M.shape[1],
            "nnz": int(system.M.nnz),
            "max_row_nnz": int(np.max(np.diff(system.M.indptr))),
            "clamped": system.clamped,
            "y_mode": system.y_mode,
        },
        "solver": {k: _jsonable(v) for k, v in fn.info.items()},
        "reconstruction": {
            "band": list(band),
            "band_quantiles": list(cfg.recon.band),
            "sup_error": sup,
            "l2_error": l2,
            "scale": scale,
            "relative_sup_error": sup / scale if scale > 0 else float("inf"),
            "relative_l2_error": l2 / scale if scale > 0 else float("inf"),
        },
        "replay": replay_summary,
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg.output.figures:
        from .plotting import export_plots

        export_plots(outdir)
    log.info("run written to %s (sup error %.3g, %.2f s)", outdir, sup, manifest["total_seconds"])
    return RunReport(outdir, manifest, fn, samples, ms, trajs, replays)


def _flat(cfg):
    from .config import to_flat

    return to_flat(cfg)


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _export(outdir, cfg, model, trajs, ms, samples, grid, fn, replays, write_trajectories):
    write_csv(os.path.join(outdir, "strains.csv"), ["value", "weight"], [samples.values, samples.weights])
    write_csv(os.path.join(outdir, "grid.csv"), ["node"], [grid.nodes])
    edges, counts = samples.histogram(N_HIST_BINS)
    write_csv(os.path.join(outdir, "histogram.csv"), ["left", "right", "weight"], [edges[:-1], edges[1:], counts])

    p = grid.nodes
    a_hat = integrate_aprime(fn)(p)
    a_true = model.potential.value(p) - float(model.potential.value(0.0))
    write_csv(
        os.path.join(outdir, "result.csv"),
        ["node", "aprime_hat", "aprime_true", "a_hat", "a_true"],
        [p, fn.coeffs, model.potential.d1(p), a_hat, a_true],
    )

    if write_trajectories:
        tdir = os.path.join(outdir, "trajectories")
        os.makedirs(tdir, exist_ok=True)
        header = ["t"] + _state_header("x", model.d)
        for i, tr in enumerate(trajs):
            base = os.path.join(tdir, f"exp_{i:04d}")
            write_csv(base + ".csv", header, [ms.times, *ms.states[i].T])
            with open(base + ".json", "w") as fh:
                json.dump(
                    {"epsilon": tr.epsilon, "u0": tr.control.tolist(), "seed": cfg.ensemble.seed, "index": i},
                    fh,
                    sort_keys=True,
                )
                fh.write("\n")

    for seed, (true, hat) in replays.items():
        write_replay_csv(os.path.join(outdir, f"replay_{seed}.csv"), true, hat, ms.times)


def write_replay_csv(path, true, hat, times=None):
    """Paired ``t, x_1..x_d, xhat_1..xhat_d`` rows, at ``times`` if given."""
    if times is None:
        idx = np.arange(true.times.size)
    else:
        idx = snap_indices(true.times, np.asarray(times, dtype=float))
    d = true.d
    header = ["t"] + _state_header("x", d) + _state_header("xhat", d)
    write_csv(path, header, [true.times[idx], *true.states[idx].T, *hat.states[idx].T])


# ---------------------------------------------------------------------------
# presets and reloading
# ---------------------------------------------------------------------------


def run_preset(name: str, root: str | None = None, **kwargs):
    """Run every member of a preset; sweeps get one subdirectory per value.

    Returns a list of ``(label, RunReport)``. Sweeps also write
    ``summary.csv`` with the swept value and the reconstruction errors.
    """
    members = get_preset(name)
    root = root or os.environ.get("LEARN_OUTPUT_ROOT", "runs")
    base = os.path.join(root, name)
    out = []
    for label, cfg in members:
        outdir = base if label is None else os.path.join(base, label)
        out.append((label, run_pipeline(cfg, outdir, **kwargs)))
    if len(out) > 1:
        _write_summary(os.path.join(base, "summary.csv"), out)
    return out


def _write_summary(path, reports):
    with open(path, "w") as fh:
        fh.write("member,sup_error,l2_error,scale,K,iterations\n")
        for label, rep in reports:
            r = rep.manifest["reconstruction"]
            fh.write(
                f"{label},{r['sup_error']:.17g},{r['l2_error']:.17g},{r['scale']:.17g},"
                f"{rep.manifest['grid']['K']},{rep.manifest['solver']['iterations']}\n"
            )


def load_run(run_dir: str):
    """Reload ``(config, model, learned function)`` from a run directory."""
    from .config import load_config
    from .ensemble import Grid
    from .recon import PwLinearFn

    cfg = load_config(os.path.join(run_dir, "config.ini"))
    model = cfg.chain_model()
    _, res = read_csv(os.path.join(run_dir, "result.csv"))
    fn = PwLinearFn(Grid(res[:, 0]), res[:, 1])
    return cfg, model, fn


def replay_from_run(run_dir: str, x0, u0=None, out_path=None):
    """Replay from ``x0`` with the potential learned in ``run_dir``.

    ``u0`` defaults to the equilibrium control of the true energy at ``x0``.
    Returns ``(true, learned, (max error, L1 error))``.
    """
    cfg, model, fn = load_run(run_dir)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.d,):
        raise ValueError(f"x0 needs {model.d} entries, got {x0.size}")
    u0 = grad_x_energy(model, 0.0, x0) if u0 is None else np.asarray(u0, dtype=float)
    params = cfg.flow_params()
    true = replay(model, params, x0, u0)
    hat = replay(learned_model(model, fn), params, x0, u0)
    errs = trajectory_error(true, hat)
    if out_path is not None:
        t_meas, _ = measurement_times(model.T, cfg.ensemble.N_e)
        write_replay_csv(out_path, true, hat, t_meas)
    return true, hat, errs
