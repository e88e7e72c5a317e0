"""Named experiment presets: the published figure parameter tables plus desk-scale runs.

A preset resolves to a list of ``(label, ExperimentConfig)`` members. Single
runs have one member labelled ``None``; sweeps have one member per value.
"""

from .config import EnsembleConfig, ExperimentConfig, ModelConfig, OutputConfig, ReconConfig

# boundary ramp that stretches the chain from mean strain -1.2 to +1.2, so the
# double-well experiments cross both wells
STRETCH = 1.2
REPLAY_SEEDS = (101,)


def _stretch_ramp(d: int) -> str:
    n = d + 1
    return f"ramp:{-STRETCH * n:.10g},{2 * STRETCH * n:.10g}"


def _quadratic(d, N, N_e, K, name, **recon):
    return ExperimentConfig(
        model=ModelConfig(d=d, potential="quadratic", potential_params=(1.0,)),
        ensemble=EnsembleConfig(N=N, N_e=N_e),
        recon=ReconConfig(K=str(K), **recon),
        output=OutputConfig(name=name),
    ).check()


def _doublewell(d, N, N_e, K, name, **recon):
    return ExperimentConfig(
        model=ModelConfig(d=d, potential="doublewell", potential_params=(1.0, 0.5), f2=_stretch_ramp(d)),
        ensemble=EnsembleConfig(N=N, N_e=N_e),
        recon=ReconConfig(K=str(K), **recon),
        output=OutputConfig(name=name),
    ).check()


def _with_replay(cfg: ExperimentConfig) -> ExperimentConfig:
    return cfg.replace(replay__enabled=True, replay__seeds=REPLAY_SEEDS)


def _sweep(base: ExperimentConfig, key: str, values, label: str):
    return [(f"{label}={v}", base.replace(**{key: v})) for v in values]


def quadratic_fig1():
    return [(None, _quadratic(20, 60, 2000, "4N", "quadratic-fig1"))]


def vary_measurements_fig2():
    base = _doublewell(20, 30, 100, 100, "vary-measurements-fig2")
    return _sweep(base, "ensemble__N_e", (2, 5, 10, 100), "N_e")


def vary_N_adaptive_fig3():
    base = _doublewell(20, 60, 55, "4N", "vary-N-adaptive-fig3")
    return _sweep(base, "ensemble__N", (1, 5, 20, 60), "N")


def vary_N_fixed_fig4():
    base = _doublewell(20, 60, 55, 300, "vary-N-fixed-fig4")
    return _sweep(base, "ensemble__N", (1, 5, 20, 60), "N")


def constraint_M2_fig5():
    base = _doublewell(20, 30, 1000, 100, "constraint-M2-fig5")
    return _sweep(base, "recon__M2", (2.0, 5.0, 20.0, 1000.0), "M2")


def constraint_M1_fig6():
    base = _doublewell(20, 30, 1000, 100, "constraint-M1-fig6")
    return _sweep(base, "recon__M1", (2.0, 5.0, 10.0, 100.0), "M1")


def replay_fig7():
    quad = _with_replay(_quadratic(20, 60, 2000, "4N", "replay-fig7"))
    nonlin = _with_replay(_doublewell(20, 60, 55, "4N", "replay-fig7"))
    return [("quadratic", quad), ("doublewell", nonlin)]


def desk_quadratic():
    return [(None, _with_replay(_quadratic(10, 30, 200, 80, "desk-quadratic")))]


def desk_doublewell():
    return [(None, _with_replay(_doublewell(10, 30, 200, 80, "desk-doublewell")))]


PRESETS = {
    "quadratic-fig1": quadratic_fig1,
    "vary-measurements-fig2": vary_measurements_fig2,
    "vary-N-adaptive-fig3": vary_N_adaptive_fig3,
    "vary-N-fixed-fig4": vary_N_fixed_fig4,
    "constraint-M2-fig5": constraint_M2_fig5,
    "constraint-M1-fig6": constraint_M1_fig6,
    "replay-fig7": replay_fig7,
    "desk-quadratic": desk_quadratic,
    "desk-doublewell": desk_doublewell,
}


class UnknownPresetError(KeyError):
    def __str__(self):
        return self.args[0]


def get_preset(name: str):
    """Members ``[(label, config), ...]`` of a named preset."""
    try:
        return PRESETS[name]()
    except KeyError:
        raise UnknownPresetError(f"unknown preset {name!r}; choose one of: {', '.join(PRESETS)}") from None


def preset_config(name: str, label=None) -> ExperimentConfig:
    """Config of one preset member (the first one when ``label`` is None)."""
    members = get_preset(name)
    if label is None:
        return members[0][1]
    for lab, cfg in members:
        if lab == label:
            return cfg
    raise UnknownPresetError(f"preset {name!r} has no member {label!r}; members: {[m[0] for m in members]}")

