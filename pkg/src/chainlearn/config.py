"""
Experiment configuration in a flat ``section.key = value`` text format.

Example::

    # quadratic chain, desk scale
    model.d = 10
    model.f2 = ramp:1.0,1.0
    ensemble.N = 30
    ensemble.N_e = 200
    recon.K = 80

Unknown keys, missing required keys and invalid values raise
:class:`ConfigError` naming the key (and line, when read from a file).
"""

import dataclasses
import os
import re
from dataclasses import dataclass, field

from .chain import ChainModel, Profile, TablePotential, make_potential
from .flow import METHODS, FlowParams
from .recon import Y_MODES, SolveConfig

OUTPUT_ROOT_ENV = "LEARN_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        where = f"{key}" if key else ""
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}" if where else message)
        self.key = key
        self.line = line


@dataclass
class ModelConfig:
    d: int
    T: float = 1.0
    potential: str = "quadratic"
    potential_params: tuple = ()
    potential_table: str = ""
    f1: str = "constant:0.0"
    f2: str = "ramp:1.0,1.0"

    def check(self):
        if self.d < 1:
            raise ConfigError("must be a positive integer", "model.d")
        if not self.T > 0:
            raise ConfigError("must be positive", "model.T")
        if self.potential not in ("quadratic", "doublewell", "table"):
            raise ConfigError("must be quadratic, doublewell or table", "model.potential")
        if self.potential == "table" and not self.potential_table:
            raise ConfigError("table potential needs a file", "model.potential_table")
        for key in ("f1", "f2"):
            try:
                Profile.parse(getattr(self, key))
            except ValueError as exc:
                raise ConfigError(str(exc), f"model.{key}") from None


@dataclass
class FlowConfig:
    epsilon: float = 1e-3
    step: str = "auto"
    method: str = "implicit-euler"
    newton_tol: float = 1e-10
    newton_max_iter: int = 50

    def check(self):
        if not self.epsilon > 0:
            raise ConfigError("must be positive", "flow.epsilon")
        if self.step != "auto":
            try:
                h = float(self.step)
            except ValueError:
                raise ConfigError("must be 'auto' or a number", "flow.step") from None
            if not 0 < h <= self.epsilon / 5 * (1 + 1e-12):
                raise ConfigError("must lie in (0, epsilon/5]", "flow.step")
        if self.method not in METHODS:
            raise ConfigError(f"must be one of {METHODS}", "flow.method")
        if not self.newton_tol > 0:
            raise ConfigError("must be positive", "flow.newton_tol")
        if self.newton_max_iter < 1:
            raise ConfigError("must be >= 1", "flow.newton_max_iter")


@dataclass
class EnsembleConfig:
    N: int
    N_e: int
    seed: int = 0
    sigma: float = 0.1
    mean: str = "interp"

    def check(self):
        if self.N < 1:
            raise ConfigError("must be >= 1", "ensemble.N")
        if self.N_e < 2:
            raise ConfigError("must be >= 2", "ensemble.N_e")
        if self.sigma < 0:
            raise ConfigError("must be >= 0", "ensemble.sigma")
        if self.mean != "interp":
            try:
                [float(v) for v in self.mean.split(",")]
            except ValueError:
                raise ConfigError("must be 'interp' or a comma-separated vector", "ensemble.mean") from None


@dataclass
class ReconConfig:
    K: str
    M1: float = 1000.0
    M2: float = 1000.0
    rho: float = 1.0
    tol_primal: float = 1e-8
    tol_dual: float = 1e-8
    max_iter: int = 50000
    y_mode: str = "exact"
    band: tuple = (0.1, 0.9)
    spacing_floor: str = "auto"
    export_system: bool = False

    def check(self):
        try:
            self.nodes(1)
        except ValueError:
            raise ConfigError("must be an integer or a rule like 4N", "recon.K") from None
        for key in ("M1", "M2", "rho", "tol_primal", "tol_dual"):
            if not getattr(self, key) > 0:
                raise ConfigError("must be positive", f"recon.{key}")
        if self.max_iter < 1:
            raise ConfigError("must be >= 1", "recon.max_iter")
        if self.y_mode not in Y_MODES:
            raise ConfigError(f"must be one of {Y_MODES}", "recon.y_mode")
        if len(self.band) != 2 or not 0 < self.band[0] < self.band[1] < 1:
            raise ConfigError("must be two quantiles 0 < lo < hi < 1", "recon.band")
        if self.spacing_floor != "auto":
            try:
                if not float(self.spacing_floor) > 0:
                    raise ValueError
            except ValueError:
                raise ConfigError("must be 'auto' or a positive number", "recon.spacing_floor") from None

    def nodes(self, N: int) -> int:
        """Resolve ``K`` (``80``) or a ``D(N)`` rule (``4N``) to a node count."""
        m = re.fullmatch(r"\s*(\d+)\s*(N?)\s*", self.K)
        if not m:
            raise ValueError(f"bad node rule {self.K!r}")
        k = int(m.group(1)) * (N if m.group(2) else 1)
        if k < 3:
            raise ValueError("node count must be >= 3")
        return k


@dataclass
class ReplayConfig:
    enabled: bool = False
    seeds: tuple = ()

    def check(self):
        pass


@dataclass
class OutputConfig:
    name: str = "run"
    dir: str = ""
    figures: bool = False

    def check(self):
        if not self.name or "/" in self.name:
            raise ConfigError("must be a non-empty name without '/'", "output.name")


SECTIONS = {
    "model": ModelConfig,
    "flow": FlowConfig,
    "ensemble": EnsembleConfig,
    "recon": ReconConfig,
    "replay": ReplayConfig,
    "output": OutputConfig,
}

# element types of tuple-valued fields
_TUPLE_ITEMS = {
    ("model", "potential_params"): float,
    ("recon", "band"): float,
    ("replay", "seeds"): int,
}


@dataclass
class ExperimentConfig:
    model: ModelConfig
    ensemble: EnsembleConfig
    recon: ReconConfig
    flow: FlowConfig = field(default_factory=FlowConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def check(self):
        for name in SECTIONS:
            getattr(self, name).check()
        try:
            self.recon.nodes(self.ensemble.N)
        except ValueError as exc:
            raise ConfigError(str(exc), "recon.K") from None
        if self.ensemble.mean != "interp" and len(self.ensemble.mean.split(",")) != self.model.d:
            raise ConfigError(f"needs {self.model.d} entries", "ensemble.mean")
        return self

    # -- conversions -------------------------------------------------------

    def chain_model(self) -> ChainModel:
        m = self.model
        if m.potential == "table":
            potential = load_table_potential(m.potential_table)
        else:
            potential = make_potential(m.potential, m.potential_params)
        return ChainModel(
            d=m.d,
            potential=potential,
            f1=Profile.parse(m.f1),
            f2=Profile.parse(m.f2),
            T=m.T,
            M1=self.recon.M1,
            M2=self.recon.M2,
        )

    def flow_params(self) -> FlowParams:
        f = self.flow
        return FlowParams(
            epsilon=f.epsilon,
            T=self.model.T,
            step=None if f.step == "auto" else float(f.step),
            method=f.method,
            newton_tol=f.newton_tol,
            newton_max_iter=f.newton_max_iter,
        )

    def solve_config(self) -> SolveConfig:
        r = self.recon
        return SolveConfig(
            M1=r.M1, M2=r.M2, rho=r.rho, tol_primal=r.tol_primal, tol_dual=r.tol_dual, max_iter=r.max_iter
        )

    def spacing_floor(self):
        return None if self.recon.spacing_floor == "auto" else float(self.recon.spacing_floor)

    def output_dir(self) -> str:
        if self.output.dir:
            return self.output.dir
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        return os.path.join(root, self.output.name)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with flat ``section__key=value`` overrides."""
        data = to_flat(self)
        for k, v in changes.items():
            data[k.replace("__", ".", 1)] = v
        return from_flat(data)

    def to_text(self) -> str:
        lines = []
        for key, value in to_flat(self).items():
            lines.append(f"{key} = {format_value(value)}")
        return "\n".join(lines) + "\n"


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _convert(section, name, ftype, raw: str):
    if ftype in ("int", int):
        return int(raw)
    if ftype in ("float", float):
        return float(raw)
    if ftype in ("bool", bool):
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if ftype in ("tuple", tuple):
        item = _TUPLE_ITEMS[(section, name)]
        return tuple(item(v) for v in raw.split(",") if v.strip())
    return raw


def to_flat(cfg: ExperimentConfig) -> dict:
    out = {}
    for section in SECTIONS:
        block = getattr(cfg, section)
        for f in dataclasses.fields(block):
            out[f"{section}.{f.name}"] = getattr(block, f.name)
    return out


def from_flat(data: dict, lines: dict | None = None) -> ExperimentConfig:
    """Build and validate a config from ``{"section.key": value}``.

    String values are converted according to the field type.
    """
    lines = lines or {}
    parts = {s: {} for s in SECTIONS}
    for key, value in data.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError("unknown key", key, lines.get(key))
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
        if name not in fields:
            raise ConfigError("unknown key", key, lines.get(key))
        if isinstance(value, str):
            try:
                value = _convert(section, name, fields[name].type, value.strip())
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"bad value ({exc})", key, lines.get(key)) from None
        parts[section][name] = value
    blocks = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                if f.name not in parts[section]:
                    raise ConfigError("required key missing", f"{section}.{f.name}")
        blocks[section] = cls(**parts[section])
    try:
        return ExperimentConfig(**blocks).check()
    except ConfigError as exc:
        if exc.line is None and exc.key in lines:
            raise ConfigError(str(exc).split(": ", 1)[-1], exc.key, lines[exc.key]) from None
        raise


def parse_config(text: str) -> ExperimentConfig:
    data, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", line=lineno)
        if key in data:
            raise ConfigError("duplicate key", key, lineno)
        data[key] = value.strip()
        lines[key] = lineno
    return from_flat(data, lines)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        fh.write(cfg.to_text())


def load_table_potential(path) -> TablePotential:
    """Read a ``node,aprime`` CSV (header optional) as a table potential."""
    import numpy as np

    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line[0].isalpha():
                continue
            a, b = line.split(",")[:2]
            rows.append((float(a), float(b)))
    arr = np.array(rows)
    return TablePotential(arr[:, 0], arr[:, 1])
