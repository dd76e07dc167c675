"""Experiment configuration: a YAML document validated by pydantic models.

Unknown keys are rejected and ``master_seed`` is mandatory.  Validation
errors are reported with the offending field path and, when the document
came from text, its line number.
"""

import hashlib
import json
import math
from importlib import resources
from typing import List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DriftSpec(_Strict):
    potential: Literal["quadratic", "quartic", "linear"] = "quadratic"
    strength: float = 1.0
    center: Optional[List[float]] = None
    direction: Optional[List[float]] = None


class ManifoldSpec(_Strict):
    kind: Literal["sphere", "cap", "halfspace", "disk"]
    dim: int = Field(2, ge=1, le=8)
    theta0: Optional[float] = None
    drift: Optional[DriftSpec] = None
    disk: Literal["stereographic", "gaussian_bump"] = "stereographic"
    amplitude: float = 0.3
    width: float = 1.0

    @field_validator("theta0")
    @classmethod
    def _theta(cls, v):
        if v is not None and not (0.0 < v < math.pi):
            raise ValueError("theta0 must lie in (0, pi)")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if self.kind == "cap" and self.theta0 is None:
            raise ValueError("a cap needs theta0")
        if self.kind == "disk" and self.dim != 2:
            raise ValueError("disk manifolds are 2-dimensional")
        return self


class ProbeSpec(_Strict):
    point: Optional[List[float]] = None
    boundary_longitude: Optional[float] = None
    test_function: Literal["coordinate", "windowed", "chart_linear"] = "coordinate"
    axis: int = -1
    direction: Optional[List[float]] = None
    window: float = 3.0


class RunSpec(_Strict):
    T: float = Field(0.5, gt=0)
    schedule: Optional[List[float]] = None
    n_steps: int = Field(32, ge=1)
    n_paths: int = Field(20000, ge=2)
    workers: Optional[int] = Field(None, ge=1)
    antithetic: bool = False
    dt_max: float = Field(1e-2, gt=0)
    p: float = Field(2.0, ge=1, le=2)
    grad_method: Literal["bismut", "fd"] = "bismut"
    dump_paths: int = Field(100, ge=0)


class BoundsSpec(_Strict):
    K: Union[float, Literal["true"]] = "true"
    sigma: Union[float, Literal["true"]] = "true"
    slack: float = Field(0.0, ge=0)


class CutoffSpec(_Strict):
    r_in: float = Field(gt=0)
    r_out: float = Field(gt=0)


class FunctionalSpec(_Strict):
    kind: Literal["terminal", "linear", "product"] = "terminal"
    times: Optional[List[float]] = None
    coefs: Optional[List[float]] = None
    axis: int = -1
    axis2: int = -1
    shift: float = 0.0
    cutoff: Optional[CutoffSpec] = None


CHECK_NAMES = (
    "gradient-1", "gradient-2", "pathspace-gradient", "poincare", "log-sobolev",
    "truncated-poincare", "truncated-log-sobolev", "q-bound", "bismut-fd", "mu-interior", "mu-boundary",
    "isometry",
)


class CheckSpec(_Strict):
    name: Literal[CHECK_NAMES]
    label: Optional[str] = None
    T: Optional[float] = Field(None, gt=0)
    p: float = Field(2.0, ge=1, le=2)
    q: float = Field(2.0, ge=1, le=2)
    t: Optional[float] = None
    t0: float = 0.0
    t1: Optional[float] = None
    eps: Optional[float] = None
    bounds: BoundsSpec = BoundsSpec()
    functional: FunctionalSpec = FunctionalSpec()
    n_paths: Optional[int] = Field(None, ge=2)
    n_steps: Optional[int] = Field(None, ge=1)
    n_inner: int = Field(64, ge=2)
    n_outer: int = Field(2000, ge=2)
    n_nodes: int = Field(9, ge=2)
    use_oracle: bool = True
    cross_check: bool = False
    negative_control: bool = False


class ConformalSpec(_Strict):
    factor: Literal["radial", "bump", "compact_dip", "gaussian"] = "radial"
    center: Optional[List[float]] = None
    r_in: float = 1.2
    r_out: float = 2.6
    amplitude: float = 0.3
    width: float = 1.0
    c: float = 1.0
    variant: Literal["classical", "printed", "squared"] = "classical"
    exit_threshold: float = Field(1e-3, gt=0)
    grid_points: int = Field(0, ge=0)


class OutputSpec(_Strict):
    dir: str = "ricprobe-out"
    formats: List[Literal["json", "csv"]] = ["json", "csv"]


class ExperimentConfig(_Strict):
    master_seed: int = Field(ge=0, lt=2**64)
    manifold: ManifoldSpec
    probe: ProbeSpec = ProbeSpec()
    run: RunSpec = RunSpec()
    checks: List[CheckSpec] = []
    conformal: Optional[ConformalSpec] = None
    output: OutputSpec = OutputSpec()

    def digest(self):
        """SHA-256 of the canonical JSON form."""
        s = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(s.encode()).hexdigest()


# -- loading -----------------------------------------------------------------


def _line_index(text):
    """Map key paths of a YAML document to 1-based line numbers."""
    out = {}

    def walk(node, path):
        out[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = k.value
                out[path + (key,)] = k.start_mark.line + 1
                walk(v, path + (key,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return out
    if root is not None:
        walk(root, ())
    return out


def _format_errors(err, lines):
    msgs = []
    for e in err.errors():
        loc = tuple(e["loc"])
        path = ".".join(str(p) for p in loc) or "<root>"
        # pydantic appends union/literal tags to loc; trim until a known path
        line = None
        for k in range(len(loc), -1, -1):
            if loc[:k] in lines:
                line = lines[loc[:k]]
                break
        where = f"line {line}: " if line is not None else ""
        msgs.append(f"{where}{path}: {e['msg']}")
    return "\n".join(msgs)


def parse_config(text, source="<config>"):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: YAML error: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a mapping at the top level")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(f"{source}: invalid configuration\n{_format_errors(err, _line_index(text))}") from None


def load_config(path):
    """Load a config file, or a shipped preset given as ``preset:NAME``."""
    path = str(path)
    if path.startswith("preset:"):
        return parse_config(preset_text(path[7:]), path)
    with open(path) as fh:
        return parse_config(fh.read(), path)


def preset_names():
    d = resources.files("ricprobe") / "presets"
    return sorted(p.name[:-5] for p in d.iterdir() if p.name.endswith(".yaml"))


def preset_text(name):
    p = resources.files("ricprobe") / "presets" / f"{name}.yaml"
    if not p.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return p.read_text()


# -- builders ----------------------------------------------------------------


def build_manifold(spec):
    from .geometry import ConformalDisk, HalfSpace, RadialDrift, Sphere, SphericalCap

    drift = None
    if spec.drift is not None:
        d = spec.drift
        drift = RadialDrift(d.potential, d.strength,
                            None if d.center is None else tuple(d.center),
                            None if d.direction is None else tuple(d.direction))
    if spec.kind == "sphere":
        return Sphere(spec.dim, drift)
    if spec.kind == "cap":
        return SphericalCap(spec.theta0, spec.dim, drift)
    if spec.kind == "halfspace":
        return HalfSpace(spec.dim, drift)
    if spec.disk == "stereographic":
        M = ConformalDisk.stereographic_sphere()
    else:
        M = ConformalDisk.gaussian_bump(spec.amplitude, spec.width)
    M.drift = drift
    return M


def build_probe(M, spec):
    if spec.point is not None:
        x = np.asarray(spec.point, dtype=float)
        if x.shape != (M.ambient,):
            raise ConfigError(f"probe.point: expected {M.ambient} coordinates, got {x.size}")
        return M.check_point(x)
    if spec.boundary_longitude is not None:
        if not hasattr(M, "boundary_probe"):
            raise ConfigError("probe.boundary_longitude needs a cap")
        return M.boundary_probe(spec.boundary_longitude)
    if M.kind in ("sphere",):
        x = np.zeros(M.ambient)
        x[0] = 1.0
        return x
    if M.kind == "cap":
        return M.boundary_probe(0.0)
    if M.kind == "disk":
        return np.zeros(2)
    raise ConfigError("probe.point is required for this manifold")


def build_test_function(M, x, spec):
    from .estimators import chart_linear, sphere_coordinate, windowed_coordinate

    if spec.test_function == "coordinate":
        return sphere_coordinate(M, x, spec.axis)
    if spec.test_function == "windowed":
        return windowed_coordinate(M, x, spec.axis, spec.window)
    return chart_linear(M, x, tuple(spec.direction or (1.0, 0.0)))


def build_bounds(M, spec):
    from .bounds import Bounds
    from .geometry import ricci_z_norm, second_form_norm

    if spec.K == "true":
        def K(x):
            return ricci_z_norm(M, x) + spec.slack
    else:
        K = float(spec.K) + spec.slack
    if spec.sigma == "true":
        def sigma(b):
            return second_form_norm(M, b) + spec.slack
    else:
        sigma = float(spec.sigma) + spec.slack
    if not M.has_boundary and spec.sigma == "true":
        sigma = 0.0
    return Bounds(K, sigma)


def build_functional(M, spec, T, tf=None):
    """A cylindric functional; sphere bases get exact conditional oracles."""
    from .geometry import Sphere
    from .pathspace import (
        CylindricFunction,
        Cutoff,
        sphere_coordinate_functional,
        sphere_linear_functional,
        sphere_product_functional,
    )

    times = tuple(spec.times) if spec.times else (T,)
    sphere = isinstance(M, Sphere)
    if spec.kind == "terminal":
        if sphere:
            F = sphere_coordinate_functional(M.dim, times[-1], spec.axis, spec.shift)
        else:
            if tf is None:
                raise ConfigError("a terminal functional on this manifold needs a probe test function")
            F = CylindricFunction.terminal(times[-1], tf.f, tf.grad, description=f"{tf.name}(gamma_T)")
            if spec.shift:
                F = F.shifted(spec.shift)
    elif spec.kind == "linear":
        if not sphere:
            raise ConfigError("linear functionals are defined on spheres")
        coefs = spec.coefs or [1.0] * len(times)
        if len(coefs) != len(times):
            raise ConfigError("functional.coefs must match functional.times")
        F = sphere_linear_functional(M.dim, times, coefs, spec.axis)
        if spec.shift:
            F = F.shifted(spec.shift)
    else:
        if not sphere or len(times) != 2:
            raise ConfigError("product functionals take two slots on a sphere")
        F = sphere_product_functional(times[0], times[1], spec.axis, spec.axis2)
        if spec.shift:
            F = F.shifted(spec.shift)
    if M.kind != "sphere":
        # the closed-form conditional laws hold on the full sphere only
        F.oracle = None
    if spec.cutoff is not None:
        F.cutoff = Cutoff(spec.cutoff.r_in, spec.cutoff.r_out)
    return F


def build_factor(M, x, spec):
    from .conformal import ConformalFactor

    center = x if spec.center is None else np.asarray(spec.center, dtype=float)
    if spec.factor == "radial":
        return ConformalFactor.radial(M, center, spec.r_in, spec.r_out)
    if spec.factor == "bump":
        return ConformalFactor.bump(center, spec.amplitude, spec.width)
    if spec.factor == "compact_dip":
        return ConformalFactor.compact_dip(center, spec.amplitude, spec.width)
    return ConformalFactor.gaussian(spec.c, center)
