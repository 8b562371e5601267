"""Run configuration: a TOML file with [model], [noise], [init], [experiment],
[output] and optional [scales] tables.

Example::

    [model]
    p = 1
    a = [1.0, 0.5]
    b = [1.0, 0.5]

    [noise]
    family = "gaussian_pair"
    sigma2 = 1.0
    rho = 0.3

    [experiment]
    n = 10
    n_min = 6
    replicates = 200
    master_seed = 12345
"""

from __future__ import annotations

import re
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import BarModel, InitSpec, UnstableModel, build_model
from .noise import NoiseModel, make_noise


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    n: int = 10
    n_min: Optional[int] = None
    replicates: int = 200
    master_seed: int = 0
    alpha: float = 0.25
    case: Optional[int] = None
    deltas: Optional[tuple] = None
    xs: Optional[tuple] = None
    workers: int = 1
    record_noise: bool = True
    cov_tol: float = 0.2
    isometry_tol: float = 0.1

    @property
    def ns(self) -> tuple:
        lo = self.n if self.n_min is None else self.n_min
        return tuple(range(lo, self.n + 1))


@dataclass(frozen=True)
class ScalesSpec:
    cases: tuple = (1, 2)
    betas: tuple = (0.4, 0.7071, 0.8)
    alphas: tuple = (0.1, 0.25, 0.4)


@dataclass(frozen=True)
class RunConfig:
    model: dict
    noise: dict
    init: InitSpec = field(default_factory=InitSpec)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    output_dir: str = "out"
    formats: tuple = ("json", "csv")
    scales: Optional[ScalesSpec] = None

    def build_model(self) -> BarModel:
        m = self.model
        return build_model(m["p"], m["a"], m["b"], norm=m.get("norm", "spectral"))

    def build_noise(self) -> Optional[NoiseModel]:
        """The configured noise law, or None for the deterministic recursion."""
        nz = dict(self.noise)
        if nz["family"] == "none":
            return None
        return make_noise(nz.pop("family"), nz.pop("sigma2"), nz.pop("rho", 0.0), **nz)

    @property
    def case(self) -> int:
        if self.experiment.case is not None:
            return self.experiment.case
        return 2 if self.noise.get("family") == "skew_switching_pair" else 1

    def to_dict(self) -> dict:
        """Experiment provenance; excludes the worker count and output location."""
        exp = asdict(self.experiment)
        exp.pop("workers")
        for key in ("deltas", "xs"):
            if exp[key] is not None:
                exp[key] = list(exp[key])
        out = {
            "model": {"p": self.model["p"], "a": list(self.model["a"]), "b": list(self.model["b"]),
                      "norm": self.model.get("norm", "spectral")},
            "noise": dict(self.noise),
            "init": self.init.to_dict(),
            "experiment": exp,
        }
        if self.scales is not None:
            out["scales"] = {k: list(v) for k, v in asdict(self.scales).items()}
        return out


def _line_of(text: Optional[str], table: str, key: str) -> str:
    if not text:
        return ""
    in_table = table == ""
    for i, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("["):
            in_table = stripped.strip("[] ") == table
            continue
        if in_table and re.match(rf"{re.escape(key)}\s*=", stripped):
            return f" (line {i})"
    return ""


def _fail(msg: str, text: Optional[str], table: str, key: str):
    raise ConfigError(f"[{table}] {key}: {msg}{_line_of(text, table, key)}")


_EXPERIMENT_KEYS = {f for f in ExperimentSpec.__dataclass_fields__}


def from_dict(data: dict, text: Optional[str] = None) -> RunConfig:
    """Validate a parsed configuration. ``text`` is the raw file, for line numbers."""
    if not isinstance(data, dict) or not data:
        raise ConfigError("empty configuration")
    unknown = set(data) - {"model", "noise", "init", "experiment", "output", "scales"}
    if unknown:
        raise ConfigError(f"unknown top-level tables: {sorted(unknown)}")
    if "model" not in data:
        raise ConfigError("missing [model] table")

    model = dict(data["model"])
    for key in ("p", "a", "b"):
        if key not in model:
            _fail("missing", text, "model", key)
    try:
        built = build_model(model["p"], model["a"], model["b"], norm=model.get("norm", "spectral"))
    except UnstableModel as exc:
        # a model error, not a syntax error: keep its type for the exit code
        raise UnstableModel(f"[model] {exc}{_line_of(text, 'model', 'a')}") from exc
    except ValueError as exc:
        _fail(str(exc), text, "model", "p")
    model = {"p": built.p, "a": built.a.tolist(), "b": built.b.tolist(), "norm": built.norm}

    noise = dict(data.get("noise", {"family": "gaussian_pair", "sigma2": 1.0, "rho": 0.0}))
    noise.setdefault("family", "gaussian_pair")
    if noise["family"] == "none":
        if set(noise) != {"family"}:
            _fail("the 'none' family takes no parameters", text, "noise", "family")
        noise = {"family": "none"}
        return _finish(data, text, built, model, noise)
    noise.setdefault("rho", 0.0)
    if "sigma2" not in noise:
        _fail("missing", text, "noise", "sigma2")
    if not abs(noise["rho"]) < noise["sigma2"]:
        _fail(f"need |rho| < sigma2, got rho={noise['rho']}, sigma2={noise['sigma2']}", text, "noise", "rho")
    try:
        nz = dict(noise)
        make_noise(nz.pop("family"), nz.pop("sigma2"), nz.pop("rho"), **nz)
    except (ValueError, TypeError) as exc:
        _fail(str(exc), text, "noise", "family")
    return _finish(data, text, built, model, noise)


def _finish(data: dict, text: Optional[str], built: BarModel, model: dict, noise: dict) -> RunConfig:
    init_d = dict(data.get("init", {}))
    try:
        init = InitSpec(
            kind=init_d.get("kind", "zero"),
            value=float(init_d.get("value", 0.0)),
            values=tuple(float(v) for v in init_d.get("values", ())),
            scale=float(init_d.get("scale", 1.0)),
        )
        init.realize(built.p, 0)
    except ValueError as exc:
        _fail(str(exc), text, "init", "kind")

    exp_d = dict(data.get("experiment", {}))
    bad = set(exp_d) - _EXPERIMENT_KEYS
    if bad:
        _fail(f"unknown keys {sorted(bad)}", text, "experiment", sorted(bad)[0])
    for key in ("deltas", "xs"):
        if exp_d.get(key) is not None:
            exp_d[key] = tuple(float(v) for v in exp_d[key])
    exp = ExperimentSpec(**exp_d)
    if exp.n < built.p:
        _fail(f"need n >= p = {built.p}, got {exp.n}", text, "experiment", "n")
    if exp.n_min is not None and not built.p <= exp.n_min <= exp.n:
        _fail(f"need p <= n_min <= n, got {exp.n_min}", text, "experiment", "n_min")
    if not 0 < exp.alpha < 0.5:
        _fail(f"need 0 < alpha < 1/2, got {exp.alpha}", text, "experiment", "alpha")
    if exp.case not in (None, 1, 2):
        _fail(f"case must be 1 or 2, got {exp.case}", text, "experiment", "case")
    if exp.replicates < 1:
        _fail("need at least one replicate", text, "experiment", "replicates")
    if not 0 <= exp.master_seed < 2**64:
        _fail("master_seed must be an unsigned 64-bit integer", text, "experiment", "master_seed")

    out_d = dict(data.get("output", {}))
    scales = None
    if "scales" in data:
        sd = data["scales"]
        scales = ScalesSpec(**{k: tuple(v) for k, v in sd.items()})

    return RunConfig(
        model=model,
        noise=noise,
        init=init,
        experiment=exp,
        output_dir=str(out_d.get("dir", "out")),
        formats=tuple(out_d.get("formats", ("json", "csv"))),
        scales=scales,
    )


def loads(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}") from exc
    return from_dict(data, text)


def load(path) -> RunConfig:
    text = Path(path).read_text()
    return loads(text)


def with_overrides(cfg: RunConfig, seed: Optional[int] = None, workers: Optional[int] = None,
                   out: Optional[str] = None) -> RunConfig:
    exp = cfg.experiment
    if seed is not None:
        exp = replace(exp, master_seed=int(seed))
    if workers is not None:
        exp = replace(exp, workers=int(workers))
    return replace(cfg, experiment=exp, output_dir=out if out is not None else cfg.output_dir)
