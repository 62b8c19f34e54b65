"""Model/run configuration files.

Flat INI-style text with sections [branching], [immigration], [competition],
[sim] and [certificate]; numbers in decimal, Levy measures declared by kind
plus parameters.  Example::

    [branching]
    b = 0.5
    c = 0.0
    mu = uniform rate=1.0 lo=0.0 hi=1.0

    [immigration]
    beta = 0.3
    nu = none

    [competition]
    g = none

    [sim]
    dt = 1e-3
    t_end = 1.0
    paths = 1000
    seed = 7

    [certificate]
    weight = v1

Measure kinds: ``none``; ``stable alpha=1.5 sigma=1.0``; ``uniform rate=1.0
lo=0.0 hi=1.0``; ``atoms 2.0:1.0, 3.0:0.5``.  A stable branching block may be
given directly as ``kind = stable`` with ``a, c, sigma, alpha`` instead of
``b, c, mu``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Optional

from .generator import WeightFunction
from .mechanisms import (
    BranchingMechanism,
    CompetitionMechanism,
    ImmigrationMechanism,
    LevyMeasure,
    ModelSpec,
    stable_to_generic,
)
from .simulator import SimConfig


class ConfigError(ValueError):
    """Malformed configuration; the message names the section and field."""


def _kv_args(parts, where):
    out = {}
    for p in parts:
        if "=" not in p:
            raise ConfigError(f"{where}: expected key=value, got {p!r}")
        k, v = p.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError as exc:
            raise ConfigError(f"{where}: {k.strip()} must be a number, got {v!r}") from exc
    return out


def parse_measure(text: str, where: str) -> LevyMeasure:
    if "+" in text:
        return LevyMeasure.sum_of(
            [parse_measure(piece, where) for piece in text.split("+")]
        )
    parts = text.replace(",", " ").split()
    if not parts:
        raise ConfigError(f"{where}: empty measure declaration")
    kind = parts[0].lower()
    if kind == "none":
        return LevyMeasure.zero()
    if kind == "stable":
        kv = _kv_args(parts[1:], where)
        try:
            return LevyMeasure.stable(kv.pop("alpha"), kv.pop("sigma"))
        except KeyError as exc:
            raise ConfigError(f"{where}: stable needs alpha= and sigma=") from exc
    if kind == "uniform":
        kv = _kv_args(parts[1:], where)
        try:
            return LevyMeasure.uniform(kv.pop("rate"), kv.pop("lo"), kv.pop("hi"))
        except KeyError as exc:
            raise ConfigError(f"{where}: uniform needs rate=, lo= and hi=") from exc
    if kind == "atoms":
        pairs = []
        for tok in parts[1:]:
            if ":" not in tok:
                raise ConfigError(f"{where}: atoms need loc:mass entries, got {tok!r}")
            loc, mass = tok.split(":", 1)
            pairs.append((float(loc), float(mass)))
        if not pairs:
            raise ConfigError(f"{where}: atoms needs at least one loc:mass entry")
        return LevyMeasure.from_atoms(pairs)
    raise ConfigError(f"{where}: unknown measure kind {kind!r}")


def parse_competition(text: str, where: str) -> CompetitionMechanism:
    parts = text.replace(",", " ").split()
    if not parts:
        raise ConfigError(f"{where}: empty competition declaration")
    kind = parts[0].lower()
    kv = _kv_args(parts[1:], where)
    if kind == "none":
        return CompetitionMechanism.none()
    if kind == "linear":
        return CompetitionMechanism.linear(kv.get("a", 0.0))
    if kind == "power":
        try:
            return CompetitionMechanism.power(kv["k"], kv["p"])
        except KeyError as exc:
            raise ConfigError(f"{where}: power needs k= and p=") from exc
    if kind == "xlog":
        try:
            return CompetitionMechanism.xlog(kv["k"])
        except KeyError as exc:
            raise ConfigError(f"{where}: xlog needs k=") from exc
    raise ConfigError(f"{where}: unknown competition kind {kind!r}")


@dataclass
class RunConfig:
    model: ModelSpec
    sim: SimConfig
    weight: WeightFunction
    grid_nx: int = 101
    grid_ngap: int = 101
    lambda0: Optional[float] = None
    c0: Optional[float] = None


def _getfloat(sec, key, default, where):
    raw = sec.get(key, None)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: field {key!r} must be a number, got {raw!r}") from exc


def load_config(path) -> RunConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")

    if "branching" not in cp:
        raise ConfigError("[branching]: section missing")
    bsec = cp["branching"]
    if bsec.get("kind", "").strip().lower() == "stable":
        branching = stable_to_generic(
            _getfloat(bsec, "a", 0.0, "[branching]"),
            _getfloat(bsec, "c", 0.0, "[branching]"),
            _getfloat(bsec, "sigma", 0.0, "[branching]"),
            _getfloat(bsec, "alpha", 1.5, "[branching]"),
        )
    else:
        branching = BranchingMechanism(
            b=_getfloat(bsec, "b", 0.0, "[branching]"),
            c=_getfloat(bsec, "c", 0.0, "[branching]"),
            mu=parse_measure(bsec.get("mu", "none"), "[branching] mu"),
        )

    isec = cp["immigration"] if "immigration" in cp else {}
    immigration = ImmigrationMechanism(
        beta=_getfloat(isec, "beta", 0.0, "[immigration]"),
        nu=parse_measure(
            isec.get("nu", "none") if hasattr(isec, "get") else "none", "[immigration] nu"
        ),
    )

    gsec = cp["competition"] if "competition" in cp else {}
    gtext = gsec.get("g", "none") if hasattr(gsec, "get") else "none"
    competition = parse_competition(gtext, "[competition] g")

    model = ModelSpec(branching, immigration, competition)

    ssec = cp["sim"] if "sim" in cp else {}
    eps_raw = ssec.get("eps", "auto") if hasattr(ssec, "get") else "auto"
    eps = None if str(eps_raw).strip().lower() in ("auto", "none", "") else float(eps_raw)
    paths = int(_getfloat(ssec, "paths", 1, "[sim]"))
    if paths < 1:
        raise ConfigError("[sim]: paths must be >= 1")
    sim = SimConfig(
        dt=_getfloat(ssec, "dt", 1e-3, "[sim]"),
        t_end=_getfloat(ssec, "t_end", 1.0, "[sim]"),
        eps=eps,
        diffusion_correction=str(
            ssec.get("diffusion_correction", "true") if hasattr(ssec, "get") else "true"
        ).strip().lower()
        in ("1", "true", "yes", "on"),
        x_max=_getfloat(ssec, "x_max", 1e8, "[sim]"),
        seed=int(_getfloat(ssec, "seed", 0, "[sim]")),
        n_paths=paths,
    )

    csec = cp["certificate"] if "certificate" in cp else {}
    wname = (csec.get("weight", "v1") if hasattr(csec, "get") else "v1").strip().lower()
    if wname == "v1":
        weight = WeightFunction.v1()
    elif wname == "vlog":
        weight = WeightFunction.vlog()
    else:
        raise ConfigError(f"[certificate]: weight must be v1 or vlog, got {wname!r}")
    lam0 = csec.get("lambda0", None) if hasattr(csec, "get") else None
    c0 = csec.get("c0", None) if hasattr(csec, "get") else None
    return RunConfig(
        model=model,
        sim=sim,
        weight=weight,
        grid_nx=int(_getfloat(csec, "grid_nx", 101, "[certificate]")),
        grid_ngap=int(_getfloat(csec, "grid_ngap", 101, "[certificate]")),
        lambda0=float(lam0) if lam0 is not None else None,
        c0=float(c0) if c0 is not None else None,
    )
