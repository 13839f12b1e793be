"""Command-line front end.

Every run is described by a RunConfig, read from an INI file (``--config``)
and then patched by command-line flags; ``--set section.key=value`` reaches
any key.  Outputs are ``<out>/<command>.csv`` plus a JSON sidecar holding
the full configuration, so the sidecar alone reproduces the run.

Exit codes: 0 success, 2 configuration error, 3 domain error, 4 convergence
failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigError, ConvergenceError, DomainError
from .experiments import (
    default_family, density_comparison, kernel_distance, limit_matrix, transition_sweep,
    write_density, write_report, write_sweep,
)
from .io import fmt, provenance, write_csv, write_json
from .kernel_finite import QuadratureSettings, kernel_grid, kernel_x
from .kernel_limit import LIMIT_KINDS
from .model import ProductModel, RegimeSpec, SimplifiedModel, derived_parameters, z0
from .sampler import batch_rows, sample_batch

COMMANDS = ("params", "kernel", "limit", "density", "sample", "compare", "sweep")
EXIT_CONFIG, EXIT_DOMAIN, EXIT_CONVERGENCE = 2, 3, 4

_HELP = {
    "params": "print derived model parameters",
    "kernel": "finite-n kernel on a grid (scaled if a regime is given)",
    "limit": "limit kernel on a grid",
    "density": "Monte Carlo density vs kernel diagonal and limiting law",
    "sample": "sample squared singular values",
    "compare": "distances between scaled finite kernel and its limit",
    "sweep": "three-phase transition sweep over a family of models",
}

_QUAD_FIELDS = {f.name: f.type for f in dataclasses.fields(QuadratureSettings)}


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _join(values) -> str:
    return ", ".join(fmt(v) for v in values)


@dataclass(frozen=True)
class RunConfig:
    command: str = "params"
    # model block: either (n, M, v, m) or the simplified (n, M, a)
    n: Optional[int] = None
    M: Optional[int] = None
    v: tuple = ()
    m: tuple = ()
    a: Optional[float] = None
    # regime block
    regime: Optional[str] = None
    k: Optional[int] = None
    u: Optional[float] = None
    theta: Optional[float] = None
    bulk_amplitude: str = "density"
    gamma: Optional[float] = None
    limit: Optional[str] = None
    # grid block
    grid_min: float = -1.0
    grid_max: float = 1.0
    grid_points: int = 3
    quadrature: tuple = ()  # sorted (name, value) overrides
    seed: int = 0
    draws: int = 1000
    bins: int = 40
    threads: Optional[int] = None
    out: Optional[str] = None  # None: "out" for file-writing commands, stdout only for params
    sweep_M: tuple = (3, 30, 300, 3000)
    sweep_kind: str = "crit_edge"

    # -- on-disk form ------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str  # keep M and m apart
        cp["run"] = {"command": self.command, "seed": str(self.seed), "draws": str(self.draws),
                     "bins": str(self.bins)}
        for name in ("out", "threads"):
            if getattr(self, name) is not None:
                cp["run"][name] = str(getattr(self, name))
        model = {}
        for name in ("n", "M"):
            if getattr(self, name) is not None:
                model[name] = str(getattr(self, name))
        if self.a is not None:
            model["a"] = fmt(self.a)
        if self.v:
            model["v"] = _join(self.v)
        if self.m:
            model["m"] = _join(self.m)
        cp["model"] = model
        reg = {"bulk_amplitude": self.bulk_amplitude}
        for name in ("regime", "k", "u", "theta", "gamma", "limit"):
            val = getattr(self, name)
            if val is not None:
                reg["kind" if name == "regime" else name] = fmt(val)
        cp["regime"] = reg
        cp["grid"] = {"min": fmt(self.grid_min), "max": fmt(self.grid_max), "points": str(self.grid_points)}
        cp["quadrature"] = {k: fmt(v) for k, v in self.quadrature}
        cp["sweep"] = {"M": _join(self.sweep_M), "kind": self.sweep_kind}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, source: str = "<config>") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {source}: {exc}") from None
        values = {}
        for section in cp.sections():
            for key, raw in cp.items(section):
                values[f"{section}.{key}"] = raw
        return cls().updated(values)

    # -- overrides -----------------------------------------------------------

    _KEYS = {
        "run.command": ("command", str), "run.seed": ("seed", int), "run.draws": ("draws", int),
        "run.bins": ("bins", int), "run.out": ("out", str), "run.threads": ("threads", int),
        "model.n": ("n", int), "model.M": ("M", int), "model.a": ("a", float),
        "model.v": ("v", _ints), "model.m": ("m", _ints),
        "regime.kind": ("regime", str), "regime.k": ("k", int), "regime.u": ("u", float),
        "regime.theta": ("theta", float), "regime.bulk_amplitude": ("bulk_amplitude", str),
        "regime.gamma": ("gamma", float), "regime.limit": ("limit", str),
        "grid.min": ("grid_min", float), "grid.max": ("grid_max", float), "grid.points": ("grid_points", int),
        "sweep.M": ("sweep_M", _ints), "sweep.kind": ("sweep_kind", str),
    }

    def updated(self, values: dict) -> "RunConfig":
        """Apply ``section.key -> text`` overrides, validating each value."""
        changes = {}
        quad = dict(self.quadrature)
        for key, raw in values.items():
            section, _, name = key.partition(".")
            if section == "quadrature":
                if name not in _QUAD_FIELDS:
                    raise ConfigError(f"unknown quadrature setting {name!r}")
                default = getattr(QuadratureSettings(), name)
                try:
                    quad[name] = type(default)(raw) if not isinstance(raw, type(default)) else raw
                except ValueError:
                    raise ConfigError(f"bad value for {key}: {raw!r}") from None
                continue
            if key not in self._KEYS:
                raise ConfigError(f"unknown configuration key {key!r}")
            attr, conv = self._KEYS[key]
            try:
                changes[attr] = raw if not isinstance(raw, str) else conv(raw.strip())
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        changes["quadrature"] = tuple(sorted(quad.items()))
        out = dataclasses.replace(self, **changes)
        out.validate()
        return out

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.draws < 1 or self.bins < 1 or self.grid_points < 1:
            raise ConfigError("draws, bins and grid points must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be positive")
        if self.grid_points > 1 and not self.grid_max > self.grid_min:
            raise ConfigError("grid max must exceed grid min")
        if self.limit is not None and self.limit not in LIMIT_KINDS:
            raise ConfigError(f"limit must be one of {LIMIT_KINDS}")
        self.settings()

    # -- derived objects -------------------------------------------------------

    def settings(self) -> QuadratureSettings:
        return QuadratureSettings(**dict(self.quadrature))

    def model(self):
        if self.n is None or self.M is None:
            raise ConfigError("model block needs n and M")
        if self.a is not None:
            if self.v or self.m:
                raise ConfigError("give either a (simplified model) or v and m, not both")
            return SimplifiedModel(self.n, self.M, self.a)
        if not self.m:
            raise ConfigError("model block needs m (or a)")
        m = self.m * self.M if len(self.m) == 1 else self.m
        v = self.v or (0,)
        v = v * self.M if len(v) == 1 else v
        if len(m) != self.M or len(v) != self.M:
            raise ConfigError("v and m must have one entry or M entries")
        return ProductModel(self.n, v, m)

    def spec(self) -> Optional[RegimeSpec]:
        if self.regime is None:
            return None
        return RegimeSpec(self.regime, k=self.k, u=self.u, theta=self.theta,
                          bulk_amplitude=self.bulk_amplitude)

    def grid(self) -> tuple:
        if self.grid_points == 1:
            return (float(self.grid_min),)
        return tuple(float(x) for x in np.linspace(self.grid_min, self.grid_max, self.grid_points))

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# commands


def _sidecar(cfg: RunConfig, **extra) -> dict:
    return provenance(command=cfg.command, config=cfg.as_dict(), config_ini=cfg.to_ini(), **extra)


def cmd_params(cfg: RunConfig, out: Optional[Path]) -> int:
    model = cfg.model()
    z0(model)  # a model without an edge root is a domain error for this command
    params = derived_parameters(model)
    for key, val in params.items():
        if key == "model":
            val = json.dumps(val)
        print(f"{key:>18}: {val}")
    if out is not None:
        write_json(out / "params.json", _sidecar(cfg, parameters=params))
    print(json.dumps(provenance(parameters=params), sort_keys=True))
    return 0


def cmd_kernel(cfg: RunConfig, out: Path) -> int:
    model, spec, grid, q = cfg.model(), cfg.spec(), cfg.grid(), cfg.settings()
    t0 = time.perf_counter()
    if spec is not None:
        km = kernel_grid(model, spec, grid, q, threads=cfg.threads)
        entries = [e for row in km.entries for e in row]
    else:
        entries = [kernel_x(model, a, b, q) for a in grid for b in grid]
    pairs = [(a, b) for a in grid for b in grid]
    rows = [(a, b, e.value, e.est_error, e.method) for (a, b), e in zip(pairs, entries)]
    write_csv(out / "kernel.csv", ("xi", "eta", "value", "est_error", "method"), rows)
    write_json(out / "kernel.json", _sidecar(cfg, runtime_seconds=time.perf_counter() - t0))
    return 0


def cmd_limit(cfg: RunConfig, out: Path) -> int:
    kind = cfg.limit or "airy"
    grid = cfg.grid()
    L = limit_matrix(kind, grid, cfg.gamma)
    rows = [(a, b, L[i, j]) for i, a in enumerate(grid) for j, b in enumerate(grid)]
    write_csv(out / "limit.csv", ("xi", "eta", "value"), rows)
    write_json(out / "limit.json", _sidecar(cfg, limit=kind, gamma=cfg.gamma))
    return 0


def cmd_sample(cfg: RunConfig, out: Path) -> int:
    model = cfg.model()
    batch = sample_batch(model.product_model() if isinstance(model, SimplifiedModel) else model,
                         cfg.seed, cfg.draws, threads=cfg.threads or 1)
    write_csv(out / "sample.csv", ("draw", "index", "value"), batch_rows(batch))
    meta = batch.metadata()
    meta["model"] = model.describe()
    write_json(out / "sample.json", _sidecar(cfg, **meta))
    return 0


def cmd_density(cfg: RunConfig, out: Path) -> int:
    rep = density_comparison(cfg.model(), cfg.draws, cfg.seed, cfg.bins,
                             threads=cfg.threads or 1, q=cfg.settings())
    write_density(rep, out, settings=cfg.as_dict())
    _refresh_sidecar(out / "density.json", cfg)
    print(json.dumps({"ks": rep.ks, "max_abs_z": rep.max_abs_z}))
    return 0


def cmd_compare(cfg: RunConfig, out: Path) -> int:
    spec = cfg.spec()
    if spec is None:
        raise ConfigError("compare needs a regime kind")
    rep = kernel_distance(cfg.model(), spec, cfg.grid(), cfg.settings(), threads=cfg.threads)
    write_report(rep, out, settings=cfg.as_dict())
    _refresh_sidecar(out / "compare.json", cfg)
    print(json.dumps({k: rep.summary()[k] for k in ("sup_distance", "diag_rel_distance", "det_rel_distance")}))
    return 0


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    n = cfg.n if cfg.n is not None else 30
    m = cfg.m[0] if cfg.m else None
    table = transition_sweep(default_family(n, cfg.sweep_M, m), cfg.sweep_kind, cfg.grid(),
                             cfg.settings(), threads=cfg.threads)
    write_sweep(table, out, settings=cfg.as_dict())
    _refresh_sidecar(out / "sweep.json", cfg)
    return 0


def _refresh_sidecar(path: Path, cfg: RunConfig):
    payload = json.loads(path.read_text(encoding="utf-8"))
    payload.update(_sidecar(cfg))
    write_json(path, payload)


_RUNNERS = {"params": cmd_params, "kernel": cmd_kernel, "limit": cmd_limit, "density": cmd_density,
            "sample": cmd_sample, "compare": cmd_compare, "sweep": cmd_sweep}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    # argparse already exits with 2 on usage errors; keep the message on stderr
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="INI configuration file")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", metavar="N", type=int, help="random seed")
    p.add_argument("--threads", metavar="N", type=int, help="worker threads (default: all cores)")
    p.add_argument("--tol", metavar="X", type=float, help="relative quadrature tolerance")
    p.add_argument("--set", metavar="SECTION.KEY=VALUE", action="append", default=[],
                   help="override any configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="truncprod", description="Correlation kernels of products of truncated unitary matrices.",
                     epilog="commands: " + ", ".join(COMMANDS))
    parser.add_argument("--version", action="version", version=f"truncprod {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        _common(sub.add_parser(name, help=_HELP[name], description=_HELP[name]))
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = RunConfig.from_ini(text, source=args.config)
    overrides = {"run.command": args.command}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = val.strip()
    for flag, key in (("out", "run.out"), ("seed", "run.seed"), ("threads", "run.threads"),
                      ("tol", "quadrature.rel_tol")):
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = val
    cfg = cfg.updated(overrides)
    if cfg.threads is None:
        cfg = dataclasses.replace(cfg, threads=os.cpu_count() or 1)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if cfg.command == "params":
            return cmd_params(cfg, None if cfg.out is None else Path(cfg.out))
        return _RUNNERS[cfg.command](cfg, Path(cfg.out or "out"))
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
