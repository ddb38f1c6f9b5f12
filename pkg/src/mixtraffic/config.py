"""Experiment configuration files.

The format is a sectioned ``key = value`` text file read with
:mod:`configparser` (no interpolation, ``#``/``;`` comments). Sections:

``[sim]``
    Any :class:`~mixtraffic.sim.SimConfig` field.
``[hyper]``
    Any :class:`~mixtraffic.hyperopt.HyperConfig` field; defaults to the
    best known configuration (``hyperopt.BEST_KNOWN``).
``[search]``
    ``k`` (random-search size), ``top``, ``seed``, ``folds``, ``eval_ticks``
    for fitness evaluation; every other key is a hyperparameter name whose
    value ``lo, hi`` overrides that gene's interval (``lo == hi`` fixes it).
``[ea]``
    ``mu``, ``p_cross``, ``p_mut``, ``generations``.
``[experiment]``
    ``strategies`` (comma list of ``transfer``/``multiagent``), ``n_agents``
    (comma list, ranges ``a-b`` allowed), ``folds``, ``eval_ticks``,
    ``seed``, ``eval_seed``, ``reward_mode``, ``target_update_period``, ``out``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .hyperopt import EAConfig, HyperConfig, SearchSpace
from .sim import SetupError, SimConfig


class ConfigError(ValueError):
    pass


_SEARCH_KEYS = {"k", "top", "seed", "folds", "eval_ticks"}
_EXPERIMENT_KEYS = {
    "strategies", "n_agents", "folds", "eval_ticks", "seed", "eval_seed",
    "reward_mode", "target_update_period", "out",
}
STRATEGIES = ("transfer", "multiagent")


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    hyper: HyperConfig = field(default_factory=HyperConfig)
    space: SearchSpace = field(default_factory=SearchSpace)
    ea: EAConfig = field(default_factory=EAConfig)
    search_k: int = 15
    search_top: int = 5
    search_seed: int = 0
    search_folds: int = 5
    search_eval_ticks: int = 10_000
    strategies: tuple[str, ...] = STRATEGIES
    n_agents: tuple[int, ...] = tuple(range(1, 12))
    folds: int = 5
    eval_ticks: int = 10_000
    seed: int = 0
    eval_seed: int = 1000
    reward_mode: str = "joint"
    target_update_period: int = 0
    out: Path = Path("runs/default")

    def validate(self) -> None:
        try:
            self.sim.validate()
        except SetupError as exc:
            raise ConfigError(f"[sim] {exc}") from None
        try:
            self.hyper.schedule(self.target_update_period)
            self.hyper.net_spec()
        except ValueError as exc:
            raise ConfigError(f"[hyper] {exc}") from None
        if not self.n_agents or any(not 1 <= n <= 11 for n in self.n_agents):
            raise ConfigError("[experiment] n_agents values must lie in [1, 11]")
        if any(n > self.sim.n_vehicles for n in self.n_agents):
            raise ConfigError("[experiment] n_agents exceeds [sim] n_vehicles")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"[experiment] unknown strategy {s!r}")
        if self.reward_mode not in ("joint", "individual"):
            raise ConfigError(f"[experiment] unknown reward_mode {self.reward_mode!r}")
        if self.folds < 1 or self.eval_ticks < 1 or self.search_folds < 1 or self.search_eval_ticks < 1:
            raise ConfigError("folds and eval_ticks must be >= 1")
        if not 1 <= self.search_top <= self.search_k:
            raise ConfigError("[search] need 1 <= top <= k")
        if self.search_top != self.ea.mu:
            raise ConfigError("[search] top must equal [ea] mu")


def _coerce(raw: str, kind, where: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "int":
            return int(raw.replace("_", ""))
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind}") from None
    return raw


def _section_into(obj, section, name: str):
    types = {f.name: f.type for f in fields(obj)}
    changes = {}
    for key, raw in section.items():
        if key not in types:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        changes[key] = _coerce(raw, types[key], f"[{name}] {key}")
    try:
        return replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def parse_int_list(text: str) -> tuple[int, ...]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                a, b = part.split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise ConfigError(f"cannot parse integer list {text!r}") from None
    return tuple(out)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    known = {"sim", "hyper", "search", "ea", "experiment"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    cfg = ExperimentConfig()
    if cp.has_section("sim"):
        cfg.sim = _section_into(cfg.sim, cp["sim"], "sim")
    if cp.has_section("hyper"):
        cfg.hyper = _section_into(cfg.hyper, cp["hyper"], "hyper")
    if cp.has_section("ea"):
        cfg.ea = _section_into(cfg.ea, cp["ea"], "ea")
    if cp.has_section("search"):
        sec = cp["search"]
        bounds = {}
        for key, raw in sec.items():
            if key in _SEARCH_KEYS:
                setattr(cfg, f"search_{key}", _coerce(raw, "int", f"[search] {key}"))
                continue
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) != 2:
                raise ConfigError(f"[search] {key}: expected 'lo, hi'")
            bounds[key] = (_coerce(parts[0], "float", key), _coerce(parts[1], "float", key))
        try:
            cfg.space = cfg.space.with_bounds(**bounds)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"[search] {exc}") from None
    if cp.has_section("experiment"):
        sec = cp["experiment"]
        for key, raw in sec.items():
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"[experiment] unknown key {key!r}")
            if key == "strategies":
                cfg.strategies = tuple(s.strip() for s in raw.split(",") if s.strip())
            elif key == "n_agents":
                cfg.n_agents = parse_int_list(raw)
            elif key in ("reward_mode",):
                cfg.reward_mode = raw.strip()
            elif key == "out":
                cfg.out = Path(raw.strip())
            else:
                setattr(cfg, key, _coerce(raw, "int", f"[experiment] {key}"))
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def hyper_fragment(lam: HyperConfig) -> str:
    lines = ["[hyper]"]
    for key, value in lam.as_dict().items():
        lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"


def load_hyper_fragment(path, base: HyperConfig | None = None) -> HyperConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(Path(path).read_text())
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read hyperparameter file {path}: {exc}") from None
    if not cp.has_section("hyper"):
        raise ConfigError(f"{path}: missing [hyper] section")
    return _section_into(base or HyperConfig(), cp["hyper"], "hyper")
