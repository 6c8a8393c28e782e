"""Scenario configuration: a JSON tree with units in the key names.

Per-node quantities (sensor noise, fading parameters) accept a number (same
for every node), a list of length ``n_nodes``, or ``{"coef": c, "power": p}``
meaning ``c * i**p`` for node ``i = 1..N``.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import re
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..filtering import Variant


class ConfigError(ValueError):
    """Invalid scenario. ``line`` points into the source document when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        self.message = message
        super().__init__(self._format())

    def _format(self) -> str:
        where = []
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.path:
            where.append(self.path)
        return f"{': '.join(where)}: {self.message}" if where else self.message


@dataclass
class PlacementConfig:
    mode: str = "box"  # "box" or "explicit"
    box_m: list = field(default_factory=lambda: [1000.0, 1000.0, 1500.0])
    seed: int | None = None  # None: derived from master_seed
    per_run: bool = False
    require_connected: bool = True
    max_attempts: int = 1000
    positions_m: list | None = None


@dataclass
class NetworkConfig:
    n_nodes: int = 20
    comm_range_m: float = 600.0
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    # explicit {receiver: [senders]} overrides the range-based graph
    adjacency: dict | None = None


@dataclass
class MotionConfig:
    omega_rad_s: float = 0.52
    eta_sq: float = 5.0


@dataclass
class SensorConfig:
    r_v_m2: typing.Any = field(default_factory=lambda: {"coef": 10.0, "power": 0.5})
    r_n_m2: typing.Any = field(default_factory=lambda: {"coef": 1.0, "power": 0.5})


@dataclass
class FadingConfig:
    sigma_theta: typing.Any = 0.5
    sigma_eps: typing.Any = field(default_factory=lambda: {"coef": 1.0, "power": 0.5})
    delta_eps: typing.Any = 0.1


@dataclass
class ChannelConfig:
    gain_db: float = -150.0
    packet_bits: int = 1000
    bit_rate_bps: float = 6000.0
    boltzmann_j_per_k: float = 1.38e-23
    temperature_k: float = 280.0


@dataclass
class LinkConfig:
    mode: str = "q"  # "q": success probabilities given; "u": derived from power
    q: float = 0.5
    q_range: list | None = None
    power_mw: float = 140.0
    power_range_mw: list | None = None


@dataclass
class FilterConfig:
    variants: list = field(default_factory=lambda: ["Fc", "eFc", "nFc"])
    kappa: float = 0.0


@dataclass
class InitialConfig:
    truth: list = field(default_factory=lambda: [0.0, 10.0, 0.0, 3.0, -1500.0, 2.0])
    estimate: list = field(default_factory=lambda: [20.0, -23.0, 80.0, 32.0, -1450.0, -26.0])
    # scalar (times identity), diagonal list, or full 6x6 matrix
    cov: typing.Any = 100.0


@dataclass
class SweepConfig:
    mode: str = "q"
    levels: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 1.0])
    # nominal peak power per q level, used for energy reporting
    power_mw: list | None = field(default_factory=lambda: [93.0, 118.0, 140.0, 168.0, 400.0])


@dataclass
class ScenarioConfig:
    master_seed: int = 20240601
    runs: int = 100
    duration_steps: int = 100
    period_s: float = 1.0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    fading: FadingConfig = field(default_factory=FadingConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    links: LinkConfig = field(default_factory=LinkConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    steady_window_steps: int = 20
    failure_threshold: float = 0.01
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True, separators=None if indent else (",", ":"))

    @classmethod
    def from_dict(cls, data: dict, source: str | None = None) -> "ScenarioConfig":
        try:
            cfg = _build(cls, data, "")
            validate(cfg)
        except ConfigError as exc:
            if exc.line is None and source is not None and exc.path:
                exc.line = _locate(source, exc.path)
                exc.args = (exc._format(),)
            raise
        return cfg

    def with_overrides(self, overrides) -> "ScenarioConfig":
        data = self.to_dict()
        for item in overrides or ():
            apply_override(data, item)
        return ScenarioConfig.from_dict(data)

    def variants(self) -> list[Variant]:
        return [Variant(v) for v in self.filter.variants]


# -- loading ---------------------------------------------------------------


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object, got {type(data).__name__}", prefix or None)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", _join(prefix, unknown[0]))
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        path = _join(prefix, f.name)
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, path)
        else:
            kwargs[f.name] = _coerce(hint, value, path)
    return cls(**kwargs)


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def _coerce(hint, value, path):
    args = typing.get_args(hint)
    allows_none = type(None) in args
    if value is None:
        if allows_none or hint is typing.Any:
            return None
        raise ConfigError("must not be null", path)
    base = [a for a in args if a is not type(None)] if args else [hint]
    kind = base[0]
    if kind is typing.Any:
        return copy.deepcopy(value)
    origin = typing.get_origin(kind) or kind
    if origin is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected true/false", path)
        return value
    if origin is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return int(value)
    if origin is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if origin is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", path)
        return copy.deepcopy(value)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected an object, got {value!r}", path)
        return copy.deepcopy(value)
    return value


def _locate(source: str, path: str) -> int | None:
    """Best-effort line number of the last key of a dotted path."""
    keys = path.split(".")
    start = 0
    lines = source.splitlines()
    found = None
    for key in keys:
        pat = re.compile(r'"%s"\s*:' % re.escape(key))
        for idx in range(start, len(lines)):
            if pat.search(lines[idx]):
                found = idx + 1
                start = idx
                break
        else:
            return found
    return found


def load_scenario(path: str | Path | None = None, overrides=None) -> ScenarioConfig:
    """Read a scenario file (the packaged default when ``path`` is None)."""
    if path is None:
        text = resources.files("fadetrack").joinpath("scenarios/default.json").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read scenario: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno) from exc
    for item in overrides or ():
        apply_override(data, item)
    return ScenarioConfig.from_dict(data, source=text)


def apply_override(data: dict, item: str) -> None:
    """Apply ``dotted.key=value`` in place; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = data
    defaults = ScenarioConfig().to_dict()
    for part in parts[:-1]:
        defaults = defaults.get(part, {}) if isinstance(defaults, dict) else {}
        if not isinstance(node.get(part), dict):
            node[part] = copy.deepcopy(defaults) if isinstance(defaults, dict) else {}
        node = node[part]
    node[parts[-1]] = value


# -- validation ------------------------------------------------------------


def per_node(spec, n: int, path: str) -> np.ndarray:
    """Resolve a per-node value to an array of length ``n``."""
    if isinstance(spec, bool):
        raise ConfigError("expected a number, list or {coef, power}", path)
    if isinstance(spec, (int, float)):
        return np.full(n, float(spec))
    if isinstance(spec, list):
        if len(spec) != n or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in spec):
            raise ConfigError(f"expected {n} numbers", path)
        return np.asarray(spec, dtype=float)
    if isinstance(spec, dict):
        if set(spec) != {"coef", "power"}:
            raise ConfigError("per-node law needs exactly 'coef' and 'power'", path)
        try:
            return float(spec["coef"]) * np.arange(1, n + 1, dtype=float) ** float(spec["power"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad per-node law: {exc}", path) from exc
    raise ConfigError("expected a number, list or {coef, power}", path)


def initial_covariance(spec) -> np.ndarray:
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return float(spec) * np.eye(6)
    arr = np.asarray(spec, dtype=float)
    if arr.shape == (6,):
        return np.diag(arr)
    if arr.shape == (6, 6):
        return arr
    raise ConfigError("initial covariance must be a scalar, 6 diagonal entries or a 6x6 matrix", "initial.cov")


def _require(cond, message, path):
    if not cond:
        raise ConfigError(message, path)


def _check_range(values, path, lo=0.0, hi=None, closed_lo=False):
    _require(isinstance(values, list) and len(values) == 2, "expected [low, high]", path)
    a, b = float(values[0]), float(values[1])
    _require(a <= b, "low must not exceed high", path)
    _require(a >= lo if closed_lo else a > lo, f"low must be {'>=' if closed_lo else '>'} {lo}", path)
    if hi is not None:
        _require(b <= hi, f"high must be <= {hi}", path)


def validate(cfg: ScenarioConfig) -> None:
    _require(cfg.runs >= 1, "must be >= 1", "runs")
    _require(cfg.duration_steps >= 1, "must be >= 1", "duration_steps")
    _require(cfg.period_s > 0, "must be positive", "period_s")
    _require(cfg.master_seed >= 0, "must be non-negative", "master_seed")
    _require(1 <= cfg.steady_window_steps <= cfg.duration_steps, "must lie in [1, duration_steps]", "steady_window_steps")
    _require(0 <= cfg.failure_threshold <= 1, "must lie in [0, 1]", "failure_threshold")

    net = cfg.network
    n = net.n_nodes
    _require(n >= 1, "must be >= 1", "network.n_nodes")
    _require(net.comm_range_m > 0, "must be positive", "network.comm_range_m")
    pl = net.placement
    _require(pl.mode in ("box", "explicit"), "must be 'box' or 'explicit'", "network.placement.mode")
    _require(len(pl.box_m) == 3 and all(float(b) > 0 for b in pl.box_m), "expected three positive extents", "network.placement.box_m")
    _require(pl.max_attempts >= 1, "must be >= 1", "network.placement.max_attempts")
    if pl.seed is not None:
        _require(pl.seed >= 0, "must be non-negative", "network.placement.seed")
    if pl.mode == "explicit":
        pos = pl.positions_m
        _require(pos is not None, "required when mode is 'explicit'", "network.placement.positions_m")
        try:
            arr = np.asarray(pos, dtype=float)
        except (TypeError, ValueError):
            arr = np.empty(0)
        _require(arr.shape == (n, 3) and np.all(np.isfinite(arr)), f"expected {n} finite [x, y, z] triples", "network.placement.positions_m")
    if net.adjacency is not None:
        for key, senders in net.adjacency.items():
            path = f"network.adjacency.{key}"
            _require(key.isdigit() and int(key) < n, "receiver must be a node index", path)
            _require(isinstance(senders, list) and all(isinstance(j, int) and 0 <= j < n and j != int(key) for j in senders), "senders must be other node indices", path)

    _require(cfg.motion.eta_sq >= 0, "must be non-negative", "motion.eta_sq")
    _require(np.isfinite(cfg.motion.omega_rad_s), "must be finite", "motion.omega_rad_s")

    r_v = per_node(cfg.sensors.r_v_m2, n, "sensors.r_v_m2")
    r_n = per_node(cfg.sensors.r_n_m2, n, "sensors.r_n_m2")
    _require(np.all(r_v > 0), "must be positive", "sensors.r_v_m2")
    _require(np.all(r_n >= 0), "must be non-negative", "sensors.r_n_m2")
    s_theta = per_node(cfg.fading.sigma_theta, n, "fading.sigma_theta")
    s_eps = per_node(cfg.fading.sigma_eps, n, "fading.sigma_eps")
    d_eps = per_node(cfg.fading.delta_eps, n, "fading.delta_eps")
    _require(np.all(s_theta > 0), "must be positive", "fading.sigma_theta")
    _require(np.all(s_eps > 0), "must be positive", "fading.sigma_eps")
    _require(np.all((d_eps > 0) & (d_eps < 1)), "must lie in (0, 1)", "fading.delta_eps")

    ch = cfg.channel
    _require(ch.packet_bits >= 1, "must be >= 1", "channel.packet_bits")
    for name in ("bit_rate_bps", "boltzmann_j_per_k", "temperature_k"):
        _require(getattr(ch, name) > 0, "must be positive", f"channel.{name}")
    _require(np.isfinite(ch.gain_db), "must be finite", "channel.gain_db")

    ln = cfg.links
    _require(ln.mode in ("q", "u"), "must be 'q' or 'u'", "links.mode")
    _require(0 <= ln.q <= 1, "must lie in [0, 1]", "links.q")
    _require(ln.power_mw >= 0, "must be non-negative", "links.power_mw")
    if ln.q_range is not None:
        _check_range(ln.q_range, "links.q_range", lo=0.0, hi=1.0, closed_lo=True)
    if ln.power_range_mw is not None:
        _check_range(ln.power_range_mw, "links.power_range_mw", lo=0.0, closed_lo=True)

    _require(len(cfg.filter.variants) >= 1, "need at least one variant", "filter.variants")
    for v in cfg.filter.variants:
        _require(v in {x.value for x in Variant}, f"unknown variant {v!r}", "filter.variants")
    _require(len(set(cfg.filter.variants)) == len(cfg.filter.variants), "duplicate variant", "filter.variants")
    _require(6 + cfg.filter.kappa > 0, "n + kappa must be positive", "filter.kappa")

    ini = cfg.initial
    for name in ("truth", "estimate"):
        vec = getattr(ini, name)
        _require(len(vec) == 6 and all(isinstance(v, (int, float)) for v in vec), "expected 6 numbers", f"initial.{name}")
    P0 = initial_covariance(ini.cov)
    _require(np.allclose(P0, P0.T), "must be symmetric", "initial.cov")
    _require(np.all(np.linalg.eigvalsh(0.5 * (P0 + P0.T)) > 0), "must be positive definite", "initial.cov")

    sw = cfg.sweep
    _require(sw.mode in ("q", "u"), "must be 'q' or 'u'", "sweep.mode")
    _require(len(sw.levels) >= 1, "need at least one level", "sweep.levels")
    for lv in sw.levels:
        if sw.mode == "q":
            _require(0 <= lv <= 1, "q levels must lie in [0, 1]", "sweep.levels")
        else:
            _require(lv >= 0, "power levels must be non-negative", "sweep.levels")
    if sw.power_mw is not None and sw.mode == "q":
        _require(len(sw.power_mw) == len(sw.levels), "must match the number of levels", "sweep.power_mw")
        _require(all(p >= 0 for p in sw.power_mw), "must be non-negative", "sweep.power_mw")
