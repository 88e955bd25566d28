"""Scenario files: YAML loading with line-referenced, aggregated validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .control import PROFILES
from .missions import FlockingParams
from .netsim import PRESETS, ChannelConfig
from .plant import KIND_DEFAULTS, ODOMETRY_KINDS, OdometrySourceConfig
from .propulsion import MODIFIERS, available_curves, data_dir, platform_catalog
from .tracking import AvoidanceConfig, TrackerConstraints
from .uvdar import SequenceSetParams, generate_set


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class Issue:
    line: int | None
    path: str
    message: str

    def __str__(self) -> str:
        where = f"line {self.line}: " if self.line is not None else ""
        return f"{where}{self.path}: {self.message}"


class ValidationError(ValueError):
    def __init__(self, issues: list[Issue], source: str = "<scenario>"):
        self.issues = issues
        self.source = source
        super().__init__(f"{source}: {len(issues)} validation error(s)\n" + "\n".join(f"  {i}" for i in issues))


@dataclass(frozen=True)
class UvdarConfig:
    length: int = 4
    max_off_run: int = 3
    marker_baseline: float = 0.45  # m
    cameras: int = 3  # horizontal ring; up and down cameras are always fitted


@dataclass(frozen=True)
class MissionSpec:
    takeoff_altitude: float
    waypoints: tuple[tuple[float, float, float, float], ...]  # x, y, z, heading
    tolerance: float = 0.5
    hold_time: float = 1.0
    land_speed: float = 0.5


@dataclass(frozen=True)
class UavConfig:
    uav_id: int
    platform: str
    curve: str
    priority: int
    start: np.ndarray
    heading: float = 0.0
    payload: float = 0.0
    modifiers: tuple[str, ...] = ()
    profile: str = "smooth"
    constraints: TrackerConstraints = TrackerConstraints()
    sources: tuple[OdometrySourceConfig, ...] = ()
    uvdar: UvdarConfig = UvdarConfig()
    mission: MissionSpec | None = None
    flocking: bool = False


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    duration: float
    uavs: tuple[UavConfig, ...]
    channels: tuple[ChannelConfig, ...]
    avoidance: AvoidanceConfig = AvoidanceConfig()
    ground_z: float = 0.0
    trajectory_channel: str = ""
    mission_channel: str = ""
    broadcast_period: float = 0.2
    broadcast_budget: float | None = None
    flocking: FlockingParams = FlockingParams()
    path: Path | None = field(default=None, compare=False)

    def channel(self, name: str) -> ChannelConfig:
        return next(c for c in self.channels if c.name == name)


# -- YAML with line marks ----------------------------------------------------------


class _Map(dict):
    line: int = 0
    lines: dict


class _Seq(list):
    line: int = 0
    lines: list


class _Loader(yaml.SafeLoader):
    pass


def _construct_map(loader: _Loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.line, out.lines = node.start_mark.line + 1, {}
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        if key in out:
            loader.duplicates.append((k_node.start_mark.line + 1, key))
        out[key] = loader.construct_object(v_node, deep=True)
        out.lines[key] = k_node.start_mark.line + 1
    return out


def _construct_seq(loader: _Loader, node):
    out = _Seq(loader.construct_object(v, deep=True) for v in node.value)
    out.line, out.lines = node.start_mark.line + 1, [v.start_mark.line + 1 for v in node.value]
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)
_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_seq)


def _parse(text: str, source: str):
    loader = _Loader(text)
    loader.duplicates = []
    try:
        doc = loader.get_single_data()
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        line = f"line {mark.line + 1}: " if mark is not None else ""
        raise ParseError(f"{source}: {line}{e.problem}") from None
    except yaml.YAMLError as e:
        raise ParseError(f"{source}: {e}") from None
    finally:
        loader.dispose()
    return doc, loader.duplicates


# -- validation --------------------------------------------------------------------


class _Checker:
    def __init__(self):
        self.issues: list[Issue] = []

    def error(self, line, path, message):
        self.issues.append(Issue(line, path, message))

    def section(self, parent: _Map, key: str, path: str, required: bool = False) -> _Map | None:
        if key not in parent:
            if required:
                self.error(parent.line, path, f"missing section '{key}'")
            return None
        v = parent[key]
        if not isinstance(v, _Map):
            self.error(parent.lines[key], f"{path}.{key}" if path else key, "expected a mapping")
            return None
        return v

    def unknown(self, m: _Map, allowed, path: str):
        for k in m:
            if k not in allowed:
                self.error(m.lines[k], f"{path}.{k}" if path else str(k),
                           f"unknown key; allowed: {sorted(allowed)}")

    def number(self, m: _Map, key: str, path: str, default=None, required=False, integer=False,
               positive=False, nonneg=False):
        p = f"{path}.{key}" if path else key
        if key not in m:
            if required:
                self.error(m.line, p, "required value missing")
            return default
        v = m[key]
        ok = isinstance(v, int) if integer else isinstance(v, (int, float))
        if isinstance(v, bool) or not ok or (not integer and not math.isfinite(v)):
            self.error(m.lines[key], p, f"expected {'an integer' if integer else 'a number'}, got {v!r}")
            return default
        if positive and not v > 0:
            self.error(m.lines[key], p, f"must be positive, got {v}")
            return default
        if nonneg and v < 0:
            self.error(m.lines[key], p, f"must be non-negative, got {v}")
            return default
        return int(v) if integer else float(v)

    def string(self, m: _Map, key: str, path: str, default=None, required=False):
        p = f"{path}.{key}" if path else key
        if key not in m:
            if required:
                self.error(m.line, p, "required value missing")
            return default
        v = m[key]
        if isinstance(v, bool) or not isinstance(v, (str, int)):
            self.error(m.lines[key], p, f"expected a name, got {v!r}")
            return default
        return str(v)

    def flag(self, m: _Map, key: str, path: str, default: bool) -> bool:
        if key not in m:
            return default
        if not isinstance(m[key], bool):
            self.error(m.lines[key], f"{path}.{key}", f"expected true or false, got {m[key]!r}")
            return default
        return m[key]

    def vector(self, m: _Map, key: str, path: str, size: int, required=False):
        p = f"{path}.{key}"
        if key not in m:
            if required:
                self.error(m.line, p, "required value missing")
            return None
        v = m[key]
        if not (isinstance(v, list) and len(v) == size
                and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
            self.error(m.lines[key], p, f"expected a list of {size} numbers, got {v!r}")
            return None
        return tuple(float(x) for x in v)

    def build(self, cls, m: _Map, path: str, base=None):
        """Construct a frozen config from the numeric/boolean keys of ``m`` matching ``cls`` fields."""
        base = base or cls()
        names = {f.name for f in fields(cls)}
        self.unknown(m, names, path)
        kw = {}
        for f in fields(cls):
            if f.name not in m:
                continue
            default = getattr(base, f.name)
            if isinstance(default, bool):
                kw[f.name] = self.flag(m, f.name, path, default)
            else:
                kw[f.name] = self.number(m, f.name, path, default)
        try:
            return cls(**{**{f.name: getattr(base, f.name) for f in fields(cls)}, **kw})
        except ValueError as e:
            self.error(m.line, path, str(e))
            return base


_TOP_KEYS = {"name", "seed", "duration", "world", "channels", "avoidance", "broadcast", "flocking", "uavs"}
_UAV_KEYS = {"id", "platform", "curve", "modifiers", "profile", "priority", "start", "heading", "payload",
             "constraints", "sources", "uvdar", "mission", "role"}
_SOURCE_KEYS = {f.name for f in fields(OdometrySourceConfig)}


def _channels(ck: _Checker, doc: _Map) -> list[ChannelConfig]:
    raw = doc.get("channels")
    if raw is None:
        return [PRESETS["highband"]]
    if not isinstance(raw, _Seq) or not raw:
        ck.error(doc.lines["channels"], "channels", "expected a non-empty list")
        return []
    out = []
    for i, (item, line) in enumerate(zip(raw, raw.lines)):
        path = f"channels[{i}]"
        if isinstance(item, str):
            item = _Map({"preset": item})
            item.line, item.lines = line, {"preset": line}
        if not isinstance(item, _Map):
            ck.error(line, path, "expected a preset name or a mapping")
            continue
        ck.unknown(item, {"preset", "name", "bandwidth", "latency", "loss_probability", "mtu"}, path)
        base = None
        if "preset" in item:
            pname = ck.string(item, "preset", path)
            base = PRESETS.get(pname)
            if base is None:
                ck.error(item.lines["preset"], f"{path}.preset",
                         f"unknown channel preset {pname!r}; available: {sorted(PRESETS)}")
                continue
        name = ck.string(item, "name", path, base.name if base else None, required=base is None)
        bw = ck.number(item, "bandwidth", path, base.bandwidth if base else None,
                       required=base is None, positive=True)
        lat = ck.number(item, "latency", path, base.latency if base else 0.0, nonneg=True)
        loss = ck.number(item, "loss_probability", path, base.loss_probability if base else 0.0, nonneg=True)
        mtu = ck.number(item, "mtu", path, base.mtu if base else 65535, integer=True, positive=True)
        if name is None or bw is None:
            continue
        try:
            out.append(ChannelConfig(name, bw, lat, loss, mtu))
        except ValueError as e:
            ck.error(item.line, path, str(e))
    names = [c.name for c in out]
    for n in sorted({n for n in names if names.count(n) > 1}):
        ck.error(raw.line, "channels", f"duplicate channel name {n!r}")
    return out


def _sources(ck: _Checker, u: _Map, path: str) -> tuple[OdometrySourceConfig, ...]:
    raw = u.get("sources")
    if raw is None:
        return (OdometrySourceConfig("gnss", **KIND_DEFAULTS["gnss"]),)
    if not isinstance(raw, _Seq) or not raw:
        ck.error(u.lines["sources"], f"{path}.sources", "expected a non-empty list")
        return ()
    out = []
    for i, item in enumerate(raw):
        p = f"{path}.sources[{i}]"
        if not isinstance(item, _Map):
            ck.error(raw.lines[i], p, "expected a mapping")
            continue
        ck.unknown(item, _SOURCE_KEYS, p)
        kind = ck.string(item, "kind", p, "gnss")
        if kind not in ODOMETRY_KINDS:
            ck.error(item.lines.get("kind", item.line), f"{p}.kind",
                     f"unknown odometry kind {kind!r}; available: {list(ODOMETRY_KINDS)}")
            continue
        kw = dict(KIND_DEFAULTS[kind])
        for k in ("rate", "position_noise_sigma", "heading_noise_sigma", "drift_rate", "latency",
                  "dropout_probability"):
            if k in item:
                v = ck.number(item, k, p, nonneg=True)
                if v is not None:
                    kw[k] = v
        if "bias" in item:
            b = ck.vector(item, "bias", p, 3)
            if b is not None:
                kw["bias"] = b
        name = ck.string(item, "name", p, kind)
        try:
            out.append(OdometrySourceConfig(name=name, kind=kind, **kw))
        except ValueError as e:
            ck.error(item.line, p, str(e))
    names = [s.name for s in out]
    for n in sorted({n for n in names if names.count(n) > 1}):
        ck.error(raw.line, f"{path}.sources", f"duplicate source name {n!r}")
    return tuple(out)


def _mission(ck: _Checker, m, line: int, path: str) -> MissionSpec | None:
    if not isinstance(m, _Map):
        ck.error(line, path, "expected a mapping")
        return None
    ck.unknown(m, {"takeoff_altitude", "waypoints", "tolerance", "hold_time", "land_speed"}, path)
    alt = ck.number(m, "takeoff_altitude", path, required=True, positive=True)
    tol = ck.number(m, "tolerance", path, 0.5, positive=True)
    hold = ck.number(m, "hold_time", path, 1.0, nonneg=True)
    land = ck.number(m, "land_speed", path, 0.5, positive=True)
    wps = []
    raw = m.get("waypoints", _Seq())
    if not isinstance(raw, _Seq):
        ck.error(m.lines["waypoints"], f"{path}.waypoints", "expected a list")
        raw = _Seq()
        raw.lines = []
    for i, w in enumerate(raw):
        ok = (isinstance(w, list) and len(w) in (3, 4)
              and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in w))
        if not ok:
            ck.error(raw.lines[i], f"{path}.waypoints[{i}]", f"expected [x, y, z] or [x, y, z, heading], got {w!r}")
            continue
        wps.append(tuple(float(x) for x in w) + ((0.0,) if len(w) == 3 else ()))
    if alt is None or tol is None:
        return None
    return MissionSpec(alt, tuple(wps), tol, hold, land)


def _uav(ck: _Checker, u, line: int, i: int, catalog, curves) -> UavConfig | None:
    path = f"uavs[{i}]"
    if not isinstance(u, _Map):
        ck.error(line, path, "expected a mapping")
        return None
    ck.unknown(u, _UAV_KEYS, path)
    uid = ck.number(u, "id", path, required=True, integer=True, nonneg=True)
    if uid is not None and uid > 0xFFFF:
        ck.error(u.lines["id"], f"{path}.id", "must fit in 16 bits")
    prio = ck.number(u, "priority", path, required=True, integer=True, nonneg=True)
    if prio is not None and prio > 0xFF:
        ck.error(u.lines["priority"], f"{path}.priority", "must fit in 8 bits")
    platform = ck.string(u, "platform", path, required=True)
    if platform is not None and platform.lower().replace(".", "_") not in catalog:
        ck.error(u.lines["platform"], f"{path}.platform",
                 f"unknown platform {platform!r}; available: {sorted(catalog)}")
    curve = ck.string(u, "curve", path, "9450")
    if curve is not None and curve not in curves:
        ck.error(u.lines.get("curve", u.line), f"{path}.curve", f"unknown curve {curve!r}; available: {curves}")
    mods = u.get("modifiers", [])
    if not isinstance(mods, list) or not all(isinstance(x, str) for x in mods):
        ck.error(u.lines.get("modifiers", u.line), f"{path}.modifiers", "expected a list of names")
        mods = []
    for mname in mods:
        if mname not in MODIFIERS:
            ck.error(u.lines["modifiers"], f"{path}.modifiers",
                     f"unknown modifier {mname!r}; available: {sorted(MODIFIERS)}")
    profile = ck.string(u, "profile", path, "smooth")
    if profile is not None and profile not in PROFILES:
        ck.error(u.lines["profile"], f"{path}.profile",
                 f"unknown controller profile {profile!r}; available: {sorted(PROFILES)}")
    start = ck.vector(u, "start", path, 3, required=True)
    heading = ck.number(u, "heading", path, 0.0)
    payload = ck.number(u, "payload", path, 0.0, nonneg=True)

    constraints = TrackerConstraints()
    if (c := ck.section(u, "constraints", path)) is not None:
        constraints = ck.build(TrackerConstraints, c, f"{path}.constraints")
    uv = UvdarConfig()
    if (c := ck.section(u, "uvdar", path)) is not None:
        ck.unknown(c, {"length", "max_off_run", "marker_baseline", "cameras"}, f"{path}.uvdar")
        uv = UvdarConfig(
            ck.number(c, "length", f"{path}.uvdar", uv.length, integer=True, positive=True),
            ck.number(c, "max_off_run", f"{path}.uvdar", uv.max_off_run, integer=True, positive=True),
            ck.number(c, "marker_baseline", f"{path}.uvdar", uv.marker_baseline, positive=True),
            ck.number(c, "cameras", f"{path}.uvdar", uv.cameras, integer=True, positive=True),
        )
        try:
            SequenceSetParams(uv.length, uv.max_off_run)
        except ValueError as e:
            ck.error(c.line, f"{path}.uvdar", str(e))
    sources = _sources(ck, u, path)

    role = ck.string(u, "role", path, "mission" if "mission" in u else "hold")
    mission = None
    if role not in ("mission", "flocking", "hold"):
        ck.error(u.lines["role"], f"{path}.role", f"unknown role {role!r}; available: ['flocking', 'hold', 'mission']")
    if role == "mission":
        if "mission" not in u:
            ck.error(u.line, f"{path}.mission", "role 'mission' needs a mission section")
        else:
            mission = _mission(ck, u["mission"], u.lines["mission"], f"{path}.mission")
    elif "mission" in u:
        ck.error(u.lines["mission"], f"{path}.mission", f"mission given but role is {role!r}")
    if None in (uid, prio, platform, curve, start, heading, payload, profile):
        return None
    return UavConfig(uid, platform.lower().replace(".", "_"), curve, prio, np.array(start), heading, payload,
                     tuple(mods), profile, constraints, sources, uv, mission, role == "flocking")


def validate_document(doc, duplicates=(), source: str = "<scenario>", path: Path | None = None) -> Scenario:
    ck = _Checker()
    for line, key in duplicates:
        ck.error(line, str(key), "duplicate key")
    if not isinstance(doc, _Map):
        ck.error(1, "", "scenario must be a mapping")
        raise ValidationError(ck.issues, source)
    ck.unknown(doc, _TOP_KEYS, "")
    name = ck.string(doc, "name", "", Path(source).stem)
    seed = ck.number(doc, "seed", "", 0, integer=True, nonneg=True)
    if seed is not None and seed >= 2 ** 64:
        ck.error(doc.lines["seed"], "seed", "must fit in 64 bits")
    duration = ck.number(doc, "duration", "", required=True, positive=True)
    ground = 0.0
    if (w := ck.section(doc, "world", "")) is not None:
        ck.unknown(w, {"ground_z"}, "world")
        ground = ck.number(w, "ground_z", "world", 0.0)
    channels = _channels(ck, doc)
    names = [c.name for c in channels]

    avoidance = AvoidanceConfig()
    if (a := ck.section(doc, "avoidance", "")) is not None:
        avoidance = ck.build(AvoidanceConfig, a, "avoidance")
    traj_ch = mission_ch = names[0] if names else ""
    period, budget = 0.2, None
    if (b := ck.section(doc, "broadcast", "")) is not None:
        ck.unknown(b, {"trajectory_channel", "mission_channel", "period", "budget"}, "broadcast")
        traj_ch = ck.string(b, "trajectory_channel", "broadcast", traj_ch)
        mission_ch = ck.string(b, "mission_channel", "broadcast", mission_ch)
        period = ck.number(b, "period", "broadcast", 0.2, positive=True)
        budget = ck.number(b, "budget", "broadcast", None, positive=True)
        for key, ch in (("trajectory_channel", traj_ch), ("mission_channel", mission_ch)):
            if names and ch not in names:
                ck.error(b.lines.get(key, b.line), f"broadcast.{key}",
                         f"unknown channel {ch!r}; declared: {names}")
    flocking = FlockingParams()
    if (f := ck.section(doc, "flocking", "")) is not None:
        flocking = ck.build(FlockingParams, f, "flocking")

    uavs = []
    raw = doc.get("uavs")
    if not isinstance(raw, _Seq) or not raw:
        ck.error(doc.lines.get("uavs", doc.line), "uavs", "expected a non-empty list of vehicles")
        raw = _Seq()
        raw.lines = []
    catalog, curves = platform_catalog(), available_curves()
    for i, u in enumerate(raw):
        cfg = _uav(ck, u, raw.lines[i], i, catalog, curves)
        if cfg is not None:
            uavs.append((raw.lines[i], i, cfg))
    # uniqueness is checked on the raw values so it is reported even when other fields are broken
    for key, what in (("id", "uav id"), ("priority", "priority")):
        seen: dict[int, int] = {}
        for i, u in enumerate(raw):
            if not isinstance(u, _Map) or not isinstance(u.get(key), int) or isinstance(u.get(key), bool):
                continue
            v = u[key]
            if v in seen:
                ck.error(u.lines[key], f"uavs[{i}].{key}", f"duplicate {what} {v} (first at uavs[{seen[v]}])")
            else:
                seen[v] = i
    flockers = [c for _, _, c in uavs if c.flocking]
    if flockers:
        sizes = {(c.uvdar.length, c.uvdar.max_off_run) for c in flockers}
        if len(sizes) > 1:
            ck.error(raw.line, "uavs", "flocking vehicles must share one uvdar sequence set")
        else:
            length, k = sizes.pop()
            try:
                n_ids = len(generate_set(SequenceSetParams(length, k)))
            except ValueError:
                n_ids = len(flockers)
            if n_ids < len(uavs):
                ck.error(raw.line, "uavs",
                         f"uvdar set L={length} max_off_run={k} has {n_ids} ids for {len(uavs)} vehicles")
    if ck.issues:
        raise ValidationError(ck.issues, source)
    return Scenario(name, seed, duration, tuple(c for _, _, c in uavs), tuple(channels), avoidance, ground,
                    traj_ch, mission_ch, period, budget, flocking, path)


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    doc, dups = _parse(text, source)
    return validate_document(doc, dups, source)


def resolve_scenario_path(name_or_path: str | Path) -> Path:
    """A file path, or the name of a bundled scenario."""
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = data_dir() / "scenarios" / f"{name_or_path}.yaml"
    if bundled.exists():
        return bundled
    return p


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in (data_dir() / "scenarios").glob("*.yaml"))


def load_scenario(path: str | Path) -> Scenario:
    p = resolve_scenario_path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ParseError(f"{path}: cannot read scenario: {e.strerror or e}") from None
    doc, dups = _parse(text, str(p))
    return validate_document(doc, dups, str(p), p)
