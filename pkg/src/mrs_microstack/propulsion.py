"""Static thrust-stand propulsion curves, configuration modifiers and hover endurance."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .core import G0

DATA_ENV = "MRS_MICROSTACK_DATA"

DEFAULT_USABLE_FRACTION = 0.7
DEFAULT_AVIONICS_POWER = 70.0  # W


class EmptyCurve(ValueError):
    pass


class OutOfRange(ValueError):
    pass


class Unreachable(ValueError):
    pass


class UnknownCatalogEntry(KeyError):
    pass


@dataclass(frozen=True)
class PropulsionCurve:
    """Tabulated static thrust-stand measurements, one row per throttle point.

    ``printed_power``/``printed_efficiency`` keep the as-published columns
    (when the source file has them) so they can be cross-checked against the
    recomputed ``power`` and ``efficiency``.
    """

    name: str
    throttle: np.ndarray  # %
    thrust: np.ndarray  # N
    rpm: np.ndarray
    voltage: np.ndarray  # V
    current: np.ndarray  # A
    printed_power: np.ndarray | None = None
    printed_efficiency: np.ndarray | None = None

    @property
    def power(self) -> np.ndarray:
        return self.voltage * self.current

    @property
    def efficiency(self) -> np.ndarray:
        """Grams of thrust per watt."""
        return (self.thrust / G0 * 1000.0) / self.power

    @property
    def max_thrust(self) -> float:
        return float(self.thrust[-1])

    def __len__(self) -> int:
        return len(self.throttle)


@dataclass(frozen=True)
class ConfigModifier:
    thrust_factor: float = 1.0
    current_factor: float = 1.0
    power_factor: float = 1.0

    def __post_init__(self):
        for name in ("thrust_factor", "current_factor", "power_factor"):
            v = getattr(self, name)
            if not 0.0 < v <= 2.0:
                raise ValueError(f"{name}={v} outside (0, 2]")


IDENTITY = ConfigModifier()
# shroud around the propeller: thrust roughly unchanged, ~5% less current
DUCTED_FAN = ConfigModifier(current_factor=0.95)
# shroud plus ducting below the propeller: ~20% thrust loss
DUCTED_WITH_DUCTING = ConfigModifier(thrust_factor=0.80)
# stacked counter-rotating pair: ~20% more power for the same thrust
COAXIAL = ConfigModifier(power_factor=1.20)

MODIFIERS = {
    "identity": IDENTITY,
    "ducted_fan": DUCTED_FAN,
    "ducted_with_ducting": DUCTED_WITH_DUCTING,
    "coaxial": COAXIAL,
}


@dataclass(frozen=True)
class PlatformSpec:
    name: str
    takeoff_mass: float  # kg
    rotor_count: int
    battery_capacity: float  # Wh
    prop_size: float  # inch
    dimension: float  # mm, main diagonal without propellers
    reference_flight_time: float  # min
    layout: str = "flat"

    def __post_init__(self):
        if self.rotor_count not in (4, 8):
            raise ValueError(f"rotor_count must be 4 or 8, got {self.rotor_count}")
        if self.layout not in ("flat", "coaxial"):
            raise ValueError(f"unknown layout {self.layout!r}")
        for name in ("takeoff_mass", "battery_capacity", "prop_size", "dimension",
                     "reference_flight_time"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Violation:
    rule: str
    rows: tuple[int, ...]
    detail: str


@dataclass(frozen=True)
class HoverResult:
    per_motor_thrust: float
    throttle: float
    per_motor_power: float
    electrical_power: float
    endurance: float  # min


def validate_curve(curve: PropulsionCurve) -> list[Violation]:
    """Return every violated monotonicity / consistency rule (empty list if valid)."""
    n = len(curve)
    if n == 0:
        raise EmptyCurve("curve has no rows")
    if n < 2:
        raise EmptyCurve("curve needs at least two rows")
    out: list[Violation] = []
    for col in ("throttle", "thrust", "rpm", "current"):
        v = getattr(curve, col)
        for i in range(n - 1):
            if not v[i + 1] > v[i]:
                out.append(Violation(f"{col}_increasing", (i, i + 1),
                                     f"{col} {v[i]} -> {v[i + 1]}"))
    v = curve.voltage
    for i in range(n - 1):
        if v[i + 1] > v[i]:
            out.append(Violation("voltage_non_increasing", (i, i + 1), f"voltage {v[i]} -> {v[i + 1]}"))
    if curve.printed_power is not None:
        for i, (p, vi) in enumerate(zip(curve.printed_power, curve.power)):
            if abs(p - vi) > 0.005 * vi:
                out.append(Violation("power_consistent", (i,), f"printed {p} vs V*I {vi:.4f}"))
    if curve.throttle[0] < 0 or curve.throttle[-1] > 100:
        out.append(Violation("throttle_range", (0, n - 1), "throttle outside [0, 100]"))
    return out


def _interp(curve: PropulsionCurve, column: np.ndarray, throttle: float) -> float:
    lo, hi = curve.throttle[0], curve.throttle[-1]
    if not lo <= throttle <= hi:
        raise OutOfRange(f"throttle {throttle}% outside tabulated [{lo}, {hi}]")
    return float(np.interp(throttle, curve.throttle, column))


def thrust_at(curve: PropulsionCurve, throttle: float) -> float:
    return _interp(curve, curve.thrust, throttle)


def current_at(curve: PropulsionCurve, throttle: float) -> float:
    return _interp(curve, curve.current, throttle)


def voltage_at(curve: PropulsionCurve, throttle: float) -> float:
    return _interp(curve, curve.voltage, throttle)


def throttle_for(curve: PropulsionCurve, thrust: float) -> float:
    """Inverse of :func:`thrust_at` on the tabulated range."""
    if thrust > curve.thrust[-1]:
        raise Unreachable(f"{thrust:.3f} N exceeds curve maximum {curve.thrust[-1]} N")
    if thrust < curve.thrust[0]:
        raise OutOfRange(f"{thrust:.3f} N below lowest tabulated thrust {curve.thrust[0]} N")
    i = int(np.searchsorted(curve.thrust, thrust, side="right")) - 1
    i = min(i, len(curve) - 2)
    t0, t1 = curve.thrust[i], curve.thrust[i + 1]
    u = (thrust - t0) / (t1 - t0)
    return float(curve.throttle[i] + u * (curve.throttle[i + 1] - curve.throttle[i]))


def apply_modifier(curve: PropulsionCurve, modifier: ConfigModifier, name: str | None = None) -> PropulsionCurve:
    """Scale thrust and current columns.

    The power factor is carried by the current column: voltage is set by the
    battery, so extra electrical power has to show up as extra current.
    """
    cf = modifier.current_factor * modifier.power_factor
    printed_power = None if curve.printed_power is None else curve.printed_power * cf
    printed_eff = None
    if curve.printed_efficiency is not None:
        printed_eff = curve.printed_efficiency * modifier.thrust_factor / cf
    return replace(
        curve,
        name=name or curve.name,
        thrust=curve.thrust * modifier.thrust_factor,
        current=curve.current * cf,
        printed_power=printed_power,
        printed_efficiency=printed_eff,
    )


def hover_analysis(
    spec: PlatformSpec,
    curve: PropulsionCurve,
    payload: float = 0.0,
    usable_fraction: float = DEFAULT_USABLE_FRACTION,
    avionics_power: float = DEFAULT_AVIONICS_POWER,
) -> HoverResult:
    if payload < 0:
        raise ValueError("payload must be non-negative")
    if spec.layout == "coaxial":
        curve = apply_modifier(curve, COAXIAL)
    per_motor = (spec.takeoff_mass + payload) * G0 / spec.rotor_count
    if per_motor > curve.max_thrust:
        raise Unreachable(
            f"{spec.name} needs {per_motor:.3f} N per motor, curve {curve.name} tops out at "
            f"{curve.max_thrust:.2f} N"
        )
    throttle = throttle_for(curve, per_motor)
    motor_power = voltage_at(curve, throttle) * current_at(curve, throttle)
    power = spec.rotor_count * motor_power + avionics_power
    endurance = usable_fraction * spec.battery_capacity / power * 60.0
    return HoverResult(per_motor, throttle, motor_power, power, endurance)


# -- catalogs ---------------------------------------------------------------


def data_dir() -> Path:
    override = os.environ.get(DATA_ENV)
    if override:
        return Path(override)
    return Path(str(resources.files("mrs_microstack") / "data"))


def _read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    rows = []
    header = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if header is None:
            header = parts
        else:
            if len(parts) != len(header):
                raise ValueError(f"{path}: row {parts} does not match header {header}")
            rows.append(parts)
    if header is None:
        raise EmptyCurve(f"{path}: no header line")
    return header, rows


def read_curve(path: str | Path, name: str | None = None) -> PropulsionCurve:
    path = Path(path)
    header, rows = _read_table(path)
    if not rows:
        raise EmptyCurve(f"{path}: no data rows")
    cols = {h: np.array([float(r[i]) for r in rows]) for i, h in enumerate(header)}
    missing = {"throttle", "thrust", "rpm", "voltage", "current"} - cols.keys()
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return PropulsionCurve(
        name=name or path.stem,
        throttle=cols["throttle"],
        thrust=cols["thrust"],
        rpm=cols["rpm"],
        voltage=cols["voltage"],
        current=cols["current"],
        printed_power=cols.get("power"),
        printed_efficiency=cols.get("efficiency"),
    )


def available_curves() -> list[str]:
    return sorted(p.stem for p in (data_dir() / "curves").glob("*.txt"))


def load_curve(name: str) -> PropulsionCurve:
    path = data_dir() / "curves" / f"{name}.txt"
    if not path.exists():
        raise UnknownCatalogEntry(f"unknown curve {name!r}; available: {available_curves()}")
    return read_curve(path, name)


def read_platforms(path: str | Path) -> dict[str, PlatformSpec]:
    header, rows = _read_table(Path(path))
    out = {}
    for r in rows:
        rec = dict(zip(header, r))
        spec = PlatformSpec(
            name=rec["name"],
            takeoff_mass=float(rec["takeoff_mass"]),
            rotor_count=int(rec["rotor_count"]),
            battery_capacity=float(rec["battery_capacity"]),
            prop_size=float(rec["prop_size"]),
            dimension=float(rec["dimension"]),
            reference_flight_time=float(rec["reference_flight_time"]),
            layout=rec.get("layout", "flat"),
        )
        out[spec.name] = spec
    return out


def platform_catalog() -> dict[str, PlatformSpec]:
    return read_platforms(data_dir() / "platforms.txt")


def load_platform(name: str) -> PlatformSpec:
    catalog = platform_catalog()
    key = name.lower().replace(".", "_")
    if key not in catalog:
        raise UnknownCatalogEntry(f"unknown platform {name!r}; available: {sorted(catalog)}")
    return catalog[key]
