# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
"""Plain-text `key = value` configuration files.

Keys are dataclass field names; nested dataclasses use dotted keys::

    # PIE on a 20 Mbps plan
    discipline = docsis_pie
    link.rate_bps = 20_000_000
    link.base_rtt = 15ms
    pie.hard_limit_bytes = auto

Durations take a unit (`ns`, `us`, `ms`, `s`). Mappings are written as
`key: value, key: value`. Optional fields accept `auto` for "derive at run
time". `dump_config` prints a configuration that `parse_config` reads back
to an equal object.
"""
import dataclasses
import re
from enum import Enum
from pathlib import Path
from typing import Any
from typing import Dict
from typing import get_type_hints
from typing import List
from typing import Tuple
from typing import Type
from typing import TypeVar
from typing import Union

from upstream_aqm_sim.sim_core import NANOS_PER_MICROSECOND
from upstream_aqm_sim.sim_core import NANOS_PER_MILLISECOND
from upstream_aqm_sim.sim_core import NANOS_PER_SECOND
from upstream_aqm_sim.sim_core import SimTime

try:  # pragma: no cover
    from typing import get_args
    from typing import get_origin
except ImportError:  # pragma: no cover
    from typing_extensions import get_args  # type: ignore
    from typing_extensions import get_origin  # type: ignore

T = TypeVar("T")

AUTO = "auto"

_DURATION_UNITS = (
    ("s", NANOS_PER_SECOND),
    ("ms", NANOS_PER_MILLISECOND),
    ("us", NANOS_PER_MICROSECOND),
    ("ns", 1),
)
_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ns|us|ms|s)\s*$")


class ConfigError(ValueError):
    """A configuration file or value could not be used."""


def parse_duration(text: str) -> SimTime:
    """Parse `250ms`, `7s`, `1.5s` or `51200ns` into nanoseconds.

    Raises:
        ConfigError: If the text is not a duration with a unit.
    """
    match = _DURATION.match(text)
    if match is None:
        raise ConfigError(f"Not a duration: {text!r} (use ns, us, ms or s)")
    number, unit = match.groups()
    scale = dict(_DURATION_UNITS)[unit]
    nanos = float(number) * scale if "." in number else int(number) * scale
    if nanos != int(nanos):
        raise ConfigError(f"Duration {text!r} is not a whole number of nanoseconds")
    return SimTime(int(nanos))


def format_duration(nanos: int) -> str:
    """Format with the largest unit that represents `nanos` exactly."""
    for unit, scale in _DURATION_UNITS:
        if nanos % scale == 0:
            return f"{nanos // scale}{unit}"
    raise AssertionError("unreachable, ns divides everything")  # pragma: no cover


def _is_optional(hint: Any) -> bool:
    return get_origin(hint) is Union and type(None) in get_args(hint)


def _inner(hint: Any) -> Any:
    return next(arg for arg in get_args(hint) if arg is not type(None))


def _parse_scalar(hint: Any, text: str) -> Any:
    text = text.strip()
    if hint is SimTime:
        return parse_duration(text)
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(text)
        except ValueError:
            choices = ", ".join(member.value for member in hint)
            raise ConfigError(f"{text!r} is not one of: {choices}")
    if hint is bool:
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"Not a boolean: {text!r}")
    if hint is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"Not an integer: {text!r}")
    if hint is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"Not a number: {text!r}")
    if hint is str:
        return text
    raise ConfigError(f"Unsupported setting type {hint!r}")


def parse_value(hint: Any, text: str) -> Any:
    """Parse `text` as a value of the annotated type `hint`."""
    if _is_optional(hint):
        if text.strip() == AUTO:
            return None
        return parse_value(_inner(hint), text)
    if get_origin(hint) in (dict, Dict):
        key_hint, value_hint = get_args(hint)
        result = {}
        for item in filter(None, (part.strip() for part in text.split(","))):
            key, sep, value = item.partition(":")
            if not sep:
                raise ConfigError(f"Mapping item {item!r} lacks ':'")
            parsed_key = _parse_scalar(key_hint, key)
            if parsed_key in result:
                raise ConfigError(f"Mapping key {key.strip()!r} given twice")
            result[parsed_key] = _parse_scalar(value_hint, value)
        return result
    return _parse_scalar(hint, text)


def format_value(hint: Any, value: Any) -> str:
    """Inverse of `parse_value`."""
    if _is_optional(hint):
        return AUTO if value is None else format_value(_inner(hint), value)
    if get_origin(hint) in (dict, Dict):
        key_hint, value_hint = get_args(hint)
        return ", ".join(
            f"{format_value(key_hint, key)}: {format_value(value_hint, item)}"
            for key, item in value.items()
        )
    if hint is SimTime:
        return format_duration(value)
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _fields(cls: Type[Any]) -> Dict[str, Any]:
    hints = get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.init}


def as_record(obj: Any, prefix: str = "") -> Dict[str, str]:
    """Flatten a configuration dataclass into dotted keys and text values."""
    record: Dict[str, str] = {}
    for name, hint in _fields(type(obj)).items():
        value = getattr(obj, name)
        key = f"{prefix}{name}"
        if dataclasses.is_dataclass(hint):
            record.update(as_record(value, prefix=f"{key}."))
        else:
            record[key] = format_value(hint, value)
    return record


def dump_config(obj: Any) -> str:
    return "".join(f"{key} = {value}\n" for key, value in as_record(obj).items())


def _apply(obj: T, overrides: Dict[str, Tuple[int, str]], prefix: str = "") -> T:
    changes: Dict[str, Any] = {}
    for name, hint in _fields(type(obj)).items():
        key = f"{prefix}{name}"
        if dataclasses.is_dataclass(hint):
            nested = {k: v for k, v in overrides.items() if k.startswith(f"{key}.")}
            if nested:
                changes[name] = _apply(getattr(obj, name), nested, prefix=f"{key}.")
        elif key in overrides:
            lineno, text = overrides[key]
            try:
                changes[name] = parse_value(hint, text)
            except ConfigError as exc:
                raise ConfigError(f"line {lineno}: {key}: {exc}")
    try:
        return dataclasses.replace(obj, **changes)  # type: ignore
    except ValueError as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}")


def _known_keys(cls: Type[Any], prefix: str = "") -> List[str]:
    keys: List[str] = []
    for name, hint in _fields(cls).items():
        if dataclasses.is_dataclass(hint):
            keys.extend(_known_keys(hint, prefix=f"{prefix}{name}."))
        else:
            keys.append(f"{prefix}{name}")
    return keys


def parse_config(text: str, defaults: T) -> T:
    """Apply the settings in `text` on top of `defaults`.

    Raises:
        ConfigError: On syntax errors, unknown or repeated keys, bad values,
            or settings that violate the configuration's invariants.
    """
    known = set(_known_keys(type(defaults)))
    overrides: Dict[str, Tuple[int, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown setting {key!r}")
        if key in overrides:
            raise ConfigError(f"line {lineno}: {key!r} set twice")
        overrides[key] = (lineno, value.strip())
    return _apply(defaults, overrides)


def load_config(path: Path, defaults: T) -> T:
    """Read a configuration file; errors name the file."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}")
    try:
        return parse_config(text, defaults)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}")
