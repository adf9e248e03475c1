"""Experiment configuration: INI-style ``key = value`` sections with line-aware errors.

Every task reads an :class:`ExperimentConfig`. Values stay strings until a task
asks for them through the typed getters, which raise :class:`ConfigError`
carrying the file line of the offending entry (or of its section header when
the key is missing).
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

TASKS = (
    "phantom", "project", "train", "recon_fbp", "recon_sirt",
    "recon_tosm_ct", "recon_tosm_mri", "mask", "metrics", "nps",
)
# tasks whose output depends on a random stream
STOCHASTIC = {"train", "recon_tosm_ct", "recon_tosm_mri"}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


class ConfigError(ValueError):
    """Invalid or incomplete configuration (CLI exit status 2)."""

    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        loc = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(loc + message)


def _line_index(text: str) -> tuple[dict, dict]:
    sections, keys = {}, {}
    current = None
    for no, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            current = m.group(1).strip()
            sections.setdefault(current, no)
            continue
        m = _KEY_RE.match(line)
        if m and current is not None:
            keys[(current, m.group(1).strip())] = no
    return sections, keys


@dataclass
class ExperimentConfig:
    sections: dict = field(default_factory=dict)
    source: str = "<config>"
    _section_lines: dict = field(default_factory=dict, repr=False)
    _key_lines: dict = field(default_factory=dict, repr=False)

    # -- construction -------------------------------------------------------
    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.ParsingError as exc:
            lineno, line = exc.errors[0]
            raise ConfigError(f"cannot parse {line.strip()!r}", lineno, source) from None
        except configparser.Error as exc:
            raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None), source) from None
        sections = {s: dict(parser.items(s)) for s in parser.sections()}
        sec_lines, key_lines = _line_index(text)
        return cls(sections, source, sec_lines, key_lines)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
        return cls.from_text(text, str(path))

    def to_text(self) -> str:
        out = []
        for name, items in self.sections.items():
            out.append(f"[{name}]")
            out.extend(f"{k} = {v}" for k, v in items.items())
            out.append("")
        return "\n".join(out)

    def set(self, section: str, key: str, value) -> None:
        self.sections.setdefault(section, {})[key] = str(value)

    # -- lookups -------------------------------------------------------------
    def line_of(self, section: str, key: str | None = None) -> int | None:
        if key is not None and (section, key) in self._key_lines:
            return self._key_lines[(section, key)]
        return self._section_lines.get(section)

    def error(self, message: str, section: str, key: str | None = None) -> ConfigError:
        return ConfigError(message, self.line_of(section, key), self.source)

    def has(self, section: str, key: str) -> bool:
        return key in self.sections.get(section, {})

    def _raw(self, section: str, key: str, default):
        if self.has(section, key):
            return self.sections[section][key].strip()
        if default is _REQUIRED:
            where = f"[{section}]" if section in self.sections else f"section [{section}]"
            raise self.error(f"missing required key '{key}' in {where}", section, key)
        return default

    def get_str(self, section, key, default=None, choices=None):
        val = self._raw(section, key, default)
        if val is not None and choices is not None and val not in choices:
            raise self.error(f"{section}.{key} must be one of {', '.join(choices)}; got '{val}'", section, key)
        return val

    def _convert(self, section, key, default, fn, kind):
        val = self._raw(section, key, default)
        if val is default:
            return val
        try:
            return fn(val)
        except (TypeError, ValueError):
            raise self.error(f"{section}.{key} must be {kind}; got '{val}'", section, key) from None

    def get_int(self, section, key, default=None, minimum=None):
        val = self._convert(section, key, default, int, "an integer")
        if val is not None and minimum is not None and val < minimum:
            raise self.error(f"{section}.{key} must be >= {minimum}; got {val}", section, key)
        return val

    def get_float(self, section, key, default=None):
        return self._convert(section, key, default, float, "a number")

    def get_bool(self, section, key, default=None):
        return self._convert(section, key, default, _parse_bool, "true or false")

    def get_floats(self, section, key, default=None):
        return self._convert(section, key, default,
                             lambda s: tuple(float(x) for x in s.replace(",", " ").split()), "a list of numbers")

    def get_ints(self, section, key, default=None):
        return self._convert(section, key, default,
                             lambda s: tuple(int(x) for x in s.replace(",", " ").split()), "a list of integers")

    def get_path(self, section, key, default=None, must_exist=True, base: Path | None = None):
        val = self._raw(section, key, default)
        if val is None:
            return None
        path = Path(val)
        if base is not None and not path.is_absolute():
            path = base / path
        if must_exist and not path.exists():
            raise self.error(f"{section}.{key} points to missing file '{val}'", section, key)
        return path

    # -- common fields -------------------------------------------------------
    @property
    def task(self) -> str:
        return self.get_str("experiment", "task", _REQUIRED, choices=TASKS)

    def seed(self) -> int | None:
        return self.get_int("experiment", "seed", None, minimum=0)

    def require_seed(self) -> int:
        return self.get_int("experiment", "seed", _REQUIRED, minimum=0)


def _parse_bool(text: str) -> bool:
    table = {"true": True, "yes": True, "1": True, "on": True,
             "false": False, "no": False, "0": False, "off": False}
    if text.lower() not in table:
        raise ValueError(text)
    return table[text.lower()]


class _Required:
    def __repr__(self):
        return "<required>"


_REQUIRED = _Required()
REQUIRED = _REQUIRED


def validate(cfg: ExperimentConfig) -> str:
    """Structural checks shared by every task; returns the task name."""
    task = cfg.task
    if task in STOCHASTIC:
        cfg.require_seed()
    if task == "phantom" and cfg.get_str("phantom", "kind", "shepp3d") == "random_ellipsoids":
        cfg.require_seed()
    if task == "mask" and cfg.get_str("mask", "kind", "uniform1d") == "gaussian1d":
        cfg.require_seed()
    return task


def default_paper_protocol() -> ExperimentConfig:
    """Reference sparse-view CT protocol (29 cone-beam views, 12 levels x 150 iterations) on a 32^3 grid."""
    text = """\
[experiment]
task = recon_tosm_ct
seed = 0

[phantom]
kind = shepp3d
n = 32

[geometry]
mode = conebeam
num_views = 29
d_source = 500.0
d_detector = 500.0

[train]
levels = 12
sigma_min = 0.01
learning_rate = 0.001
steps = 10000
batch_size = 16
channels = 32
axes = transaxial

[sampler]
weights = 0.3333333333333333, 0.3333333333333333, 0.3333333333333334
iters_per_level = 150
base_step = 2e-05
dc_weight = 0.5
gamma1 = 1.0
sampler = langevin

[sirt]
iterations = 20
relaxation = 1.0
nonneg_clamp = true

[mask]
kind = uniform1d
acceleration = 2
acs_fraction = 0.15
"""
    return ExperimentConfig.from_text(text, "<protocol>")
