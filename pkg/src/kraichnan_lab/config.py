"""Sectioned key-value run configuration validated against the shipped schema."""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .covariance import CovarianceSpec
from .fieldsynth import Grid

TYPES = ("int", "float", "str", "bool", "floatlist")


class SchemaError(ValueError):
    """Config file or override does not match the schema."""


@dataclass(frozen=True)
class Field:
    type: str
    optional: bool
    default: object
    raw_default: str


def _parse(kind: str, text: str, where: str):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "floatlist":
            return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise SchemaError(f"{where}: cannot parse {text!r} as {kind}") from None
    raise SchemaError(f"{where}: unknown type {kind!r}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return "" if value is None else str(value)


def load_schema(text: str | None = None) -> dict:
    if text is None:
        text = resources.files(__package__).joinpath("schema.cfg").read_text()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=None)
    cp.optionxform = str
    cp.read_string(text)
    schema = {}
    for section in cp.sections():
        schema[section] = {}
        for key, spec in cp.items(section):
            kind, _, default = spec.strip().partition(" ")
            optional = kind.endswith("?")
            kind = kind.rstrip("?")
            if kind not in TYPES:
                raise SchemaError(f"schema [{section}] {key}: unknown type {kind!r}")
            value = None if (optional and not default.strip()) else _parse(kind, default, f"schema [{section}] {key}")
            schema[section][key] = Field(kind, optional, value, default.strip())
    return schema


class Config:
    """Typed values for every schema key, with user values and overrides applied."""

    def __init__(self, values: dict, schema: dict, source: str | None = None):
        self.values = values
        self.schema = schema
        self.source = source

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, dotted: str):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    def snapshot(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items()} for s, kv in self.values.items()}

    def to_text(self) -> str:
        lines = []
        for s, kv in self.values.items():
            lines.append(f"[{s}]")
            lines += [f"{k} = {_format(v)}" for k, v in kv.items()]
            lines.append("")
        return "\n".join(lines)

    def spec(self) -> CovarianceSpec:
        m = self["model"]
        return CovarianceSpec(m["dimension"], m["nu"], m["family"], m["sigma2"], m["corr_length"], m["support_radius"])

    def grid(self) -> Grid:
        g = self["grid"]
        return Grid(self["model"]["dimension"], g["points_per_side"], g["box_length"])


def set_value(values: dict, schema: dict, section: str, key: str, text: str, where: str) -> None:
    if section not in schema:
        raise SchemaError(f"{where}: unknown section [{section}]")
    if key not in schema[section]:
        raise SchemaError(f"{where}: unknown key {key!r} in [{section}]")
    f = schema[section][key]
    if f.optional and not text.strip():
        values[section][key] = None
    else:
        values[section][key] = _parse(f.type, text, where)


def load_config(path=None, overrides=(), schema: dict | None = None) -> Config:
    """Defaults from the schema, then the file at ``path``, then ``section.key=value`` overrides."""
    schema = schema or load_schema()
    values = {s: {k: f.default for k, f in kv.items()} for s, kv in schema.items()}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise SchemaError(f"{path}: {exc}") from None
        for section in cp.sections():
            for key, text in cp.items(section):
                set_value(values, schema, section, key, text, f"{Path(path).name} [{section}] {key}")
    for item in overrides:
        dotted, sep, text = item.partition("=")
        section, dot, key = dotted.strip().partition(".")
        if not sep or not dot:
            raise SchemaError(f"override {item!r} is not of the form section.key=value")
        set_value(values, schema, section, key, text, f"override {dotted}")
    return Config(values, schema, None if path is None else str(path))
