"""Layered configuration: packaged defaults <- user file <- overrides.

The packaged ``data/default.ini`` is the single home of every numeric
default.  A :class:`Config` is a two-level mapping (section -> key -> string)
with typed accessors; its canonical serialization feeds the config hash that
run manifests record.
"""

import configparser
import hashlib
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    pass


class Config:
    def __init__(self, sections: dict[str, dict[str, str]]):
        self._sections = {s: dict(kv) for s, kv in sections.items()}

    # -- construction -----------------------------------------------------

    @classmethod
    def default(cls) -> "Config":
        text = resources.files("rolltact.data").joinpath("default.ini").read_text()
        return cls._parse(text)

    @classmethod
    def load(cls, path: str | Path | None = None,
             overrides: dict[str, str] | None = None) -> "Config":
        """Defaults layered with an optional user file and ``sec.key=value`` overrides."""
        cfg = cls.default()
        if path is not None:
            user = cls._parse(Path(path).read_text())
            for sec, kv in user._sections.items():
                cfg._sections.setdefault(sec, {}).update(kv)
        for dotted, value in (overrides or {}).items():
            if "." not in dotted:
                raise ConfigError(f"override must be section.key=value: {dotted!r}")
            sec, key = dotted.split(".", 1)
            cfg._sections.setdefault(sec, {})[key] = str(value)
        return cfg

    @classmethod
    def _parse(cls, text: str) -> "Config":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.read_string(text)
        return cls({s: dict(parser[s]) for s in parser.sections()})

    # -- typed access ------------------------------------------------------

    def _raw(self, section: str, key: str) -> str:
        try:
            return self._sections[section][key]
        except KeyError:
            raise ConfigError(f"missing config entry [{section}] {key}") from None

    def get_str(self, section: str, key: str) -> str:
        return self._raw(section, key)

    def get_float(self, section: str, key: str) -> float:
        return float(self._raw(section, key))

    def get_int(self, section: str, key: str) -> int:
        return int(float(self._raw(section, key)))

    def get_bool(self, section: str, key: str) -> bool:
        return bool(int(float(self._raw(section, key))))

    def get_vec(self, section: str, key: str) -> tuple[float, ...]:
        return tuple(float(p) for p in self._raw(section, key).split(","))

    def section(self, name: str) -> dict[str, str]:
        return dict(self._sections.get(name, {}))

    # -- identity ----------------------------------------------------------

    def canonical(self) -> str:
        lines = []
        for sec in sorted(self._sections):
            for key in sorted(self._sections[sec]):
                lines.append(f"{sec}.{key}={self._sections[sec][key]}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.canonical())
