"""Variable schemas: which demographic and physiological channels exist,
how each is encoded, its normal value and its reference bounds.

Schemas are data, read from an INI-style key-value file (see
``data/icu_benchmark.schema`` for the documented default).
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import SchemaError

KINDS = ("numeric", "categorical", "binary")
SYSTEMS = ("circulatory", "respiratory", "neurological", "other")


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str
    normal: float | str
    categories: tuple[str, ...] = ()
    units: str = ""
    system: str = "other"
    upper: float | None = None
    lower: float | None = None
    threshold: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind != "numeric":
            if len(self.categories) < 2:
                raise SchemaError(f"{self.name}: needs at least two categories")
            if self.category_index(self.normal) is None:
                raise SchemaError(f"{self.name}: normal value {self.normal!r} is not a category")
        if self.system not in SYSTEMS:
            raise SchemaError(f"{self.name}: unknown system {self.system!r}")

    @property
    def is_numeric(self) -> bool:
        return self.kind == "numeric"

    @property
    def width(self) -> int:
        """Number of encoded value columns (mask excluded)."""
        return 1 if self.is_numeric else len(self.categories)

    def category_index(self, value) -> int | None:
        """Index of ``value`` among the categories, matching on the label or
        on its numeric reading (so 1, 1.0 and "1" all hit category "1")."""
        label = str(value).strip()
        if label in self.categories:
            return self.categories.index(label)
        try:
            x = float(label)
        except ValueError:
            return None
        for i, c in enumerate(self.categories):
            try:
                if float(c) == x:
                    return i
            except ValueError:
                continue
        return None


@dataclass(frozen=True)
class Schema:
    demographics: tuple[Variable, ...]
    physiology: tuple[Variable, ...]
    name: str = "custom"
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        for group in (self.demographics, self.physiology):
            names = [v.name for v in group]
            if len(set(names)) != len(names):
                raise SchemaError("duplicate variable names in schema")
        if not self.physiology:
            raise SchemaError("schema has no physiological variables")
        self._index.update({v.name: i for i, v in enumerate(self.physiology)})

    @property
    def physio_names(self) -> list[str]:
        return [v.name for v in self.physiology]

    @property
    def demo_names(self) -> list[str]:
        return [v.name for v in self.demographics]

    def physio_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"unknown physiological variable {name!r}") from None

    @property
    def physio_width(self) -> int:
        """Encoded per-hour width: value columns plus one mask per channel."""
        return sum(v.width + 1 for v in self.physiology)

    @property
    def demo_width(self) -> int:
        return sum(v.width for v in self.demographics)

    def channel_groups(self) -> list[list[int]]:
        """Encoded column indices belonging to each physiological channel
        (value columns then mask), in schema order."""
        groups, start = [], 0
        for v in self.physiology:
            groups.append(list(range(start, start + v.width + 1)))
            start += v.width + 1
        return groups

    def mask_columns(self) -> list[int]:
        return [g[-1] for g in self.channel_groups()]

    def to_text(self) -> str:
        lines = []
        for prefix, group in (("demo", self.demographics), ("physio", self.physiology)):
            for v in group:
                lines.append(f"[{prefix}.{v.name}]")
                lines.append(f"kind = {v.kind}")
                if v.categories:
                    lines.append("categories = " + "|".join(v.categories))
                lines.append(f"normal = {v.normal}")
                if v.units:
                    lines.append(f"units = {v.units}")
                if prefix == "physio":
                    lines.append(f"system = {v.system}")
                for key in ("upper", "lower", "threshold"):
                    val = getattr(v, key)
                    if val is not None:
                        lines.append(f"{key} = {val!r}")
                lines.append("")
        return "\n".join(lines)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _opt_float(section, key):
    raw = section.get(key)
    return None if raw is None or raw.strip() == "" else float(raw)


def parse_schema(text: str, name: str = "custom") -> Schema:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise SchemaError(f"malformed schema: {exc}") from exc

    demo, physio = [], []
    for sec_name in parser.sections():
        group, _, var = sec_name.partition(".")
        if group not in ("demo", "physio") or not var:
            raise SchemaError(f"bad section name [{sec_name}]")
        sec = parser[sec_name]
        kind = sec.get("kind", "numeric").strip()
        cats = tuple(c.strip() for c in sec.get("categories", "").split("|") if c.strip())
        normal_raw = sec.get("normal")
        if normal_raw is None:
            raise SchemaError(f"{var}: missing normal value")
        normal = float(normal_raw) if kind == "numeric" else normal_raw.strip()
        variable = Variable(
            name=var,
            kind=kind,
            normal=normal,
            categories=cats,
            units=sec.get("units", "").strip(),
            system=sec.get("system", "other").strip(),
            upper=_opt_float(sec, "upper"),
            lower=_opt_float(sec, "lower"),
            threshold=_opt_float(sec, "threshold"),
        )
        (demo if group == "demo" else physio).append(variable)
    return Schema(tuple(demo), tuple(physio), name=name)


def load_schema(path: str | Path) -> Schema:
    path = Path(path)
    return parse_schema(path.read_text(), name=path.stem)


def default_schema() -> Schema:
    """The 76-wide MIMIC-III benchmark schema shipped with the package."""
    text = resources.files("protodoctor").joinpath("data/icu_benchmark.schema").read_text()
    return parse_schema(text, name="icu_benchmark")


def synthetic_schema(n_physio: int = 6) -> Schema:
    """Default demographics plus ``n_physio`` numeric channels named
    ``syn_00``, ``syn_01``, ... with normal value 0 and unit scale."""
    base = default_schema()
    physio = tuple(
        Variable(name=f"syn_{i:02d}", kind="numeric", normal=0.0, units="a.u.",
                 system=SYSTEMS[i % 3], upper=2.0, lower=-2.0)
        for i in range(n_physio)
    )
    return Schema(base.demographics, physio, name=f"synthetic{n_physio}")
