"""Experiment configuration: line-oriented ``key = value`` files.

Keys carry a section prefix (``graph.``, ``sampling.``, ``ssd.``, ``host.``,
``pipeline.``); ``#`` starts a comment. Every key has a default, and
:func:`resolved_items` lists the full resolved set.
"""

from __future__ import annotations

import dataclasses
import enum
import os
import types
import typing
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .graph import CsrGraph, KroneckerBase, kronecker_expand, load_csr, powerlaw_graph, triangle
from .hostio import HostConfig
from .pipeline import PipelineConfig
from .sampler import RandomWalkConfig, SamplingConfig
from .storage import SsdConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class GraphRecipe:
    """Seed graph plus Kronecker expansion."""

    seed: str = "powerlaw"  # "triangle", "powerlaw", or a CSR file path
    seed_nodes: int = 1000
    seed_avg_degree: float = 10.0
    seed_exponent: float = 2.5
    seed_rng: int = 0
    base: str = "1,1;1,1"
    reps: int = 1
    id_width: int = 8

    def base_pattern(self) -> KroneckerBase:
        return KroneckerBase.from_matrix(parse_matrix(self.base), self.reps)

    def build(self) -> CsrGraph:
        if self.seed == "triangle":
            g = triangle()
        elif self.seed == "powerlaw":
            g = powerlaw_graph(self.seed_nodes, self.seed_avg_degree, self.seed_exponent,
                               self.seed_rng)
        else:
            g = load_csr(self.seed)
        g = CsrGraph(g.indptr, g.indices, self.id_width)
        return kronecker_expand(g, self.base_pattern())


@dataclass(frozen=True)
class GraphSource:
    path: str | None = None
    recipe: GraphRecipe = field(default_factory=GraphRecipe)

    def load(self) -> CsrGraph:
        if self.path is not None:
            return load_csr(self.path, mmap=True)
        return self.recipe.build()


@dataclass(frozen=True)
class SamplingSection:
    kind: str = "sage"  # "sage" (multi-hop neighbor sampling) or "walk"
    batch_size: int = 1024
    fanouts: tuple[int, ...] = (25, 10)
    with_replacement: bool = True
    seed: int = 0
    walk_length: int = 2
    walks_per_target: int = 1

    def build(self) -> SamplingConfig | RandomWalkConfig:
        if self.kind == "sage":
            return SamplingConfig(self.batch_size, self.fanouts, self.with_replacement, self.seed)
        if self.kind == "walk":
            return RandomWalkConfig(self.walk_length, self.walks_per_target, self.seed,
                                    self.batch_size)
        raise ValueError(f"sampling.kind must be 'sage' or 'walk', got {self.kind!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    graph: GraphSource
    sampling: SamplingSection
    ssd: SsdConfig
    host: HostConfig
    pipeline: PipelineConfig


SECTIONS = {
    "graph": GraphRecipe,  # plus graph.path
    "sampling": SamplingSection,
    "ssd": SsdConfig,
    "host": HostConfig,
    "pipeline": PipelineConfig,
}


def parse_matrix(text: str) -> np.ndarray:
    rows = [r.replace(",", " ").split() for r in text.replace("/", ";").split(";") if r.strip()]
    if not rows or any(len(r) != len(rows) for r in rows):
        raise ValueError(f"base matrix {text!r} must be square, rows separated by ';'")
    m = np.array([[int(x) for x in r] for r in rows], dtype=np.int64)
    if ((m != 0) & (m != 1)).any():
        raise ValueError("base matrix entries must be 0 or 1")
    return m


def parse_lines(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """``key -> (raw value, line number)``; later lines override earlier ones."""
    out = {}
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", no, source)
        key, value = (p.strip() for p in body.split("=", 1))
        if not key or "." not in key:
            raise ConfigError(f"key {key!r} needs a section prefix such as 'ssd.'", no, source)
        out[key] = (value, no)
    return out


def _convert(raw: str, hint, default):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() in ("none", "auto", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(raw, inner[0], default)
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if hint is int:
        return int(raw.replace("_", ""), 0)
    if hint is float:
        return float(raw)
    if hint is str:
        return raw
    if origin is tuple:
        return tuple(int(x) for x in raw.replace(",", " ").split())
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        return hint.parse(raw) if hasattr(hint, "parse") else hint(raw)
    raise ValueError(f"unsupported setting type {hint!r}")


def build_spec(entries: dict[str, tuple[str, int]], source: str = "<config>") -> ExperimentSpec:
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    graph_path = None
    for key, (raw, line) in entries.items():
        section, _, name = key.partition(".")
        if key == "graph.path":
            graph_path = raw or None
            continue
        cls = SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown section {section!r} in {key!r}", line, source)
        hints = typing.get_type_hints(cls)
        if name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown key {key!r}", line, source)
        try:
            values[section][name] = _convert(raw, hints[name], None)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line, source) from None
    try:
        recipe = GraphRecipe(**values["graph"])
        if graph_path is not None and values["graph"]:
            raise ConfigError("give either graph.path or a generation recipe, not both",
                              entries["graph.path"][1], source)
        spec = ExperimentSpec(
            GraphSource(graph_path, recipe),
            SamplingSection(**values["sampling"]),
            SsdConfig(**values["ssd"]),
            HostConfig(**values["host"]),
            PipelineConfig(**values["pipeline"]),
        )
        spec.sampling.build()
        recipe.base_pattern()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), None, source) from None
    return spec


def load_spec(path: str | os.PathLike | None = None, overrides: list[str] = ()) -> ExperimentSpec:
    entries: dict[str, tuple[str, int]] = {}
    source = "<config>"
    if path is not None:
        source = os.fspath(path)
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", None, source) from None
        entries.update(parse_lines(text, source))
    for i, item in enumerate(overrides, start=1):
        got = parse_lines(item, f"--set #{i}")
        if not got:
            raise ConfigError(f"empty override {item!r}", None, f"--set #{i}")
        entries.update(got)
    return build_spec(entries, source)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def resolved_items(spec: ExperimentSpec) -> list[tuple[str, str]]:
    items = []
    if spec.graph.path is not None:
        items.append(("graph.path", spec.graph.path))
    else:
        items += [(f"graph.{f.name}", _fmt(getattr(spec.graph.recipe, f.name)))
                  for f in fields(GraphRecipe)]
    for section, obj in (("sampling", spec.sampling), ("ssd", spec.ssd), ("host", spec.host),
                         ("pipeline", spec.pipeline)):
        items += [(f"{section}.{f.name}", _fmt(getattr(obj, f.name))) for f in fields(obj)]
    return items


def render_config(spec: ExperimentSpec) -> str:
    return "".join(f"{k} = {v}\n" for k, v in resolved_items(spec))


def with_seed(spec: ExperimentSpec, seed: int) -> ExperimentSpec:
    return dataclasses.replace(spec, sampling=replace(spec.sampling, seed=seed))
