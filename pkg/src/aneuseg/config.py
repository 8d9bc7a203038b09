"""YAML run configuration with a JSON schema derived from the config dataclasses.

A config file has up to six top-level sections, each optional::

    preprocess: {...}   # PreprocessConfig fields
    coarse: {...}       # CoarseConfig fields
    fine: {...}         # FineConfig fields
    loss: {...}         # LossParams fields
    phantom: {...}      # PhantomSpec fields
    pipeline: {folds, output_dir, rng_seed, merge, augment}

Unknown keys and wrongly typed values are rejected with the file line and
column of the offending node.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .coarse import CoarseConfig
from .fine import FineConfig
from .losses import LossParams
from .phantom import PhantomSpec
from .pipeline import PipelineConfig
from .preprocessing import PreprocessConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "preprocess": PreprocessConfig,
    "coarse": CoarseConfig,
    "fine": FineConfig,
    "loss": LossParams,
    "phantom": PhantomSpec,
}
PIPELINE_KEYS = ("folds", "output_dir", "rng_seed", "merge", "augment")


def _value_schema(default: Any) -> dict:
    if isinstance(default, bool):
        return {"type": "boolean"}
    if isinstance(default, int):
        return {"type": "integer"}
    if isinstance(default, float):
        return {"type": "number"}
    if isinstance(default, str):
        return {"type": "string"}
    if isinstance(default, (tuple, list)):
        items = _value_schema(default[0]) if default else {}
        return {"type": "array", "items": items, "minItems": 1}
    raise TypeError(f"no schema for default {default!r}")


def _section_schema(cls) -> dict:
    instance = cls()
    props = {f.name: _value_schema(getattr(instance, f.name)) for f in dataclasses.fields(cls)}
    return {"type": "object", "properties": props, "additionalProperties": False}


def config_schema() -> dict:
    pipeline = PipelineConfig()
    props = {name: _section_schema(cls) for name, cls in SECTIONS.items()}
    props["pipeline"] = {
        "type": "object",
        "properties": {k: _value_schema(getattr(pipeline, k)) for k in PIPELINE_KEYS},
        "additionalProperties": False,
    }
    props["pipeline"]["properties"]["merge"] = {"enum": ["or", "max"]}
    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "aneuseg run configuration",
        "type": ["object", "null"],
        "properties": props,
        "additionalProperties": False,
    }


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def with_seed(self, seed: int | None) -> "RunConfig":
        """Copy with every ``rng_seed`` replaced by ``seed`` (unchanged when None)."""
        if seed is None:
            return self
        p = self.pipeline
        return RunConfig(
            PipelineConfig(
                preprocess=dataclasses.replace(p.preprocess, rng_seed=seed),
                coarse=dataclasses.replace(p.coarse, rng_seed=seed),
                fine=dataclasses.replace(p.fine, rng_seed=seed),
                loss=p.loss,
                folds=p.folds,
                output_dir=p.output_dir,
                rng_seed=seed,
                merge=p.merge,
                augment=p.augment,
            ),
            dataclasses.replace(self.phantom, rng_seed=seed),
        )


def _node_at(node: yaml.Node, path) -> yaml.Node:
    for key in path:
        if isinstance(node, yaml.MappingNode):
            match = [v for k, v in node.value if k.value == key]
            if not match:
                return node
            node = match[0]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            return node
    return node


def _where(source: str, node: yaml.Node | None) -> str:
    if node is None:
        return f"{source}:1:1"
    mark = node.start_mark
    return f"{source}:{mark.line + 1}:{mark.column + 1}"


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    validator = jsonschema.Draft7Validator(config_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        node = _node_at(root, err.absolute_path) if root is not None else None
        if err.validator == "additionalProperties" and node is not None:
            # point at the first unexpected key rather than the enclosing mapping
            allowed = set(err.schema.get("properties", {}))
            for k, _ in getattr(node, "value", []):
                if k.value not in allowed:
                    node = k
                    break
        dotted = ".".join(map(str, err.absolute_path)) or "<root>"
        raise ConfigError(f"{_where(source, node)}: {dotted}: {err.message}")
    data = data or {}
    built = {}
    for name, cls in SECTIONS.items():
        built[name] = _build(cls, data.get(name) or {}, source, root, name)
    pipeline = _build(
        PipelineConfig,
        dict(data.get("pipeline") or {}, **{k: built[k] for k in ("preprocess", "coarse", "fine", "loss")}),
        source,
        root,
        "pipeline",
    )
    return RunConfig(pipeline, built["phantom"])


def _build(cls, kwargs: dict, source: str, root, section: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        node = _node_at(root, [section]) if root is not None else None
        raise ConfigError(f"{_where(source, node)}: {section}: {exc}") from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    p = cfg.pipeline
    doc = {name: _plain(dataclasses.asdict(getattr(p, name))) for name in ("preprocess", "coarse", "fine", "loss")}
    doc["phantom"] = _plain(dataclasses.asdict(cfg.phantom))
    doc["pipeline"] = {k: getattr(p, k) for k in PIPELINE_KEYS}
    return yaml.safe_dump(doc, sort_keys=False)


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def schema_json() -> str:
    return json.dumps(config_schema(), indent=2) + "\n"
