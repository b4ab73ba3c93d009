"""
RunConfig: every tunable of a run as one JSON key tree.

Sections mirror the module dataclasses. Missing keys take their defaults,
unknown keys are rejected, and scalar types are checked against the default's
type. Per-stage seeds are not configurable; they are derived from ``seed``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from weakseg3d.errors import InvalidArgumentError
from weakseg3d.fusion import FilterConfig
from weakseg3d.net.unet import UNetConfig
from weakseg3d.phantom import PhantomSpec
from weakseg3d.pipeline import ABLATIONS, IterConfig, PipelineConfig, SDNTrainConfig
from weakseg3d.sdn import NoiseAugConfig
from weakseg3d.ssn import SSNTrainConfig
from weakseg3d.weaklabel import AnnotationScheme

# fields overridden by derived seeds and therefore kept out of the document
_HIDDEN = {SSNTrainConfig: {"seed"}, NoiseAugConfig: {"seed"}}


@dataclass
class DataConfig:
    n_train: int = 30
    n_val: int = 10
    n_test: int = 0


@dataclass
class ExperimentGrid:
    ratios: tuple = (0.3,)
    schemes: tuple = ("hybrid",)
    ablations: tuple = ABLATIONS

    def __post_init__(self):
        if not self.ratios or not self.schemes or not self.ablations:
            raise InvalidArgumentError("experiment grid axes must be non-empty")
        bad = [a for a in self.ablations if a not in ABLATIONS]
        if bad:
            raise InvalidArgumentError(f"unknown ablations {bad}; expected some of {ABLATIONS}")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    data: DataConfig = field(default_factory=DataConfig)
    scheme: AnnotationScheme = field(default_factory=AnnotationScheme)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    experiment: ExperimentGrid = field(default_factory=ExperimentGrid)


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v


def _listify(v):
    return [_listify(x) for x in v] if isinstance(v, (list, tuple)) else v


def to_doc(obj) -> dict:
    hidden = _HIDDEN.get(type(obj), set())
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in hidden:
            continue
        v = getattr(obj, f.name)
        out[f.name] = to_doc(v) if dataclasses.is_dataclass(v) else _listify(v)
    return out


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidArgumentError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidArgumentError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidArgumentError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidArgumentError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise InvalidArgumentError(f"{path}: expected an array, got {value!r}")
        return _tuplify(value)
    return value


def from_doc(cls, doc, path: str = ""):
    """Build ``cls`` from a (possibly partial) document, defaults filling the gaps."""
    if not isinstance(doc, dict):
        raise InvalidArgumentError(f"{path or 'config'}: expected an object")
    base = cls()
    names = {f.name for f in dataclasses.fields(cls)} - _HIDDEN.get(cls, set())
    unknown = sorted(set(doc) - names)
    if unknown:
        raise InvalidArgumentError(f"{path or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for name in names:
        default = getattr(base, name)
        sub = f"{path}.{name}" if path else name
        if name not in doc:
            kwargs[name] = default
        elif dataclasses.is_dataclass(default):
            kwargs[name] = from_doc(type(default), doc[name], sub)
        else:
            kwargs[name] = _coerce(doc[name], default, sub)
    try:
        return cls(**kwargs)
    except InvalidArgumentError as e:
        raise InvalidArgumentError(f"{path or 'config'}: {e}") from e


def render(cfg: RunConfig) -> str:
    return json.dumps(to_doc(cfg), indent=2, sort_keys=True) + "\n"


def parse(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except ValueError as e:
        raise InvalidArgumentError(f"config is not valid JSON: {e}") from e
    return from_doc(RunConfig, doc)


def load(path) -> RunConfig:
    return parse(Path(path).read_text())
