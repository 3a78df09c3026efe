"""Run configuration: defaults, JSON overrides and stable digests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError
from .estimator import EstimatorConfig
from .fem import FEConfig, ParameterBox
from .mesh import DomainSpec
from .network import DEFAULT_LAYOUT, TrainingConfig
from .observation import ObservationConfig


@dataclass(frozen=True)
class SweepSpec:
    """Training grid (endpoints included) plus a seeded random validation set."""

    box: ParameterBox = ParameterBox()
    n_E: int = 40
    n_nu: int = 25
    n_val: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_E < 2 or self.n_nu < 2:
            raise ValidationError("sweep grids need n_E, n_nu >= 2")
        if self.n_val < 0:
            raise ValidationError("n_val must be non-negative")

    @property
    def n_train(self) -> int:
        return self.n_E * self.n_nu


@dataclass(frozen=True)
class RunConfig:
    domain: DomainSpec = DomainSpec()
    fe: FEConfig = FEConfig()
    observation: ObservationConfig | None = None  # None: derived from domain and fe
    training: TrainingConfig = TrainingConfig()
    estimator: EstimatorConfig = EstimatorConfig()
    sweep: SweepSpec = SweepSpec()
    layout: tuple[int, ...] = DEFAULT_LAYOUT
    init_seed: int = 0

    def obs(self) -> ObservationConfig:
        cfg = self.observation or ObservationConfig.default(self.domain, self.fe)
        cfg.check(self.domain, self.fe)
        return cfg

    def with_seed(self, seed: int) -> "RunConfig":
        """Apply one global seed to every seeded stage."""
        return dataclasses.replace(
            self,
            training=dataclasses.replace(self.training, rng_seed=seed),
            sweep=dataclasses.replace(self.sweep, seed=seed),
            init_seed=seed,
        )


def _build(cls, doc: dict, section: str):
    if not isinstance(doc, dict):
        raise ValidationError(f"config section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ValidationError(f"unknown keys in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ValidationError(f"bad value in {section!r}: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    sections = {"domain", "fe", "observation", "training", "estimator", "sweep", "layout", "init_seed"}
    unknown = sorted(set(doc) - sections)
    if unknown:
        raise ValidationError(f"unknown config sections: {', '.join(unknown)}")
    kw = {}
    if "domain" in doc:
        kw["domain"] = _build(DomainSpec, doc["domain"], "domain")
    if "fe" in doc:
        kw["fe"] = _build(FEConfig, doc["fe"], "fe")
    if doc.get("observation") is not None:
        o = dict(doc["observation"])
        if "points" in o:
            o["points"] = tuple(tuple(pt) for pt in o["points"])
        kw["observation"] = _build(ObservationConfig, o, "observation")
    if "training" in doc:
        kw["training"] = _build(TrainingConfig, doc["training"], "training")
    box = None
    if "sweep" in doc:
        s = dict(doc["sweep"])
        if "box" in s:
            box = _build(ParameterBox, s["box"], "sweep.box")
            s["box"] = box
        kw["sweep"] = _build(SweepSpec, s, "sweep")
    if "estimator" in doc:
        e = dict(doc["estimator"])
        if "box" in e:
            e["box"] = _build(ParameterBox, e["box"], "estimator.box")
        elif box is not None:
            e["box"] = box
        kw["estimator"] = _build(EstimatorConfig, e, "estimator")
    elif box is not None:
        kw["estimator"] = EstimatorConfig(box=box)
    if "layout" in doc:
        kw["layout"] = tuple(int(n) for n in doc["layout"])
    if "init_seed" in doc:
        kw["init_seed"] = int(doc["init_seed"])
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    """Defaults overridden by the sections present in a JSON file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a JSON object")
    return config_from_dict(doc)


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj


def canonical_json(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def config_digests(cfg: RunConfig) -> dict[str, str]:
    return {
        "mesh": digest(cfg.domain),
        "fe": digest(cfg.fe),
        "observation": digest(cfg.obs()),
        "training": digest(cfg.training),
        "estimator": digest(cfg.estimator),
        "sweep": digest(cfg.sweep),
    }
