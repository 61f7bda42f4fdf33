"""Run configuration: one YAML/JSON document with a section per subsystem."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .backend import BackendSpec
from .data import SyntheticSpec
from .losses import LossWeights
from .pseudo import PerturbationConfig
from .trainer import HyperParams


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSection(_Section):
    M: int = Field(3, ge=1)
    C: int = Field(4, ge=1)
    U: int = Field(2, ge=1)
    d: int = Field(16, ge=2)
    N: int = Field(9, ge=1)
    samples_per_class_per_domain: int = Field(20, ge=1)
    domain_shift_scale: float = Field(0.3, ge=0)
    class_separation: float = Field(0.8, ge=0)
    within_class_noise: float = Field(0.3, ge=0)
    n_parts: int = Field(3, ge=1)
    part_scale: float = Field(0.4, ge=0)
    style_scale: float = Field(0.8, ge=0)
    seed: Optional[int] = None


class DatasetSection(_Section):
    path: Optional[str] = None
    synthetic: Optional[SyntheticSection] = None
    unknown_classes: Optional[list[str]] = None
    target_domain: Optional[str | int] = None

    def model_post_init(self, __context: Any) -> None:
        if self.path is None and self.synthetic is None:
            self.synthetic = SyntheticSection()


class BackendSection(_Section):
    kind: Literal["synthetic", "external"] = "synthetic"
    d: int = Field(16, ge=2)
    N: int = Field(9, ge=1)
    seed: Optional[int] = None
    model: Optional[str] = None
    text_map_noise: float = 0.1
    name_scale: float = 0.5
    patch_layer: str = "last"


class LossSection(_Section):
    alpha: float = Field(0.5, ge=0)
    beta: float = Field(0.3, ge=0)
    gamma: float = Field(0.1, ge=0)
    delta: float = Field(0.2, ge=0, le=1)
    tau: float = Field(0.07, gt=0)
    lambda_inner: float = Field(1.0, ge=0)


class HyperSection(_Section):
    epochs: int = Field(10, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    batch_size: int = Field(6, ge=1)
    pseudo_per_domain: int = Field(3, ge=0)
    ema_momentum: float = Field(0.9, ge=0, lt=1)
    phase_schedule: Literal["alternate_per_batch", "alternate_per_epoch"] = "alternate_per_batch"
    n_heads: int = Field(4, ge=1)
    n_unknown_tokens: int = Field(3, ge=1)
    weight_decay: float = Field(0.01, ge=0)
    query_init_std: float = Field(0.02, ge=0)
    use_semantic: bool = True
    loss_weights: LossSection = LossSection()
    seed: Optional[int] = None


class GenerationSection(_Section):
    sigma: float = Field(0.2, ge=0)
    seed: Optional[int] = None
    steps: int = Field(50, ge=1)
    guidance: float = Field(7.5, ge=1)
    backend: Literal["mock", "external"] = "mock"


class RunConfig(_Section):
    dataset: DatasetSection = DatasetSection()
    backend: BackendSection = BackendSection()
    hyper: HyperSection = HyperSection()
    generation: GenerationSection = GenerationSection()
    output_dir: str = "runs/default"
    seed: int = 0

    @field_validator("output_dir")
    @classmethod
    def _nonempty(cls, v: str) -> str:
        if not v:
            raise ValueError("output_dir must be nonempty")
        return v

    # -- derived domain objects -------------------------------------------

    def _seed(self, v: Optional[int]) -> int:
        return self.seed if v is None else v

    def synthetic_spec(self) -> SyntheticSpec:
        s = self.dataset.synthetic or SyntheticSection()
        fields = s.model_dump(exclude={"seed"})
        return SyntheticSpec(seed=self._seed(s.seed), **fields)

    def backend_spec(self) -> BackendSpec:
        b = self.backend.model_dump()
        b["seed"] = self._seed(b["seed"])
        return BackendSpec(**b)

    def hyperparams(self) -> HyperParams:
        h = self.hyper.model_dump(exclude={"loss_weights", "seed"})
        g = self.generation
        return HyperParams(
            seed=self._seed(self.hyper.seed),
            loss_weights=LossWeights(**self.hyper.loss_weights.model_dump()),
            perturbation=PerturbationConfig(sigma=g.sigma, seed=self._seed(g.seed)),
            guidance_scale=g.guidance, denoising_steps=g.steps, **h)


def _coerce(raw: str) -> Any:
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = nxt
        node[parts[-1]] = _coerce(raw)
    return doc


def load_config(path: str | Path | None = None, overrides: Sequence[str] = (),
                seed: int | None = None) -> RunConfig:
    """Read, override and validate a run config. ``seed`` replaces every seed in the document."""
    doc: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
        for section in ("backend", "hyper", "generation"):
            if isinstance(doc.get(section), dict):
                doc[section]["seed"] = None
        synth = (doc.get("dataset") or {}).get("synthetic")
        if isinstance(synth, dict):
            synth["seed"] = None
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def effective_config(cfg: RunConfig) -> dict:
    """The config with every seed resolved, as recorded in run manifests."""
    doc = cfg.model_dump()
    doc["backend"]["seed"] = cfg._seed(cfg.backend.seed)
    doc["hyper"]["seed"] = cfg._seed(cfg.hyper.seed)
    doc["generation"]["seed"] = cfg._seed(cfg.generation.seed)
    if doc["dataset"]["synthetic"] is not None:
        doc["dataset"]["synthetic"]["seed"] = cfg._seed(cfg.dataset.synthetic.seed)
    return doc
