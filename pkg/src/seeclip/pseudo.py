"""Pseudo-unknown synthesis: token perturbation, PP/NP conditions and generation backends."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import archive

POSITIVE_TEMPLATE = "A {} image of an unknown class"


class GenerationUnavailableError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbationConfig:
    sigma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def perturb_semantic_tokens(tokens, cfg: PerturbationConfig, request: Sequence[int] = ()) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma^2)`` noise to every token coordinate.

    ``request`` keys an independent noise stream under ``cfg.seed``.
    """
    t = _to_numpy(tokens)
    if not np.isfinite(t).all():
        raise ValueError("tokens must be finite")
    if cfg.sigma == 0:
        return t.copy()
    rng = np.random.default_rng([cfg.seed, *request])
    return t + cfg.sigma * rng.standard_normal(t.shape)


def build_positive_prompt(domain_name: str) -> str:
    if not domain_name:
        raise ValueError("domain name must be nonempty")
    return POSITIVE_TEMPLATE.format(domain_name)


def build_negative_prompt(known_class_names: Sequence[str]) -> str:
    if not known_class_names:
        raise ValueError("negative prompt needs at least one known class name")
    return ", ".join(known_class_names)


@dataclass(frozen=True)
class GenerationCondition:
    positive_text: str
    negative_text: str
    visual_condition: np.ndarray  # K x d, projected perturbed tokens
    perturbed_tokens: np.ndarray  # K x d, before projection
    guidance_scale: float = 7.5
    denoising_steps: int = 50
    sigma: float = 0.0
    seed: int = 0
    domain_name: str | None = None

    def __post_init__(self):
        if self.denoising_steps < 1:
            raise ValueError("denoising_steps must be >= 1")
        if self.guidance_scale < 1:
            raise ValueError("guidance_scale must be >= 1")


def build_joint_condition(positive_text: str, negative_text: str, perturbed_tokens, projections,
                          steps: int = 50, guidance: float = 7.5, *, sigma: float = 0.0,
                          seed: int = 0, domain_name: str | None = None) -> GenerationCondition:
    tokens = _to_numpy(perturbed_tokens)
    with torch.no_grad():
        visual = projections.psi(torch.as_tensor(tokens)) if projections is not None else torch.as_tensor(tokens)
    return GenerationCondition(positive_text, negative_text, _to_numpy(visual), tokens,
                               guidance_scale=guidance, denoising_steps=steps,
                               sigma=sigma, seed=seed, domain_name=domain_name)


@dataclass
class PseudoSample:
    payload: np.ndarray | str
    domain_id: int
    label: int
    provenance: dict = field(default_factory=dict)


class MockGenerationBackend:
    """Feature-space generator standing in for a diffusion model.

    Each sample broadcasts the perturbed tokens over ``N`` patch rows, adds
    seeded patch noise of scale ``sigma * patch_noise``, then steps away from
    the source-class anchor by ``repulsion * (guidance - 1)``; that last term
    plays the role of the negative (known-class) prompt.
    """

    def __init__(self, n_patches: int, *, patch_noise: float = 0.5, repulsion: float = 0.02,
                 anchors: Mapping[int, np.ndarray] | None = None,
                 domain_offsets: Mapping[str, np.ndarray] | None = None,
                 cache_dir: str | os.PathLike | None = None):
        self.n_patches = n_patches
        self.patch_noise = patch_noise
        self.repulsion = repulsion
        self.anchors = dict(anchors or {})
        self.domain_offsets = dict(domain_offsets or {})
        self.cache_dir = Path(cache_dir) if cache_dir else None

    def anchor_for(self, condition: GenerationCondition, source_class_id: int) -> np.ndarray:
        if source_class_id in self.anchors:
            return np.asarray(self.anchors[source_class_id], dtype=np.float64)
        return condition.perturbed_tokens.mean(axis=0)

    def _cache_key(self, condition, source_class_id, count, request) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([condition.positive_text, condition.negative_text, condition.guidance_scale,
                             condition.denoising_steps, condition.sigma, condition.seed,
                             condition.domain_name, source_class_id, count, list(request),
                             self.n_patches, self.patch_noise, self.repulsion]).encode())
        h.update(np.ascontiguousarray(condition.perturbed_tokens).tobytes())
        h.update(np.ascontiguousarray(self.anchor_for(condition, source_class_id)).tobytes())
        return h.hexdigest()

    def generate(self, condition: GenerationCondition, source_class_id: int, count: int,
                 request: Sequence[int] = ()) -> np.ndarray:
        """Return ``(count, N, d)`` payloads."""
        path = None
        if self.cache_dir is not None:
            path = self.cache_dir / f"{self._cache_key(condition, source_class_id, count, request)}.star"
            if path.exists():
                return archive.load(path)["payloads"]
        tokens = condition.perturbed_tokens
        rows = tokens[np.arange(self.n_patches) % tokens.shape[0]]
        shift = self.repulsion * (condition.guidance_scale - 1.0) * self.anchor_for(condition, source_class_id)
        offset = self.domain_offsets.get(condition.domain_name, 0.0)
        out = np.empty((count, self.n_patches, tokens.shape[1]))
        for i in range(count):
            rng = np.random.default_rng([condition.seed, *request, i])
            noise = condition.sigma * self.patch_noise * rng.standard_normal(rows.shape)
            out[i] = rows + noise - shift + offset
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            archive.save(path, {"payloads": out})
        return out


class ExternalGenerationBackend:
    """Hands a generation request to an external diffusion service.

    ``transport`` receives the request dict (visual condition written as a
    float32 tensor archive under ``workdir``) and returns a response dict
    ``{"images": [paths...], "manifest": {...}}``.
    """

    def __init__(self, transport: Callable[[dict], dict] | None, workdir: str | os.PathLike):
        self.transport = transport
        self.workdir = Path(workdir)

    def build_request(self, condition: GenerationCondition, count: int) -> dict:
        self.workdir.mkdir(parents=True, exist_ok=True)
        blob = archive.dumps({"visual_condition": condition.visual_condition.astype("<f4")})
        path = self.workdir / f"condition-{hashlib.sha256(blob).hexdigest()[:16]}.star"
        path.write_bytes(blob)
        return {
            "positive_text": condition.positive_text,
            "negative_text": condition.negative_text,
            "visual_condition": str(path),
            "steps": condition.denoising_steps,
            "guidance_scale": condition.guidance_scale,
            "count": count,
        }

    def generate(self, condition: GenerationCondition, source_class_id: int, count: int,
                 request: Sequence[int] = ()) -> list[str]:
        if self.transport is None:
            raise GenerationUnavailableError("no transport configured for the external generator")
        response = self.transport(self.build_request(condition, count))
        images = list(response.get("images", []))
        if len(images) != count:
            raise GenerationUnavailableError(f"generator returned {len(images)} images, expected {count}")
        return images


def generate_pseudo_unknowns(condition: GenerationCondition, source_class_id: int, count: int,
                             backend, *, label: int, domain_id: int = 0,
                             request: Sequence[int] = ()) -> list[PseudoSample]:
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if backend is None:
        raise GenerationUnavailableError("no generation backend")
    payloads = backend.generate(condition, source_class_id, count, request)
    prov = {"source_class": source_class_id, "sigma": condition.sigma, "seed": condition.seed,
            "request": list(request)}
    return [PseudoSample(p, domain_id, label, dict(prov, index=i)) for i, p in enumerate(payloads)]
