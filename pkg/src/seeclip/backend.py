"""Frozen encoders: a deterministic synthetic backend and an external-model adapter."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Literal, Mapping

import numpy as np
import torch

from . import archive
from .data import LabeledSample

DTYPE = torch.float64


class BackendError(ValueError):
    pass


@dataclass(frozen=True)
class BackendSpec:
    kind: Literal["synthetic", "external"] = "synthetic"
    d: int = 16
    N: int = 9
    seed: int | None = 0
    model: str | None = None
    # synthetic text tower: W = I + text_map_noise * G / sqrt(d)
    text_map_noise: float = 0.1
    name_scale: float = 0.5
    # external: which vision layer supplies patch tokens (class token excluded)
    patch_layer: str = "last"

    def __post_init__(self):
        if self.kind == "synthetic" and self.seed is None:
            raise BackendError("synthetic backend requires a seed")
        if self.kind == "external" and not self.model:
            raise BackendError("external backend requires a model identifier")
        if self.d < 2 or self.N < 1:
            raise BackendError(f"bad backend dimensions d={self.d}, N={self.N}")


def _stable_seed(*parts: object) -> int:
    h = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def unit(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / torch.linalg.vector_norm(x, dim=dim, keepdim=True)


def image_global_embedding(patches) -> torch.Tensor:
    """Mean over patch rows, L2-normalized. Accepts ``(..., N, d)``."""
    p = torch.as_tensor(patches, dtype=DTYPE)
    if p.shape[-2] < 1:
        raise BackendError("empty patch set")
    return unit(p.mean(dim=-2))


def _tokens_of(prompt) -> torch.Tensor:
    tokens = getattr(prompt, "tokens", prompt)
    if isinstance(tokens, (list, tuple)):
        if not tokens:
            raise BackendError("empty token sequence")
        tokens = torch.stack([torch.as_tensor(t, dtype=DTYPE) for t in tokens])
    tokens = torch.as_tensor(tokens, dtype=DTYPE)
    if tokens.ndim < 2 or tokens.shape[-2] == 0:
        raise BackendError("empty token sequence")
    return tokens


class SyntheticBackend:
    """Seeded stand-in for a frozen vision-language model.

    The text tower is ``unit(tanh(W @ mean(tokens)))`` with ``W`` a fixed
    near-identity random map, so image and text spaces start roughly aligned
    and every prompt token receives gradient.
    """

    def __init__(self, spec: BackendSpec):
        if spec.kind != "synthetic":
            raise BackendError("SyntheticBackend needs kind='synthetic'")
        self.spec = spec
        g = np.random.default_rng(_stable_seed("text_map", spec.seed)).standard_normal((spec.d, spec.d))
        w = np.eye(spec.d) + spec.text_map_noise * g / np.sqrt(spec.d)
        self._text_map = torch.tensor(w, dtype=DTYPE)

    @property
    def d(self) -> int:
        return self.spec.d

    def parameters(self) -> dict[str, np.ndarray]:
        """Frozen weights, for invariance audits."""
        return {"text_map": self._text_map.numpy().copy()}

    def encode_image(self, sample: LabeledSample) -> np.ndarray:
        d, N = self.spec.d, self.spec.N
        if sample.is_feature:
            payload = np.asarray(sample.payload, dtype=np.float64)
            if (payload.ndim == 2 and payload.shape[1] != d) or payload.size % d or payload.size == 0:
                raise BackendError(f"{sample.image_id}: payload shape {payload.shape} incompatible with d={d}")
            return payload.reshape(-1, d)
        rng = np.random.default_rng(_stable_seed("image", self.spec.seed, sample.image_id))
        return rng.standard_normal((N, d)) / np.sqrt(d)

    def encode_tokens(self, prompt) -> torch.Tensor:
        tokens = _tokens_of(prompt)
        if tokens.shape[-1] != self.spec.d:
            raise BackendError(f"token dimension {tokens.shape[-1]} != backend d={self.spec.d}")
        h = tokens.mean(dim=-2) @ self._text_map.T
        return unit(torch.tanh(h))

    # name kept parallel to the image side
    encode_token_sequence = encode_tokens

    def classname_embedding(self, name: str) -> torch.Tensor:
        rng = np.random.default_rng(_stable_seed("classname", self.spec.seed, name))
        v = rng.standard_normal(self.spec.d)
        return torch.tensor(self.spec.name_scale * v / np.linalg.norm(v), dtype=DTYPE)


class ExternalBackend:
    """Adapter slot for a real pretrained vision-language model.

    The caller supplies the three encoder callables; ``text_encoder`` must
    be differentiable in torch for training to work. Arrays crossing a
    process boundary go through :func:`pack_exchange`.
    """

    def __init__(self, spec: BackendSpec,
                 image_encoder: Callable[[str], np.ndarray],
                 text_encoder: Callable[[torch.Tensor], torch.Tensor],
                 token_embedder: Callable[[str], np.ndarray]):
        if spec.kind != "external":
            raise BackendError("ExternalBackend needs kind='external'")
        self.spec = spec
        self._image_encoder = image_encoder
        self._text_encoder = text_encoder
        self._token_embedder = token_embedder

    @property
    def d(self) -> int:
        return self.spec.d

    def parameters(self) -> dict[str, np.ndarray]:
        return {}

    def encode_image(self, sample: LabeledSample) -> np.ndarray:
        if sample.is_feature:
            return np.asarray(sample.payload, dtype=np.float64).reshape(-1, self.spec.d)
        out = np.asarray(self._image_encoder(sample.payload), dtype=np.float64)
        if out.ndim != 2 or out.shape[1] != self.spec.d:
            raise BackendError(f"image encoder returned shape {out.shape}, expected (N, {self.spec.d})")
        return out

    def encode_tokens(self, prompt) -> torch.Tensor:
        return unit(self._text_encoder(_tokens_of(prompt)))

    encode_token_sequence = encode_tokens

    def classname_embedding(self, name: str) -> torch.Tensor:
        return torch.as_tensor(np.asarray(self._token_embedder(name)), dtype=DTYPE)


def pack_exchange(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Serialize arrays as little-endian float32 tensor-archive bytes."""
    return archive.dumps({k: np.asarray(v, dtype="<f4") for k, v in arrays.items()})


def unpack_exchange(data: bytes) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float64) for k, v in archive.loads(data).items()}


def make_backend(spec: BackendSpec, **adapter_kwargs):
    if spec.kind == "synthetic":
        return SyntheticBackend(spec)
    return ExternalBackend(spec, **adapter_kwargs)
