"""K-head attention pooling over patch embeddings, and domain tokens."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .backend import DTYPE


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


def init_queries(n_classes: int, n_heads: int, d: int, seed: int, std: float = 0.02) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return std * torch.randn(n_classes, n_heads, d, generator=g, dtype=DTYPE)


def compute_attention_weights(queries, patches) -> torch.Tensor:
    """Softmax over patches of ``q_k . f_i``; returns ``(..., K, N)``.

    Broadcasts over leading batch dimensions: ``queries (..., K, d)`` against
    ``patches (..., N, d)``.
    """
    q = torch.as_tensor(queries, dtype=DTYPE)
    f = torch.as_tensor(patches, dtype=DTYPE)
    if q.shape[-1] != f.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != patch dim {f.shape[-1]}")
    if f.shape[-2] < 1:
        raise ValueError("need at least one patch")
    _check_finite("queries", q)
    _check_finite("patches", f)
    logits = q @ f.transpose(-1, -2)
    logits = logits - logits.amax(dim=-1, keepdim=True).detach()
    w = torch.exp(logits)
    return w / w.sum(dim=-1, keepdim=True)


def pool_semantic_tokens(weights, patches) -> torch.Tensor:
    """Token k is the attention-weighted sum of patch rows; ``(..., K, d)``."""
    w = torch.as_tensor(weights, dtype=DTYPE)
    f = torch.as_tensor(patches, dtype=DTYPE)
    if w.shape[-1] != f.shape[-2]:
        raise ValueError(f"weights cover {w.shape[-1]} patches, got {f.shape[-2]}")
    return w @ f


def semantic_tokens(queries, patches) -> torch.Tensor:
    return pool_semantic_tokens(compute_attention_weights(queries, patches), patches)


def compute_domain_token(patch_sets: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Flat mean over every patch row of every sample in a domain."""
    if len(patch_sets) == 0:
        raise ValueError("cannot build a domain token from an empty domain")
    rows = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1, np.shape(p)[-1]) for p in patch_sets])
    return rows.mean(axis=0)


def class_semantic_state_update(running, fresh, momentum: float):
    """EMA fold of freshly pooled class tokens into the running class state."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if running.shape != fresh.shape:
        raise ValueError(f"state shape {tuple(running.shape)} != fresh shape {tuple(fresh.shape)}")
    return running * momentum + fresh * (1.0 - momentum)
