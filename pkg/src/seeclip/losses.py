"""Alignment, repulsion, cohesion and sparsity losses plus their weighted total."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .backend import DTYPE

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.1
    delta: float = 0.2
    tau: float = 0.07
    lambda_inner: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        for name in ("alpha", "beta", "gamma", "lambda_inner"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossBreakdown:
    align: torch.Tensor
    repulse: torch.Tensor
    cohere: torch.Tensor
    regularize: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _as(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def _check_unit(name: str, x: torch.Tensor) -> None:
    norms = torch.linalg.vector_norm(x.detach(), dim=-1)
    if (norms - 1).abs().max() > UNIT_TOL:
        raise ValueError(f"{name} rows must be unit norm (max deviation {float((norms - 1).abs().max()):.2e})")


def alignment_loss(image_embeddings, prompt_matrix, labels, tau: float = 0.07) -> torch.Tensor:
    """Batch mean of ``-log softmax(sim(x_i, p) / tau)[label_i]`` over all C+1 prompts.

    ``prompt_matrix`` is ``(C+1, d)`` shared by the batch, or ``(B, C+1, d)``
    when each sample sees prompts built from its own domain token.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = _as(image_embeddings)
    p = _as(prompt_matrix)
    _check_unit("image_embeddings", x)
    _check_unit("prompt_matrix", p)
    y = torch.as_tensor(labels, dtype=torch.long)
    if p.ndim == 2:
        logits = x @ p.T
    else:
        logits = torch.einsum("bd,bcd->bc", x, p)
    if y.min() < 0 or y.max() >= logits.shape[-1]:
        raise ValueError("labels out of range for the prompt matrix")
    return F.cross_entropy(logits / tau, y)


def repulsion_loss(unknown_prompt_embedding, known_image_embeddings, delta: float = 0.2) -> torch.Tensor:
    """``sum_c max(0, delta - cos(unknown prompt, class representative c))``."""
    u = _as(unknown_prompt_embedding)
    xs = _as(known_image_embeddings)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("repulsion needs at least one class representative")
    sims = (xs @ u) / (torch.linalg.vector_norm(xs, dim=-1) * torch.linalg.vector_norm(u))
    return torch.relu(delta - sims).sum()


def cohesion_loss(unknown_prompt_embedding, known_prompt_embeddings) -> torch.Tensor:
    """Squared distance from the unknown prompt to the known-prompt centroid."""
    u = _as(unknown_prompt_embedding)
    ps = _as(known_prompt_embeddings)
    if ps.ndim != 2 or ps.shape[0] == 0:
        raise ValueError("cohesion needs at least one known prompt")
    return ((u - ps.mean(dim=0)) ** 2).sum()


def regularization_loss(projected_semantic_tokens, lambda_inner: float = 1.0) -> torch.Tensor:
    """``lambda * sum_k ||psi_k(v_sem^k)||_1``.

    Takes one token ``(d,)``, one token set ``(K, d)``, or a stack of
    per-class sets ``(C, K, d)``, which is averaged over classes.
    """
    t = _as(projected_semantic_tokens)
    if t.ndim == 1:
        t = t[None]
    per_prompt = t.abs().sum(dim=(-1, -2))
    return lambda_inner * per_prompt.mean()


def total_loss(align, repulse, cohere, regularize, weights: LossWeights = LossWeights()) -> LossBreakdown:
    parts = [_as(v) for v in (align, repulse, cohere, regularize)]
    for name, v in zip(("align", "repulse", "cohere", "regularize"), parts):
        if not torch.isfinite(v).all():
            raise FloatingPointError(f"{name} loss is not finite")
    a, r, c, g = parts
    total = a + weights.alpha * r + weights.beta * c + weights.gamma * g
    return LossBreakdown(a, r, c, g, total)
