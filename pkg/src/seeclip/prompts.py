"""Enhanced class prompts and the learnable unknown prompt."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .backend import DTYPE


class ProjectionParams(nn.Module):
    """Affine ``phi`` for domain tokens and one affine ``psi_k`` per semantic head.

    Starts at identity weights and zero bias.
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        eye = torch.eye(d, dtype=DTYPE)
        self.phi_weight = nn.Parameter(eye.clone())
        self.phi_bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.psi_weight = nn.Parameter(eye.repeat(n_heads, 1, 1))
        self.psi_bias = nn.Parameter(torch.zeros(n_heads, d, dtype=DTYPE))

    @property
    def n_heads(self) -> int:
        return self.psi_weight.shape[0]

    def phi(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.phi_weight.T + self.phi_bias

    def psi(self, tokens: torch.Tensor) -> torch.Tensor:
        """Apply ``psi_k`` to row k of ``tokens (..., K, d)``."""
        return torch.einsum("kij,...kj->...ki", self.psi_weight, tokens) + self.psi_bias


class UnknownTokenBank(nn.Module):
    def __init__(self, d: int, n_tokens: int = 3, seed: int = 0, std: float = 0.02):
        super().__init__()
        if n_tokens < 1:
            raise ValueError("unknown prompt needs at least one learnable token")
        g = torch.Generator().manual_seed(seed)
        self.tokens = nn.Parameter(std * torch.randn(n_tokens, d, generator=g, dtype=DTYPE))
        self.label = nn.Parameter(std * torch.randn(d, generator=g, dtype=DTYPE))


@dataclass
class Prompt:
    tokens: torch.Tensor  # (L, d)
    kind: str  # "known" or "unknown"
    class_id: int | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def build_known_prompt(class_id: int, domain_token, class_state, projections: ProjectionParams,
                       classname_embedding, *, use_semantic: bool = True) -> Prompt:
    """``[phi(v_dom)], [psi_1(v_sem^1) .. psi_K(v_sem^K)], [classname]``.

    With ``use_semantic=False`` the semantic slots are kept but zeroed.
    """
    if class_state is None:
        raise ValueError(f"class {class_id} has no semantic state yet")
    dom = projections.phi(torch.as_tensor(domain_token, dtype=DTYPE))
    sem = projections.psi(torch.as_tensor(class_state, dtype=DTYPE))
    if not use_semantic:
        sem = torch.zeros_like(sem)
    name = torch.as_tensor(classname_embedding, dtype=DTYPE)
    tokens = torch.cat([dom[None], sem, name[None]])
    return Prompt(tokens, "known", class_id, {"semantic": use_semantic})


def build_unknown_prompt(domain_token, bank: UnknownTokenBank, projections: ProjectionParams) -> Prompt:
    """``[phi(v_dom)], [v_1 .. v_m], [unknown]``."""
    dom = projections.phi(torch.as_tensor(domain_token, dtype=DTYPE))
    tokens = torch.cat([dom[None], bank.tokens, bank.label[None]])
    return Prompt(tokens, "unknown")


def embed_all_prompts(class_names: Sequence[str], domain_token, states, bank: UnknownTokenBank,
                      projections: ProjectionParams, backend, *, use_semantic: bool = True,
                      seen=None) -> torch.Tensor:
    """Text embeddings of every known prompt followed by the unknown prompt, ``(C+1, d)``."""
    rows = []
    for c, name in enumerate(class_names):
        state = states[c] if seen is None or bool(seen[c]) else None
        p = build_known_prompt(c, domain_token, state, projections,
                               backend.classname_embedding(name), use_semantic=use_semantic)
        rows.append(backend.encode_tokens(p))
    rows.append(backend.encode_tokens(build_unknown_prompt(domain_token, bank, projections)))
    return torch.stack(rows)
