"""Training loop: semantic pooling, prompt assembly, pseudo-unknown injection, AdamW updates."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np
import torch
from torch import nn

from . import archive
from .backend import DTYPE, image_global_embedding
from .losses import (LossBreakdown, LossWeights, alignment_loss, cohesion_loss,
                     regularization_loss, repulsion_loss, total_loss)
from .prompts import ProjectionParams, UnknownTokenBank, embed_all_prompts
from .pseudo import (MockGenerationBackend, PerturbationConfig, build_joint_condition,
                     build_negative_prompt, build_positive_prompt, generate_pseudo_unknowns,
                     perturb_semantic_tokens)
from .semantic import class_semantic_state_update, compute_domain_token, init_queries, semantic_tokens

SCHEMA_VERSION = 1

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class DivergenceError(FloatingPointError):
    """Raised when a training loss or gradient stops being finite."""


@dataclass(frozen=True)
class HyperParams:
    epochs: int = 10
    learning_rate: float = 1e-4
    batch_size: int = 6
    pseudo_per_domain: int = 3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ema_momentum: float = 0.9
    seed: int = 0
    phase_schedule: Literal["alternate_per_batch", "alternate_per_epoch"] = "alternate_per_batch"
    n_heads: int = 4
    n_unknown_tokens: int = 3
    weight_decay: float = 0.01
    query_init_std: float = 0.02
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    guidance_scale: float = 7.5
    denoising_steps: int = 50
    use_semantic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.pseudo_per_domain < 0:
            raise ValueError("pseudo_per_domain must be >= 0")
        if self.phase_schedule not in ("alternate_per_batch", "alternate_per_epoch"):
            raise ValueError(f"unknown phase schedule {self.phase_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        d = dict(d)
        if isinstance(d.get("loss_weights"), dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if isinstance(d.get("perturbation"), dict):
            d["perturbation"] = PerturbationConfig(**d["perturbation"])
        return cls(**d)


class SeeCLIPModel(nn.Module):
    """Every trainable tensor; the encoders live in the backend and stay frozen."""

    def __init__(self, n_classes: int, d: int, n_heads: int = 4, n_unknown_tokens: int = 3,
                 seed: int = 0, query_init_std: float = 0.02):
        super().__init__()
        self.queries = nn.Parameter(init_queries(n_classes, n_heads, d, seed, query_init_std))
        self.projections = ProjectionParams(d, n_heads)
        self.unknown = UnknownTokenBank(d, n_unknown_tokens, seed=seed + 1)


TRAINABLE_NAMES = ("queries", "projections.phi_weight", "projections.phi_bias",
                   "projections.psi_weight", "projections.psi_bias",
                   "unknown.tokens", "unknown.label")


@dataclass
class TrainState:
    model: SeeCLIPModel
    optimizer: torch.optim.Optimizer
    ema: torch.Tensor  # (C, K, d)
    seen: torch.Tensor  # (C,) bool
    domain_tokens: torch.Tensor  # (S, d), one per source domain
    anchors: torch.Tensor  # (C, d), mean patch of each class over the sources
    class_names: tuple[str, ...]
    domain_names: tuple[str, ...]
    hyper: HyperParams
    steps_per_epoch: int
    step: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def total_steps(self) -> int:
        return self.hyper.epochs * self.steps_per_epoch

    @property
    def rng_state(self) -> tuple[int, int]:
        # all randomness is a pure function of (seed, step)
        return (self.hyper.seed, self.step)

    def inference_domain_token(self) -> torch.Tensor:
        return self.domain_tokens.mean(dim=0)


def trainable_parameters(state_or_model) -> list[tuple[str, nn.Parameter]]:
    model = state_or_model.model if isinstance(state_or_model, TrainState) else state_or_model
    named = dict(model.named_parameters())
    return [(n, named[n]) for n in TRAINABLE_NAMES]


def make_optimizer(params, lr: float, weight_decay: float = 0.01) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=weight_decay)


def gradient_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None],
                  optimizer: torch.optim.Optimizer, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise DivergenceError("non-finite gradient")
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    for p, g in zip(params, grads):
        p.grad = None if g is None else g.detach().clone()
    optimizer.step()


def init_state(X: np.ndarray, y: np.ndarray, domains: np.ndarray, *, class_names: Sequence[str],
               domain_names: Sequence[str], hyper: HyperParams, d: int | None = None) -> TrainState:
    """Fresh parameters plus the data-derived constants (domain tokens, class anchors, EMA warm start).

    ``domains`` index into ``domain_names`` (the source domains only).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    domains = np.asarray(domains)
    C = len(class_names)
    d = d or X.shape[-1]
    if len(domain_names) < 1:
        raise ValueError("need at least one source domain")
    missing = sorted(set(range(C)) - set(np.unique(y).tolist()))
    if missing:
        raise ValueError(f"classes {missing} have no training samples")
    if y.min() < 0 or y.max() >= C:
        raise ValueError("training labels must lie in [0, C)")

    model = SeeCLIPModel(C, d, hyper.n_heads, hyper.n_unknown_tokens, hyper.seed, hyper.query_init_std)
    optimizer = make_optimizer([p for _, p in trainable_parameters(model)],
                               hyper.learning_rate, hyper.weight_decay)
    dom_tokens = torch.tensor(np.stack([compute_domain_token(X[domains == s])
                                        for s in range(len(domain_names))]), dtype=DTYPE)
    anchors = torch.tensor(np.stack([X[y == c].reshape(-1, d).mean(axis=0) for c in range(C)]), dtype=DTYPE)
    with torch.no_grad():
        Xt = torch.as_tensor(X, dtype=DTYPE)
        tok = semantic_tokens(model.queries[torch.as_tensor(y)], Xt)
        ema = torch.stack([tok[torch.as_tensor(y == c)].mean(dim=0) for c in range(C)])
    steps_per_epoch = math.ceil(len(y) / hyper.batch_size)
    return TrainState(model, optimizer, ema, torch.ones(C, dtype=torch.bool), dom_tokens, anchors,
                      tuple(class_names), tuple(domain_names), hyper, steps_per_epoch)


def batch_indices(n: int, hyper: HyperParams, step: int, steps_per_epoch: int) -> np.ndarray:
    epoch, b = divmod(step, steps_per_epoch)
    order = np.random.default_rng([hyper.seed, 1, epoch]).permutation(n)
    return order[b * hyper.batch_size:(b + 1) * hyper.batch_size]


def phase_of(step: int, hyper: HyperParams, steps_per_epoch: int) -> str:
    unit = step if hyper.phase_schedule == "alternate_per_batch" else step // steps_per_epoch
    return "align" if unit % 2 == 0 else "repulse"


@dataclass
class Batch:
    patches: torch.Tensor  # (B, N, d) known samples
    labels: torch.Tensor  # (B,)
    domains: torch.Tensor  # (B,) source-domain index
    pseudo_patches: torch.Tensor  # (P, N, d)
    pseudo_domains: torch.Tensor  # (P,)
    pseudo_sources: list[int] = field(default_factory=list)


def class_states(state: TrainState, tokens: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """EMA class states for this step; classes in the batch carry gradient through fresh tokens."""
    rows = []
    for c in range(state.n_classes):
        mask = labels == c
        if bool(mask.any()):
            rows.append(class_semantic_state_update(state.ema[c], tokens[mask].mean(dim=0),
                                                    state.hyper.ema_momentum))
        else:
            rows.append(state.ema[c])
    return torch.stack(rows)


def make_pseudo(state: TrainState, states: torch.Tensor, step: int,
                generator: MockGenerationBackend) -> tuple[list[np.ndarray], list[int], list[int]]:
    """``pseudo_per_domain`` pseudo-unknowns for each source domain; source classes round-robin."""
    h = state.hyper
    P, S, C = h.pseudo_per_domain, len(state.domain_names), state.n_classes
    negative = build_negative_prompt(state.class_names)
    payloads, doms, sources = [], [], []
    with torch.no_grad():
        for s, dom_name in enumerate(state.domain_names):
            positive = build_positive_prompt(dom_name)
            for j in range(P):
                src = (step * P * S + s * P + j) % C
                request = (step, s, j)
                tilde = perturb_semantic_tokens(states[src], h.perturbation, request)
                cond = build_joint_condition(positive, negative, tilde, state.model.projections,
                                             h.denoising_steps, h.guidance_scale,
                                             sigma=h.perturbation.sigma, seed=h.perturbation.seed,
                                             domain_name=dom_name)
                (sample,) = generate_pseudo_unknowns(cond, src, 1, generator, label=C,
                                                     domain_id=s, request=request)
                payloads.append(sample.payload)
                doms.append(s)
                sources.append(src)
    return payloads, doms, sources


def mock_generator_for(state: TrainState, n_patches: int) -> MockGenerationBackend:
    offsets = state.domain_tokens - state.domain_tokens.mean(dim=0)
    return MockGenerationBackend(
        n_patches,
        anchors={c: state.anchors[c].numpy() for c in range(state.n_classes)},
        domain_offsets={n: offsets[s].numpy() for s, n in enumerate(state.domain_names)},
    )


def compute_losses(state: TrainState, batch: Batch, backend) -> tuple[LossBreakdown, torch.Tensor]:
    """All four losses on one batch, differentiable w.r.t. the trainable parameters.

    Returns the breakdown and the EMA class states used in the prompts.
    """
    h, model = state.hyper, state.model
    C = state.n_classes
    proj, bank = model.projections, model.unknown

    tokens = semantic_tokens(model.queries[batch.labels], batch.patches)
    states = class_states(state, tokens, batch.labels)

    x_known = image_global_embedding(batch.patches)
    x = x_known
    labels = batch.labels
    doms = batch.domains
    if batch.pseudo_patches.shape[0]:
        x = torch.cat([x, image_global_embedding(batch.pseudo_patches)])
        labels = torch.cat([labels, torch.full((batch.pseudo_patches.shape[0],), C, dtype=torch.long)])
        doms = torch.cat([doms, batch.pseudo_domains])

    used = sorted(set(doms.tolist()))
    per_domain = {s: embed_all_prompts(state.class_names, state.domain_tokens[s], states, bank, proj,
                                       backend, use_semantic=h.use_semantic) for s in used}
    prompt_stack = torch.stack([per_domain[int(s)] for s in doms])
    align = alignment_loss(x, prompt_stack, labels, h.loss_weights.tau)

    centre = embed_all_prompts(state.class_names, state.inference_domain_token(), states, bank, proj,
                               backend, use_semantic=h.use_semantic)
    present = sorted(set(batch.labels.tolist()))
    reps = torch.stack([x_known[batch.labels == c].mean(dim=0) for c in present])
    repulse = repulsion_loss(centre[C], reps, h.loss_weights.delta)
    cohere = cohesion_loss(centre[C], centre[:C])

    if h.use_semantic:
        regularize = regularization_loss(proj.psi(states), h.loss_weights.lambda_inner)
    else:
        regularize = torch.zeros((), dtype=DTYPE)
    return total_loss(align, repulse, cohere, regularize, h.loss_weights), states


def assemble_batch(state: TrainState, X: np.ndarray, y: np.ndarray, domains: np.ndarray,
                   step: int, generator: MockGenerationBackend, backend) -> tuple[Batch, torch.Tensor]:
    idx = batch_indices(len(y), state.hyper, step, state.steps_per_epoch)
    patches = torch.as_tensor(X[idx], dtype=DTYPE)
    labels = torch.as_tensor(y[idx], dtype=torch.long)
    doms = torch.as_tensor(domains[idx], dtype=torch.long)
    N, d = patches.shape[1:]
    if state.hyper.pseudo_per_domain:
        with torch.no_grad():
            tokens = semantic_tokens(state.model.queries[labels], patches)
            states = class_states(state, tokens, labels)
        payloads, pdoms, sources = make_pseudo(state, states, step, generator)
        pseudo = torch.as_tensor(np.stack(payloads), dtype=DTYPE)
        pdoms_t = torch.as_tensor(pdoms, dtype=torch.long)
    else:
        pseudo = torch.zeros((0, N, d), dtype=DTYPE)
        pdoms_t = torch.zeros(0, dtype=torch.long)
        sources = []
    return Batch(patches, labels, doms, pseudo, pdoms_t, sources), idx


def train_steps(state: TrainState, X, y, domains, backend, *,
                max_steps: int | None = None) -> Iterator[dict]:
    """Advance ``state`` step by step, yielding one log record per step."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    domains = np.asarray(domains)
    generator = mock_generator_for(state, X.shape[1])
    end = state.total_steps if max_steps is None else min(state.total_steps, state.step + max_steps)
    params = [p for _, p in trainable_parameters(state)]
    C = state.n_classes
    while state.step < end:
        step = state.step
        batch, idx = assemble_batch(state, X, y, domains, step, generator, backend)
        breakdown, states = compute_losses(state, batch, backend)
        phase = phase_of(step, state.hyper, state.steps_per_epoch)
        if phase == "align":
            objective = breakdown.align + state.hyper.loss_weights.gamma * breakdown.regularize
        else:
            objective = breakdown.total
        if not torch.isfinite(breakdown.total) or not torch.isfinite(objective):
            raise DivergenceError(f"non-finite loss at step {step}")
        grads = torch.autograd.grad(objective, params, allow_unused=True)
        gradient_step(params, grads, state.optimizer)
        with torch.no_grad():
            for c in set(batch.labels.tolist()):
                state.ema[c] = states[c].detach()
        state.step += 1

        pseudo_by_domain = {n: 0 for n in state.domain_names}
        for s in batch.pseudo_domains.tolist():
            pseudo_by_domain[state.domain_names[s]] += 1
        record = {"step": step, "epoch": step // state.steps_per_epoch, "phase": phase,
                  **breakdown.as_dict(), "objective": float(objective.detach()),
                  "n_known": int(batch.labels.numel()),
                  "pseudo_by_domain": pseudo_by_domain,
                  "pseudo_labels": [C] * int(batch.pseudo_patches.shape[0])}
        yield record


def train(X, y, domains, *, class_names: Sequence[str], domain_names: Sequence[str],
          hyper: HyperParams, backend, state: TrainState | None = None,
          max_steps: int | None = None) -> tuple[TrainState, list[dict]]:
    """Train (or resume) on source-domain patch arrays. Deterministic given ``hyper.seed``."""
    torch.set_num_threads(1)
    if state is None:
        state = init_state(X, y, domains, class_names=class_names, domain_names=domain_names,
                           hyper=hyper, d=backend.d)
    log = list(train_steps(state, X, y, domains, backend, max_steps=max_steps))
    return state, log


def write_log(records: Sequence[dict], path: str | Path, append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# -- checkpoints --------------------------------------------------------------

def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, p in trainable_parameters(state):
        tensors[f"param/{name}"] = p.detach().numpy().copy()
        slot = state.optimizer.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in slot:
                tensors[f"opt/{key}/{name}"] = slot[key].detach().numpy().copy()
        if "step" in slot:
            tensors[f"opt/step/{name}"] = np.array(float(slot["step"]), dtype=np.float64)
    tensors["ema/states"] = state.ema.numpy().copy()
    tensors["ema/seen"] = state.seen.numpy().astype(np.int64)
    tensors["domain_tokens"] = state.domain_tokens.numpy().copy()
    tensors["anchors"] = state.anchors.numpy().copy()
    return tensors


def manifest_for(state: TrainState, tensors: dict[str, np.ndarray]) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "rng_state": list(state.rng_state),
        "hyperparams": state.hyper.to_dict(),
        "class_names": list(state.class_names),
        "domain_names": list(state.domain_names),
        "tensors": {k: {"dtype": str(v.dtype), "shape": list(v.shape)} for k, v in sorted(tensors.items())},
    }


def checkpoint_save(state: TrainState, path: str | Path, extra_manifest: dict | None = None) -> Path:
    """Write ``<path>`` (tensor archive) and ``<path>.json`` (manifest). Returns the manifest path."""
    path = Path(path)
    tensors = state_tensors(state)
    archive.save(path, tensors)
    manifest = manifest_for(state, tensors)
    manifest.update(extra_manifest or {})
    mpath = path.with_name(path.name + ".json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def checkpoint_load(path: str | Path) -> TrainState:
    path = Path(path)
    manifest = json.loads(path.with_name(path.name + ".json").read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
    tensors = archive.load(path)
    hyper = HyperParams.from_dict(manifest["hyperparams"])
    q = tensors["param/queries"]
    C, K, d = q.shape
    model = SeeCLIPModel(C, d, K, tensors["param/unknown.tokens"].shape[0], hyper.seed, hyper.query_init_std)
    named = dict(model.named_parameters())
    with torch.no_grad():
        for name in TRAINABLE_NAMES:
            named[name].copy_(torch.from_numpy(tensors[f"param/{name}"]))
    params = [named[n] for n in TRAINABLE_NAMES]
    optimizer = make_optimizer(params, hyper.learning_rate, hyper.weight_decay)
    for name, p in zip(TRAINABLE_NAMES, params):
        if f"opt/exp_avg/{name}" in tensors:
            optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"opt/step/{name}"]), dtype=torch.float32),
                "exp_avg": torch.from_numpy(tensors[f"opt/exp_avg/{name}"].copy()),
                "exp_avg_sq": torch.from_numpy(tensors[f"opt/exp_avg_sq/{name}"].copy()),
            }
    return TrainState(
        model=model, optimizer=optimizer,
        ema=torch.from_numpy(tensors["ema/states"].copy()),
        seen=torch.from_numpy(tensors["ema/seen"].astype(bool)),
        domain_tokens=torch.from_numpy(tensors["domain_tokens"].copy()),
        anchors=torch.from_numpy(tensors["anchors"].copy()),
        class_names=tuple(manifest["class_names"]),
        domain_names=tuple(manifest["domain_names"]),
        hyper=hyper, steps_per_epoch=manifest["steps_per_epoch"], step=manifest["step"])
