"""Open-set inference, metrics, the leave-one-domain-out driver and diagnostics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backend import DTYPE, image_global_embedding, unit
from .backend import BackendSpec, SyntheticBackend
from .data import (Dataset, LabeledSample, OSDGSplit, SyntheticSpec, build_losdo_splits,
                   make_synthetic_dataset, synthetic_unknown_names)
from .prompts import embed_all_prompts
from .semantic import compute_attention_weights, compute_domain_token
from .trainer import HyperParams, TrainState, train


def h_score(known_acc: float, unknown_acc: float) -> float:
    s = known_acc + unknown_acc
    return 2.0 * known_acc * unknown_acc / s if s > 0 else 0.0


@dataclass
class EvalReport:
    target_domain: str
    closed_acc: float | None
    known_acc: float | None
    unknown_acc: float | None
    h_score: float | None
    open_space_rate: float | None
    overall_acc: float | None
    confusion: list[list[int]]
    closed_confusion: list[list[int]] | None = None
    per_class_acc: list[float | None] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_from_confusion(confusion, closed_confusion=None) -> dict:
    """Metrics from a ``(C+1, C+1)`` open confusion (rows = truth) and an optional
    ``(C, C)`` confusion of the known-only argmax on known samples.

    Rates with an empty denominator are ``None``.
    """
    conf = np.asarray(confusion, dtype=np.int64)
    C = conf.shape[0] - 1
    rows = conf.sum(axis=1)
    n_known, n_unknown = int(rows[:C].sum()), int(rows[C])
    known_acc = float(np.trace(conf[:C, :C]) / n_known) if n_known else None
    unknown_acc = float(conf[C, C] / n_unknown) if n_unknown else None
    open_rate = float(conf[C, :C].sum() / n_unknown) if n_unknown else None
    hs = h_score(known_acc, unknown_acc) if known_acc is not None and unknown_acc is not None else None
    total = int(rows.sum())
    overall = float(np.trace(conf) / total) if total else None
    closed = None
    if closed_confusion is not None:
        cc = np.asarray(closed_confusion, dtype=np.int64)
        closed = float(np.trace(cc) / cc.sum()) if cc.sum() else None
    per_class = [float(conf[c, c] / rows[c]) if rows[c] else None for c in range(C + 1)]
    return {"closed_acc": closed, "known_acc": known_acc, "unknown_acc": unknown_acc,
            "h_score": hs, "open_space_rate": open_rate, "overall_acc": overall,
            "per_class_acc": per_class}


def similarity_scores(patches, prompt_matrix) -> torch.Tensor:
    """Cosine similarity of each image's global embedding with every prompt row."""
    p = torch.as_tensor(prompt_matrix, dtype=DTYPE)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("prompt matrix must be a nonempty (C+1, d) array")
    return image_global_embedding(patches) @ unit(p).T


def classify(patches, prompt_matrix) -> int:
    """Index of the most similar prompt; ties go to the lowest index."""
    return int(torch.argmax(similarity_scores(patches, prompt_matrix)))


def classify_batch(patches, prompt_matrix) -> np.ndarray:
    s = similarity_scores(patches, prompt_matrix).numpy()
    return np.argmax(s, axis=-1)


def prompt_matrix(state: TrainState, backend, domain_token=None, *, use_semantic: bool | None = None,
                  states=None) -> torch.Tensor:
    dom = state.inference_domain_token() if domain_token is None else torch.as_tensor(domain_token, dtype=DTYPE)
    use = state.hyper.use_semantic if use_semantic is None else use_semantic
    with torch.no_grad():
        return embed_all_prompts(state.class_names, dom, state.ema if states is None else states,
                                 state.model.unknown, state.model.projections, backend,
                                 use_semantic=use, seen=state.seen)


def encode_samples(samples: Sequence[LabeledSample], backend) -> np.ndarray:
    return np.stack([backend.encode_image(s) for s in samples])


def evaluate_arrays(X, y, prompts, n_known: int, target_name: str = "") -> EvalReport:
    y = np.asarray(y)
    pred = classify_batch(X, prompts)
    C = n_known
    conf = np.zeros((C + 1, C + 1), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    known = y < C
    closed = np.zeros((C, C), dtype=np.int64)
    if known.any():
        closed_pred = classify_batch(X[known], prompts[:C])
        np.add.at(closed, (y[known], closed_pred), 1)
    m = metrics_from_confusion(conf, closed)
    return EvalReport(target_domain=target_name, confusion=conf.tolist(),
                      closed_confusion=closed.tolist(), **m)


def evaluate_split(split: OSDGSplit, state: TrainState, backend, *, transductive: bool = False) -> EvalReport:
    if not split.target:
        raise ValueError("target domain has no samples")
    X = encode_samples(split.target, backend)
    y = np.array([s.class_id for s in split.target])
    dom = compute_domain_token(X) if transductive else None
    prompts = prompt_matrix(state, backend, dom)
    name = split.domain_names[split.target_domain] if split.domain_names else str(split.target_domain)
    return evaluate_arrays(X, y, prompts, split.n_known, name)


def source_arrays(split: OSDGSplit, backend):
    X = encode_samples(split.source, backend)
    y = np.array([s.class_id for s in split.source])
    local = {m: i for i, m in enumerate(split.source_domains)}
    doms = np.array([local[s.domain_id] for s in split.source])
    names = [split.domain_names[m] if split.domain_names else str(m) for m in split.source_domains]
    return X, y, doms, names


def fit_split(split: OSDGSplit, hyper: HyperParams, backend, **kwargs):
    X, y, doms, names = source_arrays(split, backend)
    return train(X, y, doms, class_names=split.known_classes, domain_names=names,
                 hyper=hyper, backend=backend, **kwargs)


@dataclass
class ProtocolResult:
    reports: list[EvalReport]
    mean_closed_acc: float | None
    mean_h_score: float | None
    logs: list[list[dict]] = field(default_factory=list, repr=False)
    states: list[TrainState] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"reports": [r.to_dict() for r in self.reports],
                "mean_closed_acc": self.mean_closed_acc, "mean_h_score": self.mean_h_score}


def _mean(vals) -> float | None:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def run_losdo_protocol(dataset: Dataset, unknown_class_names: Sequence[str], hyper: HyperParams,
                       backend, *, keep_logs: bool = False, keep_states: bool = False) -> ProtocolResult:
    """Train once per held-out domain, evaluate on it, macro-average."""
    reports, logs, states = [], [], []
    for split in build_losdo_splits(dataset, unknown_class_names):
        state, log = fit_split(split, hyper, backend)
        reports.append(evaluate_split(split, state, backend))
        if keep_logs:
            logs.append(log)
        if keep_states:
            states.append(state)
    return ProtocolResult(reports, _mean(r.closed_acc for r in reports),
                          _mean(r.h_score for r in reports), logs, states)


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def protocol_markdown(result: ProtocolResult, title: str = "") -> str:
    lines = [f"### {title}" if title else "", "", "| Target | Acc | H-score | Known | Unknown |",
             "|---|---|---|---|---|"]
    for r in result.reports:
        lines.append(f"| {r.target_domain} | {_fmt(r.closed_acc)} | {_fmt(r.h_score)} | "
                     f"{_fmt(r.known_acc)} | {_fmt(r.unknown_acc)} |")
    lines.append(f"| **Average** | {_fmt(result.mean_closed_acc)} | {_fmt(result.mean_h_score)} | | |")
    return "\n".join(lines).lstrip() + "\n"


@dataclass
class DiscrepancyReport:
    dis: np.ndarray
    dis_sem: np.ndarray
    mean_gain: float

    def to_dict(self) -> dict:
        return {"dis": self.dis.tolist(), "dis_sem": self.dis_sem.tolist(), "mean_gain": self.mean_gain}


def pairwise_cosine_distance(rows: torch.Tensor) -> np.ndarray:
    r = unit(torch.as_tensor(rows, dtype=DTYPE))
    dist = (1.0 - r @ r.T).numpy()
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist


def lemma1_diagnostic(state: TrainState, backend) -> DiscrepancyReport:
    """Cosine distance between class prompts with and without the semantic slots."""
    C = state.n_classes
    plain = prompt_matrix(state, backend, use_semantic=False)[:C]
    enhanced = prompt_matrix(state, backend, use_semantic=True)[:C]
    dis, dis_sem = pairwise_cosine_distance(plain), pairwise_cosine_distance(enhanced)
    off = ~np.eye(C, dtype=bool)
    gain = float((dis_sem - dis)[off].mean()) if C > 1 else 0.0
    return DiscrepancyReport(dis, dis_sem, gain)


def dump_attention_maps(state: TrainState, samples: Sequence[LabeledSample], path, backend) -> list[Path]:
    """One ``K x N`` CSV per sample (rows = heads, columns = patches).

    Samples labeled unknown use the queries of their predicted class.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    prompts = prompt_matrix(state, backend)
    written = []
    for s in samples:
        patches = backend.encode_image(s)
        c = s.class_id if s.class_id < state.n_classes else classify(patches, prompts[:state.n_classes])
        with torch.no_grad():
            w = compute_attention_weights(state.model.queries[c], torch.tensor(np.array(patches))).numpy()
        fname = out / (s.image_id.replace("/", "__") + ".csv")
        with open(fname, "w", newline="") as fh:
            csv.writer(fh).writerows([[f"{v:.10g}" for v in row] for row in w])
        written.append(fname)
    return written


def ablation_variants(hyper: HyperParams) -> dict[str, HyperParams]:
    """The full method, the method without pseudo-unknowns, and the bare baseline
    (semantic slots zeroed, no pseudo-unknowns, no repulsion or cohesion)."""
    return {
        "full": hyper,
        "no_pseudo": replace(hyper, pseudo_per_domain=0),
        "ablated": replace(hyper, pseudo_per_domain=0, use_semantic=False,
                           loss_weights=replace(hyper.loss_weights, alpha=0.0, beta=0.0)),
    }


@dataclass
class AblationResult:
    seed: int
    h_score: dict[str, float | None]
    closed_acc: dict[str, float | None]
    lemma_gain: float

    def to_dict(self) -> dict:
        return asdict(self)


def run_toy_ablation(spec: SyntheticSpec, hyper: HyperParams, backend=None) -> AblationResult:
    """Leave-one-domain-out on a synthetic dataset for each ablation variant.

    ``lemma_gain`` averages the prompt-discrepancy gain over the full
    variant's per-split models.
    """
    ds = make_synthetic_dataset(spec)
    unknown = synthetic_unknown_names(spec)
    backend = backend or SyntheticBackend(BackendSpec(d=spec.d, N=spec.N, seed=spec.seed))
    h_scores, accs, gains = {}, {}, []
    for name, h in ablation_variants(hyper).items():
        res = run_losdo_protocol(ds, unknown, h, backend, keep_states=name == "full")
        h_scores[name], accs[name] = res.mean_h_score, res.mean_closed_acc
        gains += [lemma1_diagnostic(st, backend).mean_gain for st in res.states]
    return AblationResult(spec.seed, h_scores, accs, float(np.mean(gains)))
