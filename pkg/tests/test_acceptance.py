"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line, also collected into the
pytest terminal summary. Run alone with ``pytest tests/test_acceptance.py -s``.
"""

import contextlib
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, small_problem
from seeclip import archive
from seeclip.backend import image_global_embedding
from seeclip.cli import main as cli_main
from seeclip.data import SyntheticSpec
from seeclip.evaluation import h_score, metrics_from_confusion, run_toy_ablation
from seeclip.losses import (LossWeights, alignment_loss, cohesion_loss, regularization_loss, repulsion_loss,
                            total_loss)
from seeclip.prompts import embed_all_prompts
from seeclip.pseudo import PerturbationConfig, perturb_semantic_tokens
from seeclip.semantic import compute_attention_weights
from seeclip.trainer import (TRAINABLE_NAMES, HyperParams, assemble_batch, compute_losses, mock_generator_for,
                             train, trainable_parameters)

LOSS_NAMES = ("align", "repulse", "cohere", "regularize", "total")
TOY_SEEDS = range(5)


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Time a criterion and emit one PASS/FAIL line; ``note`` collects a short result summary."""
    note: dict = {}
    t0 = time.perf_counter()
    try:
        yield note
    except BaseException as exc:
        line = f"FAIL AC{number:02d} {title} [{time.perf_counter() - t0:.1f}s] {note.get('msg', '')} :: {exc}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        raise
    line = f"PASS AC{number:02d} {title} [{time.perf_counter() - t0:.1f}s] {note.get('msg', '')}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def test_ac01_attention_rows_are_distributions():
    with criterion(1, "softmax normalization") as note:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            K, N, d = rng.integers(1, 9), rng.integers(1, 50), rng.integers(2, 33)
            scale = 10.0 ** rng.uniform(-2, 1.5)
            w = compute_attention_weights(scale * rng.standard_normal((K, d)),
                                          rng.standard_normal((N, d))).numpy()
            assert np.all(w >= 0.0) and np.all(w <= 1.0)
            worst = max(worst, float(np.abs(w.sum(axis=-1) - 1.0).max()))
        elapsed = time.perf_counter() - t0
        note["msg"] = f"max |row sum - 1| = {worst:.1e}, {elapsed:.2f}s"
        assert worst <= 1e-6
        assert elapsed < 5.0


def _perturb_parameters(state, seed):
    g = torch.Generator().manual_seed(seed)
    scales = {"queries": 0.6, "unknown.tokens": 0.4, "unknown.label": 0.4}
    with torch.no_grad():
        for name, p in trainable_parameters(state):
            p.add_(scales.get(name, 0.15) * torch.randn(p.shape, generator=g, dtype=p.dtype))


def _repulsion_similarities(state, batch, backend):
    with torch.no_grad():
        _, states = compute_losses(state, batch, backend)
        centre = embed_all_prompts(state.class_names, state.inference_domain_token(), states,
                                   state.model.unknown, state.model.projections, backend)
        x = image_global_embedding(batch.patches)
        reps = torch.stack([x[batch.labels == c].mean(dim=0) for c in sorted(set(batch.labels.tolist()))])
        u = centre[-1]
        return ((reps @ u) / (torch.linalg.vector_norm(reps, dim=-1) * torch.linalg.vector_norm(u))).numpy()


def _gradient_case(seed):
    """A random configuration with the repulsion margin placed away from every hinge kink.

    Returns ``None`` when no kink-free margin exists for this draw.
    """
    _, backend, (X, y, doms, _), state = small_problem(seed=seed, d=8, N=5, C=3)
    _perturb_parameters(state, seed)
    batch, _ = assemble_batch(state, X, y, doms, seed, mock_generator_for(state, X.shape[1]), backend)
    sims = np.sort(_repulsion_similarities(state, batch, backend))
    if seed % 2 == 0 or len(sims) < 2:
        delta = sims[-1] + 0.05  # every hinge active
    else:
        delta = 0.5 * (sims[-2] + sims[-1])  # one hinge inactive
    delta = float(np.clip(delta, 0.0, 1.0))
    if np.abs(sims - delta).min() < 1e-3:
        return None
    lw = LossWeights(delta=delta)
    state.hyper = replace(state.hyper, loss_weights=lw)
    return state, batch, backend


def _losses(state, batch, backend):
    breakdown, _ = compute_losses(state, batch, backend)
    return [getattr(breakdown, n) for n in LOSS_NAMES]


def test_ac02_gradients_match_central_differences():
    with criterion(2, "gradient verification") as note:
        t0 = time.perf_counter()
        step = 1e-5
        worst, n_cases, seed = 0.0, 0, 0
        while n_cases < 10:
            case = _gradient_case(seed)
            seed += 1
            if case is None:
                continue
            n_cases += 1
            state, batch, backend = case
            params = [p for _, p in trainable_parameters(state)]
            analytic = [torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
                        for loss in _losses(state, batch, backend)]
            for pi, (name, p) in enumerate(trainable_parameters(state)):
                numeric = np.zeros((len(LOSS_NAMES), p.numel()))
                flat = p.data.view(-1)
                with torch.no_grad():
                    for i in range(p.numel()):
                        orig = float(flat[i])
                        flat[i] = orig + step
                        up = [float(v) for v in _losses(state, batch, backend)]
                        flat[i] = orig - step
                        down = [float(v) for v in _losses(state, batch, backend)]
                        flat[i] = orig
                        numeric[:, i] = (np.array(up) - np.array(down)) / (2 * step)
                for li, loss_name in enumerate(LOSS_NAMES):
                    g = analytic[li][pi]
                    a = np.zeros(p.numel()) if g is None else g.detach().numpy().ravel()
                    scale = max(np.linalg.norm(a), np.linalg.norm(numeric[li]))
                    if scale < 1e-12:
                        continue  # both vanish, e.g. the domain projection under regularization
                    rel = np.linalg.norm(a - numeric[li]) / scale
                    worst = max(worst, rel)
                    assert rel < 1e-4, f"case {n_cases} {loss_name} wrt {name}: rel err {rel:.2e}"
        elapsed = time.perf_counter() - t0
        note["msg"] = f"{n_cases} configs, max rel err {worst:.1e}, {elapsed:.1f}s"
        assert elapsed < 60.0


def test_ac03_closed_form_losses():
    with criterion(3, "closed-form loss spot checks") as note:
        # repulsion: unknown prompt e1, class representatives with cosine 0.1 and 0.0
        u = np.array([1.0, 0.0])
        reps = np.array([[0.1, math.sqrt(1 - 0.01)], [0.0, 1.0]])
        rep = float(repulsion_loss(u, reps, delta=0.2))
        coh = float(cohesion_loss([3.0, 4.0], np.zeros((2, 2))))
        reg = float(regularization_loss([1.0, -2.0, 3.0], lambda_inner=1.0))
        C = 4
        x = np.eye(3)[:2]
        p = np.repeat(np.array([[0.0, 0.0, 1.0]]), C + 1, axis=0)
        ali = float(alignment_loss(x, p, [0, 4]))
        tot = float(total_loss(1.0, 2.0, 3.0, 4.0, LossWeights(alpha=0.5, beta=0.3, gamma=0.1)).total)
        note["msg"] = f"rep={rep:.12g} coh={coh:.12g} reg={reg:.12g} ali-ln5={ali - math.log(5):.1e} tot={tot:.12g}"
        assert abs(rep - 0.3) <= 1e-9
        assert abs(coh - 25.0) <= 1e-9
        assert abs(reg - 6.0) <= 1e-9
        assert abs(ali - math.log(C + 1)) <= 1e-9
        assert abs(tot - 3.3) <= 1e-9


def _brute_force_metrics(conf, closed):
    pairs = [(t, p) for t in range(len(conf)) for p in range(len(conf)) for _ in range(conf[t][p])]
    C = len(conf) - 1
    known = [(t, p) for t, p in pairs if t < C]
    unknown = [(t, p) for t, p in pairs if t == C]
    closed_pairs = [(t, p) for t in range(C) for p in range(C) for _ in range(closed[t][p])]
    ka = sum(t == p for t, p in known) / len(known) if known else None
    ua = sum(p == C for _, p in unknown) / len(unknown) if unknown else None
    return {
        "closed_acc": sum(t == p for t, p in closed_pairs) / len(closed_pairs) if closed_pairs else None,
        "known_acc": ka,
        "unknown_acc": ua,
        "h_score": None if ka is None or ua is None else (2 * ka * ua / (ka + ua) if ka + ua else 0.0),
        "open_space_rate": sum(p < C for _, p in unknown) / len(unknown) if unknown else None,
    }


def test_ac04_metrics_match_brute_force():
    with criterion(4, "metric oracle equivalence") as note:
        rng = np.random.default_rng(4)
        for _ in range(100):
            C = int(rng.integers(1, 7))
            conf = rng.integers(0, 6, size=(C + 1, C + 1))
            closed = rng.integers(0, 6, size=(C, C))
            ours = metrics_from_confusion(conf, closed)
            ref = _brute_force_metrics(conf.tolist(), closed.tolist())
            for key, value in ref.items():
                assert ours[key] == value, f"{key}: {ours[key]!r} != {value!r}"
        hs = h_score(0.8, 0.6)
        assert abs(hs - 0.685714) <= 1e-6
        for a in np.linspace(0.01, 1.0, 100):
            assert abs(h_score(a, a) - a) <= 1e-15
        note["msg"] = f"100 matrices exact, H(0.8,0.6)={hs:.6f}"


def test_ac05_perturbation_statistics():
    with criterion(5, "perturbation statistics") as note:
        rng = np.random.default_rng(5)
        tokens = rng.standard_normal((4, 16))
        draws = np.broadcast_to(tokens, (100_000, 4, 16))
        noise = perturb_semantic_tokens(draws, PerturbationConfig(sigma=0.2, seed=5)) - draws
        mean_err = float(np.abs(noise.mean(axis=0)).max())
        std_err = float(np.abs(noise.std(axis=0) - 0.2).max())
        note["msg"] = f"max |mean| {mean_err:.4f}, max |std-0.2| {std_err:.4f} over 64 coords"
        assert mean_err <= 0.005
        assert std_err <= 0.005
        assert np.array_equal(perturb_semantic_tokens(tokens, PerturbationConfig(sigma=0.0)), tokens)


def _train_cli(out, *extra):
    code = cli_main(["train", "--out", str(out), "--seed", "0", *extra])
    assert code == 0, f"train exited {code}"


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("ac06")
    _train_cli(root / "a")
    _train_cli(root / "b")
    _train_cli(root / "resumed", "--max-steps", "100")
    _train_cli(root / "resumed", "--resume", str(root / "resumed" / "checkpoint.star"))
    return root


def test_ac06_training_is_deterministic_and_resumable(cli_runs):
    with criterion(6, "determinism and resume") as note:
        a, b, r = cli_runs / "a", cli_runs / "b", cli_runs / "resumed"
        n_steps = len((a / "train_log.jsonl").read_text().splitlines())
        note["msg"] = f"{n_steps} steps, resumed at step 100"
        assert (a / "train_log.jsonl").read_bytes() == (b / "train_log.jsonl").read_bytes()
        assert (a / "checkpoint.star").read_bytes() == (b / "checkpoint.star").read_bytes()
        assert (r / "checkpoint.star").read_bytes() == (a / "checkpoint.star").read_bytes()
        assert (r / "train_log.jsonl").read_bytes() == (a / "train_log.jsonl").read_bytes()


@pytest.fixture(scope="module")
def toy_results():
    t0 = time.perf_counter()
    results = []
    for seed in TOY_SEEDS:
        hyper = HyperParams(seed=seed, perturbation=PerturbationConfig(0.2, seed))
        results.append(run_toy_ablation(SyntheticSpec(seed=seed), hyper))
    return results, time.perf_counter() - t0


def test_ac07_toy_ablation(toy_results):
    with criterion(7, "toy OSDG ablation") as note:
        results, elapsed = toy_results
        mean = {k: float(np.mean([r.h_score[k] for r in results])) for k in ("full", "no_pseudo", "ablated")}
        note["msg"] = (f"mean H full={mean['full']:.3f} no_pseudo={mean['no_pseudo']:.3f} "
                       f"ablated={mean['ablated']:.3f}, {elapsed:.0f}s")
        print(json.dumps([r.to_dict() for r in results]))
        assert mean["full"] - mean["ablated"] >= 0.05
        assert mean["no_pseudo"] < mean["full"]
        assert elapsed < 600.0


def test_ac08_semantic_slots_spread_prompts(toy_results):
    with criterion(8, "prompt discrepancy direction") as note:
        gains = [r.lemma_gain for r in toy_results[0]]
        note["msg"] = "mean_gain per seed " + ", ".join(f"{g:+.3f}" for g in gains)
        assert sum(g > 0 for g in gains) >= 4


def test_ac09_every_batch_has_three_pseudo_unknowns_per_domain(cli_runs):
    with criterion(9, "batch composition audit") as note:
        records = [json.loads(line) for line in (cli_runs / "a" / "train_log.jsonl").read_text().splitlines()]
        manifest = json.loads((cli_runs / "a" / "checkpoint.star.json").read_text())
        C, domains = len(manifest["class_names"]), manifest["domain_names"]
        for r in records:
            assert set(r["pseudo_by_domain"]) == set(domains)
            assert all(n == 3 for n in r["pseudo_by_domain"].values()), r["step"]
            assert r["pseudo_labels"] == [C] * 3 * len(domains), r["step"]
        note["msg"] = f"{len(records)} batches x {len(domains)} source domains, label {C}"


def test_ac10_backend_frozen_and_optimizer_scope():
    with criterion(10, "frozen-parameter invariance") as note:
        _, backend, (X, y, doms, names), state = small_problem(seed=1, d=16, N=9, C=4, samples=6,
                                                                learning_rate=1e-2, epochs=2)
        before = {k: v.tobytes() for k, v in backend.parameters().items()}
        initial = {n: p.detach().clone() for n, p in trainable_parameters(state)}
        state, log = train(X, y, doms, class_names=state.class_names, domain_names=names,
                           hyper=state.hyper, backend=backend, state=state)
        after = {k: v.tobytes() for k, v in backend.parameters().items()}
        assert before == after
        named = dict(state.model.named_parameters())
        expected = {id(named[n]) for n in TRAINABLE_NAMES}
        in_optimizer = [id(p) for g in state.optimizer.param_groups for p in g["params"]]
        assert len(in_optimizer) == len(set(in_optimizer)) == len(TRAINABLE_NAMES)
        assert set(in_optimizer) == expected
        assert set(named) == set(TRAINABLE_NAMES)
        moved = [n for n, p in trainable_parameters(state) if not torch.equal(p, initial[n])]
        assert set(moved) == set(TRAINABLE_NAMES)
        note["msg"] = f"{len(before)} backend tensors unchanged after {len(log)} steps; optimizer holds {sorted(TRAINABLE_NAMES)}"


def test_ac11_archive_round_trip(tmp_path):
    with criterion(11, "tensor-archive round-trip") as note:
        rng = np.random.default_rng(11)
        tensors = {}
        while len(tensors) < 50:
            name = "".join(rng.choice(list("abcdefgh/._-ÿ字"), size=int(rng.integers(1, 24))))
            shape = tuple(int(s) for s in rng.integers(0, 6, size=int(rng.integers(0, 5))))
            tensors[name] = (rng.standard_normal(shape) * 10.0 ** rng.uniform(-20, 20)).astype(np.float32)
        path = tmp_path / "round.star"
        archive.save(path, tensors)
        back = archive.load(path)
        assert list(back) == sorted(tensors)
        for k, v in tensors.items():
            assert back[k].dtype == np.float32 and back[k].shape == v.shape
            assert back[k].tobytes() == v.tobytes()
        note["msg"] = f"{len(tensors)} tensors, {path.stat().st_size} bytes"


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
