import numpy as np
import pytest
import torch

from conftest import small_problem
from seeclip.trainer import (TRAINABLE_NAMES, DivergenceError, HyperParams, assemble_batch, batch_indices,
                             checkpoint_load, checkpoint_save, compute_losses, gradient_step, make_optimizer,
                             mock_generator_for, phase_of, train, trainable_parameters)


def test_adamw_single_step_by_hand():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    g = torch.tensor([0.5, -0.25], dtype=torch.float64)
    opt = make_optimizer([p], lr=0.1, weight_decay=0.01)
    gradient_step([p], [g], opt)
    # first step: bias-corrected m = g, v = g^2
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * g.numpy() / (np.abs(g.numpy()) + 1e-8)
    assert np.allclose(p.detach().numpy(), expected, atol=1e-15)


def test_gradient_step_rejects_non_finite():
    p = torch.nn.Parameter(torch.zeros(2, dtype=torch.float64))
    with pytest.raises(DivergenceError):
        gradient_step([p], [torch.tensor([np.nan, 0.0], dtype=torch.float64)], make_optimizer([p], 0.1))


def test_trainable_set(problem):
    *_, state = problem
    names = [n for n, _ in trainable_parameters(state)]
    assert tuple(names) == TRAINABLE_NAMES
    assert {n for n, _ in state.model.named_parameters()} == set(TRAINABLE_NAMES)
    opt_params = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    assert opt_params == {id(p) for _, p in trainable_parameters(state)}


def test_batch_order_is_a_permutation_per_epoch():
    h = HyperParams(batch_size=4, seed=2)
    spe = 3
    seen = np.concatenate([batch_indices(10, h, s, spe) for s in range(spe)])
    assert sorted(seen) == list(range(10))
    nxt = np.concatenate([batch_indices(10, h, s, spe) for s in range(spe, 2 * spe)])
    assert not np.array_equal(seen, nxt)


def test_phase_schedules():
    per_batch = HyperParams()
    per_epoch = HyperParams(phase_schedule="alternate_per_epoch")
    assert [phase_of(s, per_batch, 3) for s in range(4)] == ["align", "repulse", "align", "repulse"]
    assert [phase_of(s, per_epoch, 3) for s in range(7)] == ["align"] * 3 + ["repulse"] * 3 + ["align"]


def test_batch_has_pseudo_unknowns_per_domain(problem):
    _, backend, (X, y, doms, _), state = problem
    batch, idx = assemble_batch(state, X, y, doms, 0, mock_generator_for(state, X.shape[1]), backend)
    assert len(idx) == 6
    assert batch.pseudo_patches.shape == (6, X.shape[1], X.shape[2])
    assert batch.pseudo_domains.tolist() == [0, 0, 0, 1, 1, 1]
    breakdown, states = compute_losses(state, batch, backend)
    assert states.shape == state.ema.shape
    assert breakdown.total.requires_grad


def test_training_reduces_alignment():
    _, backend, (X, y, doms, names), _ = small_problem(learning_rate=1e-2, epochs=6)
    h = HyperParams(learning_rate=1e-2, epochs=6)
    state, log = train(X, y, doms, class_names=["a", "b", "c"], domain_names=names, hyper=h, backend=backend)
    first = np.mean([r["align"] for r in log[:4]])
    last = np.mean([r["align"] for r in log[-4:]])
    assert last < first
    assert state.step == len(log) == state.total_steps


def test_hyperparams_round_trip():
    h = HyperParams(learning_rate=3e-3, seed=4)
    assert HyperParams.from_dict(h.to_dict()) == h


def test_checkpoint_round_trip(tmp_path, problem):
    _, backend, (X, y, doms, names), state = problem
    state, _ = train(X, y, doms, class_names=state.class_names, domain_names=names, hyper=state.hyper,
                     backend=backend, state=state, max_steps=3)
    manifest = checkpoint_save(state, tmp_path / "ck.star")
    assert manifest.name == "ck.star.json"
    back = checkpoint_load(tmp_path / "ck.star")
    assert back.step == 3 and back.class_names == state.class_names and back.hyper == state.hyper
    for (n, a), (_, b) in zip(trainable_parameters(state), trainable_parameters(back)):
        assert torch.equal(a, b), n
    assert torch.equal(back.ema, state.ema)
