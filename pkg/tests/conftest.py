import numpy as np
import pytest
import torch

from seeclip.backend import BackendSpec, SyntheticBackend
from seeclip.data import SyntheticSpec, build_losdo_splits, make_synthetic_dataset, synthetic_unknown_names
from seeclip.evaluation import source_arrays
from seeclip.trainer import HyperParams, init_state

torch.set_num_threads(1)


def small_problem(seed=0, d=8, N=5, C=3, M=3, samples=4, **hyper):
    """A tiny synthetic split, its backend, source arrays and a fresh train state."""
    spec = SyntheticSpec(M=M, C=C, U=1, d=d, N=N, samples_per_class_per_domain=samples, seed=seed)
    ds = make_synthetic_dataset(spec)
    split = build_losdo_splits(ds, synthetic_unknown_names(spec))[0]
    backend = SyntheticBackend(BackendSpec(d=d, N=N, seed=seed))
    X, y, doms, names = source_arrays(split, backend)
    h = HyperParams(seed=seed, **hyper)
    state = init_state(X, y, doms, class_names=split.known_classes, domain_names=names, hyper=h, d=d)
    return split, backend, (X, y, doms, names), state


@pytest.fixture
def problem():
    return small_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
