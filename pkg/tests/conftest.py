import numpy as np
import pytest

from vgn.synth import SynthConfig, synth_generate
from vgn.trainer import TrainConfig, TrainLog, pretrain_cnn, train_vgn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_samples():
    return synth_generate(SynthConfig(n_samples=5, seed=0))


@pytest.fixture(scope="session")
def desk_run(desk_samples):
    """Default desk-scale schedule: 2000 pretraining + 2000 joint iterations.

    Shared by the learning checks; takes a few minutes.
    """
    import copy
    import time

    config = TrainConfig()
    t0 = time.perf_counter()
    pre_log = TrainLog()
    cnn = pretrain_cnn(desk_samples, config, log=pre_log)
    t1 = time.perf_counter()
    joint = copy.deepcopy(cnn)
    joint_log = TrainLog()
    train_vgn(desk_samples, joint, config, log=joint_log)
    t2 = time.perf_counter()
    return {"config": config, "cnn": cnn, "vgn": joint, "pre_log": pre_log,
            "joint_log": joint_log, "pretrain_seconds": t1 - t0, "joint_seconds": t2 - t1}


_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
