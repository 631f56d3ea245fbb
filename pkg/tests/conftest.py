from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from csmoe.corpus import CorpusSpec, gen_corpus
from csmoe.model import ModelConfig, build_model

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_corpus():
    return gen_corpus(CorpusSpec(n_train=12, n_eval=4))


@pytest.fixture
def tiny_model():
    """The default architecture in float64 with dropout left at its default."""
    return build_model(ModelConfig(), seed=3, dtype=np.float64)


def make_rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


OVERFIT_STEPS = 1000


@pytest.fixture(scope="session")
def overfit_run():
    """Default LAE-ST-MoE trained on the default 50-utterance corpus.

    Returns ``(model, corpus, seconds)``; shared by the decode tests and the
    overfit acceptance criterion so the run happens once per session.
    """
    import time

    from csmoe.model import TrainConfig, train

    t0 = time.perf_counter()
    corpus = gen_corpus(CorpusSpec())
    model = build_model(ModelConfig(), seed=0)
    train(model, corpus.train, TrainConfig(steps=OVERFIT_STEPS, seed=0))
    return model, corpus, time.perf_counter() - t0


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember one acceptance line; all lines are printed in the terminal summary."""
    ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
