import numpy as np
import pytest

from cammac.model import ModelConfig, flags_for, init_params
from cammac.scenegen import GenConfig, answer_vocab, generate_dataset, question_vocab

GEN = GenConfig()


def small_model(model="caa+mtm", d=8, p=2, seed=0, dtype=np.float64, **kw):
    f = flags_for(model)
    cfg = ModelConfig(question_vocab(GEN), answer_vocab(GEN), GEN.grid, d, p, f.cq, f.caa, f.mtm, **kw)
    return cfg, init_params(cfg, np.random.default_rng(seed), dtype)


@pytest.fixture(scope="session")
def dialogs():
    return generate_dataset(21, 24, GEN)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
