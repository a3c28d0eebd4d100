import numpy as np
import pytest

from mdil.data import default_domain_specs
from mdil.experiment import generate_all, model_spec
from mdil.model import DomainSpec, EncoderConfig, add_domain, build_model
from mdil.trainer import TrainConfig

TINY_ENC = EncoderConfig(widths=(4, 8), units_per_stage=1, decoder_width=4)


@pytest.fixture
def tiny_enc():
    return TINY_ENC


@pytest.fixture
def tiny_cfg():
    return TrainConfig(lr=0.05, epochs=2, batch_size=4, seed=3)


@pytest.fixture(scope="session")
def tiny_domains():
    gens = default_domain_specs(n_train=8, n_val=4, image_size=16)
    train, val = generate_all(gens)
    return [model_spec(g) for g in gens], train, val


@pytest.fixture
def two_domain_model():
    rng = np.random.default_rng(0)
    m = build_model(TINY_ENC, DomainSpec("A", ("bg", "x", "y")), rng)
    add_domain(m, DomainSpec("B", ("bg", "x", "z", "w")), rng=rng)
    return m


# acceptance criteria lines, printed after the run whether or not output is captured
CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str = ""):
        CRITERIA.append(f"{'PASS' if ok else 'FAIL'} criterion {number}" + (f": {detail}" if detail else ""))
        print(CRITERIA[-1])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
