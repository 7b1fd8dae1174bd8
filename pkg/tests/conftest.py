import dataclasses

import numpy as np
import pytest

from tmlp.experiments.context import Settings, bundled
from tmlp.lens import TunedLensConfig
from tmlp.model import GPT2_SMALL, random_init
from tmlp.tokenizer import load_vocab

# Narrow GPT-2: real vocabulary, 12 layers and the 3,072-wide MLP so neuron
# indices match, but a 64-wide residual so forward passes take milliseconds.
TINY = dataclasses.replace(GPT2_SMALL, d_model=64, n_head=8, n_ctx=256)


@pytest.fixture(scope="session")
def vocab():
    return load_vocab(bundled("gpt2/vocab.json"), bundled("gpt2/merges.txt"))


@pytest.fixture(scope="session")
def tiny_weights():
    return random_init(0, TINY)


@pytest.fixture(scope="session")
def tiny_sequences():
    rng = np.random.default_rng(7)
    return [rng.integers(0, TINY.n_vocab, 128) for _ in range(6)]


# experiment settings scaled down for the tiny model
FAST = Settings(resamples=200, ig_steps=5, survey_tokens=128, reconstruct_tokens=100, control_thetas=(0.1, 0.5),
                lens=TunedLensConfig(epochs=1, n_sequences=2, learning_rate=0.1))


WORDS = ("the of and in to a was is for on as with by he at from his an were are which this also be has "
         "or had first one their its new after who they two her she been other when time during there").split()


def synthetic_text(n_lines: int, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n_lines):
        k = int(rng.integers(5, 25))
        lines.append(" " + " ".join(WORDS[i] for i in rng.integers(0, len(WORDS), k)) + " . \n")
    return "".join(lines)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS / FAIL / BLOCKED line per criterion

ACCEPTANCE: dict[str, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): numbered acceptance criterion")
    config.addinivalue_line("markers", "slow: full-size model passes (minutes on one CPU)")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.passed:
        status = "PASS"
    elif rep.skipped:
        status = "BLOCKED"
        detail = str(rep.longrepr[2]).removeprefix("Skipped: ").removeprefix("BLOCKED: ")
    else:
        status = "FAIL"
        message = rep.longreprtext.strip().splitlines()
        detail = detail or (message[-1] if message else "")
    ACCEPTANCE[mark.args[0]] = (status, mark.args[1], detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda cid: (int("".join(c for c in cid if c.isdigit())), cid)
    for cid in sorted(ACCEPTANCE, key=key):
        status, title, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{status:<7} {cid:>3}  {title}" + (f" | {detail}" if detail else ""))
