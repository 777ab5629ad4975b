import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from segorder.corpus import SynthSpec, synth_corpus, synth_vocab  # noqa: E402
from segorder.tokenizer import SPECIAL_TOKENS, Vocab  # noqa: E402


@pytest.fixture(scope="session")
def vocab():
    return synth_vocab()


@pytest.fixture
def toy_vocab():
    return Vocab.from_tokens(list(SPECIAL_TOKENS) + ["play", "##ing", "##ed", "run", "a", "b", "c", ".", ","])


@pytest.fixture(scope="session")
def ordinal_docs():
    return synth_corpus(SynthSpec(docs=40, segments_per_doc=(3, 6), tokens_per_segment=(4, 8), cue="ordinal", seed=3))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
