import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from seqfb.builder import ContextConfig, GraphSetup, HmmTopology, read_arpa, read_lexicon  # noqa: E402
from seqfb.cli import toy_config_path  # noqa: E402

TOY_DIR = toy_config_path().parent


def toy_setup(mode: str = "monophone", **kw) -> GraphSetup:
    with open(TOY_DIR / "lexicon.txt") as fp:
        lex = read_lexicon(fp)
    with open(TOY_DIR / "lm.arpa") as fp:
        lm = read_arpa(fp, lex.words)
    return GraphSetup(lex, lm, ContextConfig.for_lexicon(lex, mode), HmmTopology(), **kw)


@pytest.fixture(scope="session")
def toy():
    return toy_setup()


@pytest.fixture(scope="session")
def toy_den(toy):
    return toy.denominator()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
