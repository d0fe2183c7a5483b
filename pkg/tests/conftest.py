import pytest

from poichain.crypto import ED25519, TransparentScheme, make_keys


@pytest.fixture(scope="session")
def keys():
    return make_keys(b"tests", 50)


@pytest.fixture(scope="session")
def key_of(keys):
    table = {k.public: k for k in keys}
    return table.__getitem__


def roster_of(keys, n):
    return sorted(k.public for k in keys[:n])


@pytest.fixture
def transparent():
    return TransparentScheme()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
