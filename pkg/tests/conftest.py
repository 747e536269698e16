import pytest

from xmalkit.dataset import bundled_dictionary
from xmalkit.evaluation import bundled_synonyms
from xmalkit.interpreter import bundled_semantics


@pytest.fixture(scope="session")
def dictionary():
    return bundled_dictionary()


@pytest.fixture(scope="session")
def db():
    return bundled_semantics()


@pytest.fixture(scope="session")
def synonyms():
    return bundled_synonyms()


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion, then assert it."""
    def record(number, ok, detail):
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"\nACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{number:2d} {'PASS' if ok else 'FAIL'}  {detail}")
