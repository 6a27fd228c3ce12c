import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from regionmem.env.scripted import ScriptedTaskAgent, ToyRuleWriter  # noqa: E402
from regionmem.env.toy import ToyEnv, ToyWorld, default_tasks  # noqa: E402

GOLDEN_DIR = Path(__file__).parent / "golden"


def check_golden(name: str, text: str) -> None:
    """Compare with a frozen golden file. REGIONMEM_WRITE_GOLDENS=1 writes
    missing files; an absent golden is otherwise a failure."""
    path = GOLDEN_DIR / name
    if not path.exists():
        if os.environ.get("REGIONMEM_WRITE_GOLDENS") == "1":
            path.write_text(text, encoding="utf-8")
            return
        pytest.fail(f"golden file {path} is missing")
    assert text == path.read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def world():
    return ToyWorld.default()


@pytest.fixture(scope="session")
def toy_tasks():
    return default_tasks()


@pytest.fixture
def env(world, toy_tasks):
    return ToyEnv(world, toy_tasks)


@pytest.fixture
def agent(world):
    return ScriptedTaskAgent(world.rooms)


@pytest.fixture
def rule_writer(world):
    return ToyRuleWriter(world.decoys)


ACCEPTANCE_RESULTS: list[str] = []


class Criterion:
    """Context manager that records one PASS/FAIL line (with elapsed time
    and an optional detail string) and re-raises any failure."""

    def __init__(self, number: int, title: str, time_limit: float = None):
        self.number, self.title, self.time_limit = number, title, time_limit
        self.detail = ""

    def __enter__(self):
        import time
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time
        elapsed = time.perf_counter() - self._t0
        ok = exc_type is None
        if ok and self.time_limit is not None and elapsed >= self.time_limit:
            ok = False
            self.detail += f" exceeded {self.time_limit:g}s limit"
        line = (f"[{'PASS' if ok else 'FAIL'}] criterion {self.number:2d}: {self.title} "
                f"({elapsed:.2f}s){' - ' + self.detail.strip() if self.detail.strip() else ''}")
        ACCEPTANCE_RESULTS.append(line)
        print(line)
        if ok is False and exc_type is None:
            pytest.fail(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
