import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import datetime as dt

import pytest
from hypothesis import settings

from tkgpath.gradcheck import toy_graph

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def toy():
    return toy_graph()


def write_split(directory, name, rows):
    path = directory / f"{name}.txt"
    path.write_text("".join("\t".join(map(str, r)) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture
def write_tsv(tmp_path):
    def _write(train, valid, test):
        for name, rows in (("train", train), ("valid", valid), ("test", test)):
            write_split(tmp_path, name, rows)
        return tmp_path

    return _write


ORIGIN = dt.date(2014, 1, 1)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line for an acceptance criterion; repeated in the terminal summary."""

    def record(label: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} {label}: {detail}"
        _VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
