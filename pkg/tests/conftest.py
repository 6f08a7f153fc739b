import sys
from pathlib import Path

import pytest

from srda.data_synth import generate_phantoms, save_phantoms


class OpenRecorder:
    """Records every path the interpreter opens while active (via the ``open`` audit event).

    Audit hooks see opens from Python and C code alike, so reads through
    numpy, torch or pathlib are all caught.
    """

    _installed = False
    _active: list["OpenRecorder"] = []

    def __init__(self):
        self.paths: list[Path] = []
        if not OpenRecorder._installed:
            sys.addaudithook(OpenRecorder._hook)
            OpenRecorder._installed = True

    @staticmethod
    def _hook(event, args):
        if event == "open" and OpenRecorder._active and isinstance(args[0], (str, bytes, Path)):
            p = args[0].decode() if isinstance(args[0], bytes) else str(args[0])
            for rec in OpenRecorder._active:
                rec.paths.append(Path(p).resolve())

    def __enter__(self):
        OpenRecorder._active.append(self)
        return self

    def __exit__(self, *exc):
        OpenRecorder._active.remove(self)

    def under(self, root: Path) -> list[Path]:
        root = Path(root).resolve()
        return [p for p in self.paths if root in p.parents]


@pytest.fixture
def open_recorder():
    return OpenRecorder()


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """4 volumes of 6 slices at 32x32, split 2/2 by the tests that use it."""
    root = tmp_path_factory.mktemp("phantoms")
    save_phantoms(generate_phantoms(seed=0, n_volumes=4, D=6, H=32, W=32), root, seed=0)
    return root


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "SUMMARY", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
