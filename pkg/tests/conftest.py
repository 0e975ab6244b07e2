import contextlib

import numpy as np
import pytest
import torch

from uland.config import ArchConfig, GenConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def small_gen():
    """Short 32x32 videos so corpus tests stay fast."""
    return GenConfig(height=32, width=32, n_frames_min=16, n_frames_max=20, length_min=10.0,
                     length_max=14.0, centre_jitter=3.0, period=12.0)


@pytest.fixture
def tiny_arch():
    return ArchConfig(input_size=32, base_filters=4, levels=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class RecordingVideo:
    """Wraps a video and records which attributes and frames are accessed.

    Reading ``labeled_key_index``, ``key_set`` or ``label`` can be made to
    fail outright with ``forbid_truth=True``.
    """

    def __init__(self, video, forbid_truth=False):
        self._video = video
        self._forbid = forbid_truth
        self.frames_read = []
        self.attrs_read = set()

    @property
    def frames(self):
        self.attrs_read.add("frames")
        if self._forbid:
            raise AssertionError("bulk frame access bypasses the instrumented accessor")
        return self._video.frames

    def frame(self, i):
        self.frames_read.append(int(i))
        return self._video.frame(i)

    def __getattr__(self, name):
        if name.startswith("_"):
            raise AttributeError(name)
        self.attrs_read.add(name)
        if self._forbid and name in ("labeled_key_index", "key_set", "label"):
            raise AssertionError(f"ground truth attribute {name!r} was read")
        return getattr(self._video, name)


@pytest.fixture
def recording_video():
    return RecordingVideo


# ---------------------------------------------------------------- acceptance reporting

_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion.

    The body may store a measured summary in ``info["measured"]``; it is
    printed on both outcomes.
    """

    @contextlib.contextmanager
    def check(number, title):
        info = {}
        try:
            yield info
        except Exception as exc:
            detail = info.get("measured") or f"{type(exc).__name__}: {exc}".splitlines()[0]
            _report(f"criterion {number}: FAIL  {title}  [{detail}]")
            raise
        _report(f"criterion {number}: PASS  {title}" + (f"  [{info['measured']}]" if "measured" in info else ""))

    return check


def _report(line):
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
