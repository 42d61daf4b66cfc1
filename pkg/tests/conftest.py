import os
import stat
import sys
import textwrap

import pytest

from reconattack.phantom import PhantomSpec, generate_frame
from reconattack.rfcore import ConvexGeometry

# shallow, narrow frames that keep the tests fast; 64x64 output keeps both ROIs in-sector
SMALL_GEOMETRY = ConvexGeometry(radius=0.02, angular_span=0.6, depth_offset=0.02)
SMALL_SPEC = PhantomSpec(geometry=SMALL_GEOMETRY, n_lines=48, n_samples=1024)
SMALL_SIZE = (64, 64)


@pytest.fixture(scope="session")
def default_fatty_frame():
    return generate_frame(PhantomSpec(seed=7), 1)


@pytest.fixture(scope="session")
def small_spec():
    return SMALL_SPEC


@pytest.fixture
def make_stub(tmp_path):
    """Write an executable Python script and return its path as a string."""

    def _make(name, body):
        path = tmp_path / name
        path.write_text(f"#!{sys.executable}\n" + textwrap.dedent(body))
        path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
        return os.fspath(path)

    return _make
