import numpy as np
import pytest

from diffplan.chain import ChainSpec, Joint, Link, default_chain
from diffplan.geom import Pose


def voxel_overlap(alo, ahi, blo, bhi, res=1e-3):
    """Count 3-D grid cells (centres on a ``res`` lattice over box a) inside both boxes.

    Axis-aligned membership factorises per axis, so the 3-D count is the
    product of per-axis counts; ``brute_voxel_overlap`` checks that on a coarse grid.
    """
    count = 1
    for lo, hi, lo2, hi2 in zip(alo, ahi, blo, bhi):
        n = int(np.ceil((hi - lo) / res))
        c = lo + (np.arange(n) + 0.5) * res
        count *= int(np.count_nonzero((c >= lo2) & (c <= hi2) & (c <= hi)))
    return count * res**3


def brute_voxel_overlap(alo, ahi, blo, bhi, res=1e-2):
    axes = []
    for lo, hi in zip(alo, ahi):
        n = int(np.ceil((hi - lo) / res))
        axes.append(lo + (np.arange(n) + 0.5) * res)
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    P = np.stack([X, Y, Z], axis=-1)
    inside = np.all((P >= blo) & (P <= bhi) & (P <= ahi), axis=-1)
    return np.count_nonzero(inside) * res**3


def planar_chain(n_links=2, length=1.0, width=0.05) -> ChainSpec:
    """z-axis joints, links of ``length`` along x, next joint at the previous tip."""
    joints, links = [], []
    for k in range(n_links):
        origin = Pose.from_xyz_rpy((length if k else 0.0, 0.0, 0.0))
        joints.append(Joint((0.0, 0.0, 1.0), origin))
        links.append(Link(k, (length / 2, width, width), Pose.from_xyz_rpy((length / 2, 0.0, 0.0))))
    return ChainSpec(joints, links, name=f"planar{n_links}")


@pytest.fixture
def chain():
    return default_chain()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report: one line per criterion at the end of the run
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
