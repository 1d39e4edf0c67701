import pytest

from mcastcoll.fabric import Fabric, FaultModel
from mcastcoll.topology import build_clos


def clos16(bandwidth=25e9, latency=1e-6):
    """The 16-node desk-scale topology used throughout: 4 leaves x 4 nodes,
    2 cores."""
    return build_clos(4, 4, 2, bandwidth, latency)


def make_fabric(topology=None, fault=None, seed=0, mtu=4096, header_bytes=0, trace=None):
    return Fabric(topology or clos16(), fault or FaultModel(), seed=seed,
                  mtu=mtu, header_bytes=header_bytes, trace=trace)


@pytest.fixture
def topo():
    return clos16()


@pytest.fixture
def fabric(topo):
    return make_fabric(topo)
