import pytest

from tdcosim.core import CosimConfig
from tdcosim.distribution import Branch, Feeder, FeederNode, ZipLoad
from tdcosim.transmission import Bus, PiLine, TxNetwork


@pytest.fixture
def two_node_feeder():
    """The oracle-pinned 2-node feeder: z=0.01+0.02j, constant-PQ 0.1+0.05j."""
    return Feeder(
        nodes=(FeederNode("head"), FeederNode("load")),
        branches=(Branch("head", "load", 0.01, 0.02),),
        loads={"load": ZipLoad(0.1, 0.05)},
        base_mva_feeder=10.0,
    )


@pytest.fixture
def two_bus_network():
    """The prototype: ideal source, one pi-line, spot load bus 'pcc'."""
    return TxNetwork(
        buses=(Bus("src"), Bus("pcc")),
        lines=(PiLine("src", "pcc", 0.01, 0.1),),
        source_bus="src",
        spot_loads={"pcc": (1.0, 0.3)},
    )


@pytest.fixture
def fast_config():
    return CosimConfig(dt_tx=0.005, dt_cosim=1.0, pf_tolerance=1e-8, max_der_pf_iterations=10)
