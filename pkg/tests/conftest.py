import numpy as np
import pytest

from scacopf.case_model import (
    Bus, Contingency, Generator, Line, Network, PenaltyConfig, Transformer,
)


def make_bus(bid, **kw):
    base = dict(v_min=0.9, v_max=1.1, base_kv=230.0)
    base.update(kw)
    return Bus(id=bid, **base)


def make_gen(gid, bus, **kw):
    base = dict(p_min=0.0, p_max=2.0, q_min=-1.0, q_max=1.0, alpha=1.0,
                cost_curve=((1.0, 10.0), (2.5, 20.0)))
    base.update(kw)
    return Generator(id=gid, bus=bus, **base)


def make_line(eid, o, d, **kw):
    base = dict(g=0.5, b=-5.0, b_ch=0.02, r_max=2.0, r_max_ctg=2.2)
    base.update(kw)
    return Line(id=eid, origin=o, destination=d, **base)


def make_xf(fid, o, d, **kw):
    base = dict(g=0.3, b=-4.0, tau=1.05, theta_shift=0.02, g_mag=0.01,
                b_mag=-0.02, s_max=2.0, s_max_ctg=2.2)
    base.update(kw)
    return Transformer(id=fid, origin=o, destination=d, **base)


def two_bus_net(**overrides):
    fields = dict(
        buses=(make_bus("B1"), make_bus("B2", p_load=0.8, q_load=0.2)),
        generators=(make_gen("G1", "B1"),),
        lines=(make_line("L1", "B1", "B2"),),
        transformers=(),
        contingencies=(),
        penalty_config=PenaltyConfig(),
        reference_bus="B1",
    )
    fields.update(overrides)
    return Network(**fields)


def five_bus_net(with_contingencies=True):
    """Small meshed case with a line, a transformer ring, and two generators."""
    buses = (
        make_bus("B1"),
        make_bus("B2", p_load=0.6, q_load=0.15),
        make_bus("B3", p_load=0.5, q_load=0.1, b_fs=0.05),
        make_bus("B4", p_load=0.4, q_load=0.1, bcs_min=-0.2, bcs_max=0.2),
        make_bus("B5", p_load=0.3, q_load=0.05, g_fs=0.01),
    )
    generators = (
        make_gen("G1", "B1", p_max=1.5, cost_curve=((0.8, 8.0), (1.8, 16.0))),
        make_gen("G2", "B3", p_max=1.2, cost_curve=((0.5, 12.0), (1.5, 25.0))),
    )
    lines = (
        make_line("L1", "B1", "B2", b=-8.0, g=0.8, r_max=1.6),
        make_line("L2", "B2", "B3", b=-6.0, g=0.6, r_max=1.4),
        make_line("L3", "B3", "B4", b=-5.0, g=0.5, r_max=1.2),
        make_line("L4", "B1", "B5", b=-7.0, g=0.7, r_max=1.4),
    )
    transformers = (
        make_xf("T1", "B5", "B4", b=-4.0, g=0.4, s_max=1.2),
    )
    contingencies = ()
    if with_contingencies:
        contingencies = (
            Contingency("CG2", "generator-outage", "G2", ("G1",)),
            Contingency("CL2", "line-outage", "L2", ("G1", "G2")),
            Contingency("CT1", "transformer-outage", "T1", ("G1", "G2")),
        )
    return Network(
        buses=buses, generators=generators, lines=lines,
        transformers=transformers, contingencies=contingencies,
        penalty_config=PenaltyConfig(), reference_bus="B1",
    )


@pytest.fixture
def net2():
    return two_bus_net()


@pytest.fixture
def net5():
    return five_bus_net()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
