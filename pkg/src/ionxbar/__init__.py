"""Ion-intercalation memristor devices and crossbar arrays."""

from .device import (
    DeviceGeometry,
    DeviceParams,
    DeviceState,
    DerivedModel,
    MaterialParams,
    PhysicalConstants,
    conductance,
    flux,
    memristance,
    paper_calibrated,
    program_step,
    programming_current,
    relax_step,
    resistance,
)
from .network import (
    BiasConfig,
    CrossbarArray,
    ReadMode,
    Topology,
    TopologyKind,
    build_nodal_system,
    read_mac,
    solve,
    write_disturbance,
)
from .writes import PolicyKind, WritePolicy, execute_plan, plan_writes, pulse_width_for_target

__version__ = "0.1.0"
