"""Real-time transmission/distribution co-simulation testbed.

Couples a quasi-static phasor transmission simulator, a radial-feeder
backward/forward-sweep power flow, and a smart-inverter DER simulator over a
publish/subscribe transport (in-process loopback, duplex pipe, or MQTT 3.1.1)
with master-clock synchronization, closed-loop delay metering, and overrun
detection.
"""

from .core import (
    ConfigurationError,
    CosimConfig,
    DelaySample,
    LoadUpdate,
    Measurement,
    MetricError,
    OverrunEvent,
    OverrunKind,
    PacingMode,
    SimTime,
    SolverDivergenceError,
    TransportError,
    from_per_unit,
    ticks_per_cosim_step,
    to_per_unit,
)
from .der import (
    DerFleet,
    DerUnit,
    FreqWattParams,
    GsfMode,
    VoltVarCurve,
    converge_der_pf,
    der_outputs,
    freq_watt,
    set_connected,
    volt_var,
)
from .distribution import (
    Feeder,
    PfSolution,
    ZipLoad,
    backward_forward_sweep,
    head_power,
    synthesize_feeder,
)
from .messages import TopicMap, WireMessage, decode_message, encode_load_update, encode_measurement
from .metrics import der_event_metrics, propagation_delay, rms_difference, spectral_ratio
from .runner import RunMode, RunReport, run_cosim, run_monolithic
from .scenarios import ScenarioSpec, builtin_scenario, list_builtin_scenarios, load_scenario
from .sequencer import FeederEndpoint, Sequencer, StalePolicy, delay_stats, sync_timestamp
from .transmission import (
    PiLine,
    ReferenceProgram,
    SignalProgram,
    TxNetwork,
    TxState,
    apply_spot_load,
    evaluate_reference,
    run_tx_loop,
    solve_tx,
)
from .transport import DuplicateInjector, LoopbackTransport, PipeTransport

__version__ = "0.1.0"
