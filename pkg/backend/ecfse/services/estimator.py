# Equivalent-circuit state estimator: circuit assembly, WLS objective and one KKT solve
import logging
import math
import time

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ecfse.core.config import Settings, get_settings
from ecfse.core.exceptions import MeasurementError, ObservabilityError
from ecfse.models.models import (
    BusEstimate,
    CircuitProgram,
    DeviceMode,
    EstimationResult,
    KktSystem,
    MeasurementSet,
    NetworkModel,
    PmuSubcircuit,
    QuadraticObjective,
    RtuChannel,
    RtuRecord,
    RtuSubcircuit,
    RtuWeights,
)
from ecfse.services.network import branch_two_port
from ecfse.services.synthesis import var_product, var_sum

logger = logging.getLogger(__name__)

# Backward error above which a factorization is treated as numerically singular
SINGULAR_BACKWARD_ERROR = 1e-6

Slots = tuple[int, int]


class VariableIndex:
    """Ordered registry of named state variables"""

    def __init__(self):
        self.names: list[str] = []
        self._slots: dict[str, int] = {}

    def add(self, name: str) -> int:
        if name in self._slots:
            raise MeasurementError(f"variable {name} registered twice")
        self._slots[name] = len(self.names)
        self.names.append(name)
        return self._slots[name]

    def pair(self, name: str) -> Slots:
        """Real and imaginary slots of a complex quantity"""
        return self.add(f"{name}.R"), self.add(f"{name}.I")

    def __getitem__(self, name: str) -> int:
        return self._slots[name]

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __len__(self) -> int:
        return len(self.names)


class _ConstraintBuilder:
    """Collects the rows of A X = b for the split real/imaginary circuits"""

    def __init__(self):
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.labels: list[str] = []

    def new_pair(self, label: str) -> Slots:
        first = len(self.labels)
        self.labels += [f"{label}.R", f"{label}.I"]
        return first, first + 1

    def add(self, row: int, col: int, value: float) -> None:
        if value != 0.0:
            self.rows.append(row)
            self.cols.append(col)
            self.vals.append(value)

    def unit(self, rows: Slots, slots: Slots, sign: float) -> None:
        """sign * Z in both circuits"""
        self.add(rows[0], slots[0], sign)
        self.add(rows[1], slots[1], sign)

    def admittance(self, rows: Slots, y: complex, node: Slots) -> None:
        """Current y*V leaving the node: I_R = G V_R - B V_I, I_I = B V_R + G V_I"""
        self.add(rows[0], node[0], y.real)
        self.add(rows[0], node[1], -y.imag)
        self.add(rows[1], node[0], y.imag)
        self.add(rows[1], node[1], y.real)

    def conductance(self, label: str, i_g: Slots, high: Slots, low: Slots, g: float) -> None:
        """I_G = g (V_high - V_low) per circuit"""
        rows = self.new_pair(label)
        for z in range(2):
            self.add(rows[z], i_g[z], 1.0)
            self.add(rows[z], high[z], -g)
            self.add(rows[z], low[z], g)

    def matrix(self, n_vars: int) -> sp.csr_matrix:
        shape = (len(self.labels), n_vars)
        return sp.coo_matrix((self.vals, (self.rows, self.cols)), shape=shape).tocsr()


def _weight(variance: float, cap: float) -> float:
    return cap if variance <= 1.0 / cap else 1.0 / variance


def rtu_measurement_coefficients(voltage: float, current: float, phi: float) -> tuple[float, float]:
    """(c_G, c_B) so that the RTU current is I_R = c_G V_R + c_B V_I, I_I = c_G V_I - c_B V_R"""
    if voltage <= 0:
        raise MeasurementError(f"RTU voltage must be > 0, got {voltage}")
    ratio = current / voltage
    return ratio * math.cos(phi), ratio * math.sin(phi)


def rtu_weights(
    voltage: float,
    current: float,
    pf: float,
    sigma_v: float,
    sigma_i: float,
    sigma_pf: float,
    sine_floor: float = 1e-6,
    weight_cap: float = 1e12,
    sigma_sine: float | None = None,
) -> RtuWeights:
    """Weights of the c_G and c_B measurement functions from first-order error propagation.

    `sigma_sine` is the spread of sqrt(1 - pf^2) when it is known directly, as for
    an angle reading; otherwise it is propagated from `sigma_pf`.
    """
    if voltage <= 0:
        raise MeasurementError(f"RTU voltage must be > 0, got {voltage}")
    sine = math.sqrt(max(0.0, 1.0 - pf * pf))
    current = max(current, sine_floor)
    pf = max(abs(pf), sine_floor)
    sine_eff = max(sine, sine_floor)
    if sigma_sine is None:
        # first-order spread of sqrt(1 - pf^2), bounded by its value at unity power factor
        sigma_sine = min(pf * sigma_pf / sine_eff, math.sqrt(2.0 * sigma_pf))

    ratio = current / voltage
    var_g = var_product(ratio * pf, [(current, sigma_i), (voltage, sigma_v), (pf, sigma_pf)])
    var_b = var_product(ratio * sine_eff, [(current, sigma_i), (voltage, sigma_v), (sine_eff, sigma_sine)])
    return RtuWeights(
        w_g=_weight(var_g, weight_cap),
        w_b=_weight(var_b, weight_cap),
        var_g=var_g,
        var_b=var_b,
    )


def rtu_channel_weights(
    voltage: float,
    sigma_v: float,
    channel: RtuChannel,
    sine_floor: float = 1e-6,
    weight_cap: float = 1e12,
) -> RtuWeights:
    """rtu_weights for one (I, phi) channel; cos and sin errors both follow from sigma_phi"""
    return rtu_weights(
        voltage,
        channel.current,
        channel.pf,
        sigma_v,
        channel.sigma_i,
        channel.sigma_pf,
        sine_floor,
        weight_cap,
        sigma_sine=abs(math.cos(channel.phi)) * channel.sigma_phi,
    )


def aggregate_flow_rtu(
    record: RtuRecord,
    incident: tuple[int, ...] | None = None,
    sine_floor: float = 1e-6,
    weight_cap: float = 1e12,
) -> tuple[float, float, float, float]:
    """Sum per-line coefficients of a flow RTU into injection-direction (c_G, c_B, var_G, var_B)"""
    branches = [channel.branch for channel in record.channels]
    if any(k is None for k in branches):
        raise MeasurementError(f"flow RTU at bus {record.bus} has a channel without a branch")
    if incident is not None and sorted(branches) != sorted(incident):
        missing = sorted(set(incident) - set(branches))
        raise MeasurementError(
            f"flow RTU at bus {record.bus} lacks records for incident branches {missing}"
        )

    c_g = c_b = 0.0
    sigmas_g, sigmas_b = [], []
    for channel in record.channels:
        g, b = rtu_measurement_coefficients(record.voltage, channel.current, channel.phi)
        weights = rtu_channel_weights(record.voltage, record.sigma_v, channel, sine_floor, weight_cap)
        c_g += g
        c_b += b
        sigmas_g.append(math.sqrt(weights.var_g))
        sigmas_b.append(math.sqrt(weights.var_b))
    return c_g, c_b, var_sum(*sigmas_g), var_sum(*sigmas_b)


def build_circuit(
    net: NetworkModel,
    meas: MeasurementSet,
    g_pmu: float = 100.0,
    weight_cap: float = 1e12,
    sine_floor: float = 1e-6,
) -> CircuitProgram:
    """Modified nodal analysis of the equivalent circuit with PMU and RTU subcircuits"""
    if not g_pmu > 0:
        raise MeasurementError(f"g_pmu must be > 0, got {g_pmu}")

    index = VariableIndex()
    cons = _ConstraintBuilder()
    bus_slots = {bus.id: index.pair(f"V_BUS[{bus.id}]") for bus in net.buses}
    bus_rows = {bus.id: cons.new_pair(f"KCL[{bus.id}]") for bus in net.buses}
    claimed: set[int] = set()

    def claim(bus_id: int) -> None:
        if bus_id not in net.bus_index:
            raise MeasurementError(f"measurement references unknown bus {bus_id}")
        if bus_id in claimed:
            raise MeasurementError(f"more than one device at bus {bus_id}")
        claimed.add(bus_id)

    # (bus, branch) -> (potential slots, KCL rows) of a PMU line terminal node
    terminals: dict[tuple[int, int], tuple[Slots, Slots]] = {}
    pmu_subs = []
    for record in meas.pmu:
        b = record.bus
        claim(b)
        v_pmu = index.pair(f"V_PMU[{b}]")
        i_v = index.pair(f"I_V[{b}]")
        slots: dict = {"v_pmu": v_pmu, "i_v": i_v, "i_pmu": [], "i_g": [], "v_t": []}

        if record.mode is DeviceMode.INJECTION:
            if len(record.channels) != 1 or record.channels[0].branch is not None:
                raise MeasurementError(f"injection PMU at bus {b} needs exactly one injection channel")
            i_pmu = index.pair(f"I_PMU[{b}]")
            i_g = index.pair(f"I_G[{b}]")
            # source node: its potential is V_PMU, fed by I_V
            source_rows = cons.new_pair(f"SRC[{b}]")
            cons.unit(source_rows, i_v, 1.0)
            cons.unit(source_rows, i_pmu, -1.0)
            cons.unit(source_rows, i_g, -1.0)
            cons.unit(bus_rows[b], i_pmu, -1.0)
            cons.unit(bus_rows[b], i_g, -1.0)
            cons.conductance(f"G[{b}]", i_g, v_pmu, bus_slots[b], g_pmu)
            slots["i_pmu"].append(i_pmu)
            slots["i_g"].append(i_g)
        else:
            tie = cons.new_pair(f"TIE[{b}]")
            cons.unit(tie, bus_slots[b], 1.0)
            cons.unit(tie, v_pmu, -1.0)
            cons.unit(bus_rows[b], i_v, -1.0)
            for channel in record.channels:
                k = channel.branch
                if k is None or k not in net.incidence[b]:
                    raise MeasurementError(f"PMU at bus {b} monitors branch {k}, which is not incident")
                v_t = index.pair(f"V_T[{b},{k}]")
                i_pmu = index.pair(f"I_PMU[{b},{k}]")
                i_g = index.pair(f"I_G[{b},{k}]")
                terminal_rows = cons.new_pair(f"KCL_T[{b},{k}]")
                cons.unit(terminal_rows, i_pmu, -1.0)
                cons.unit(terminal_rows, i_g, -1.0)
                cons.unit(bus_rows[b], i_pmu, 1.0)
                cons.unit(bus_rows[b], i_g, 1.0)
                cons.conductance(f"G[{b},{k}]", i_g, v_pmu, v_t, g_pmu)
                terminals[(b, k)] = (v_t, terminal_rows)
                slots["i_pmu"].append(i_pmu)
                slots["i_g"].append(i_g)
                slots["v_t"].append(v_t)

        pmu_subs.append(
            PmuSubcircuit(
                bus=b,
                mode=record.mode,
                g_pmu=g_pmu,
                v_measured=complex(record.v_r, record.v_i),
                w_v=_weight(record.sigma_v**2, weight_cap),
                channels=record.channels,
                w_i=tuple(_weight(channel.sigma**2, weight_cap) for channel in record.channels),
                slots=slots,
            )
        )

    # network stamps; monitored line ends attach to their terminal nodes
    for k, branch in enumerate(net.branches):
        stamp = branch_two_port(branch)
        ends = [
            terminals.get((bus_id, k), (bus_slots[bus_id], bus_rows[bus_id]))
            for bus_id in (branch.from_bus, branch.to_bus)
        ]
        for a in range(2):
            for c in range(2):
                cons.admittance(ends[a][1], complex(stamp[a, c]), ends[c][0])
    for bus in net.buses:
        if bus.shunt:
            cons.admittance(bus_rows[bus.id], bus.shunt, bus_slots[bus.id])

    rtu_subs = []
    for record in meas.rtu:
        b = record.bus
        claim(b)
        if record.mode is DeviceMode.INJECTION:
            if len(record.channels) != 1 or record.channels[0].branch is not None:
                raise MeasurementError(f"injection RTU at bus {b} needs exactly one injection channel")
            channel = record.channels[0]
            c_g, c_b = rtu_measurement_coefficients(record.voltage, channel.current, channel.phi)
            weights = rtu_channel_weights(record.voltage, record.sigma_v, channel, sine_floor, weight_cap)
            w_g, w_b = weights.w_g, weights.w_b
        else:
            sum_g, sum_b, var_g, var_b = aggregate_flow_rtu(record, net.incidence[b], sine_floor, weight_cap)
            shunt = net.bus(b).shunt
            # load-equivalent current drawn at the bus
            c_g = -(sum_g + shunt.real)
            c_b = -(sum_b - shunt.imag)
            w_g, w_b = _weight(var_g, weight_cap), _weight(var_b, weight_cap)

        slots = {name: index.add(f"{name}[{b}]") for name in ("I_GR", "I_BR", "I_GI", "I_BI")}
        rows = bus_rows[b]
        cons.add(rows[0], slots["I_GR"], 1.0)
        cons.add(rows[0], slots["I_BR"], 1.0)
        cons.add(rows[1], slots["I_GI"], 1.0)
        cons.add(rows[1], slots["I_BI"], -1.0)
        rtu_subs.append(
            RtuSubcircuit(bus=b, mode=record.mode, c_g=c_g, c_b=c_b, w_g=w_g, w_b=w_b, slots=slots)
        )

    a = cons.matrix(len(index))
    logger.debug(f"Circuit: {len(index)} variables, {a.shape[0]} constraints, {a.nnz} nonzeros")
    return CircuitProgram(
        names=index.names,
        a=a,
        b=np.zeros(a.shape[0]),
        row_labels=cons.labels,
        bus_slots=bus_slots,
        pmu=pmu_subs,
        rtu=rtu_subs,
    )


def build_objective(program: CircuitProgram, normalize: bool = False) -> QuadraticObjective:
    """Weighted least squares sum_k w_k (r_k X - m_k)^2 as 1/2 X'HX + g'X + c.

    With `normalize`, weights are divided by the largest one so H and g stay O(1);
    the minimizer is unchanged and the multipliers scale by the same factor.
    """
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    targets: list[float] = []
    weights: list[float] = []

    def term(coefficients: dict[int, float], target: float, weight: float) -> None:
        row = len(targets)
        for col, value in coefficients.items():
            rows.append(row)
            cols.append(col)
            vals.append(value)
        targets.append(target)
        weights.append(weight)

    for sub in program.pmu:
        # conductance currents carry unit weight; g_pmu acts as the weighting
        for i_g in sub.slots["i_g"]:
            term({i_g[0]: 1.0}, 0.0, 1.0)
            term({i_g[1]: 1.0}, 0.0, 1.0)
        v_pmu = sub.slots["v_pmu"]
        term({v_pmu[0]: 1.0}, sub.v_measured.real, sub.w_v)
        term({v_pmu[1]: 1.0}, sub.v_measured.imag, sub.w_v)
        for channel, w_i, i_pmu in zip(sub.channels, sub.w_i, sub.slots["i_pmu"]):
            term({i_pmu[0]: 1.0}, channel.i_r, w_i)
            term({i_pmu[1]: 1.0}, channel.i_i, w_i)

    for sub in program.rtu:
        v_r, v_i = program.bus_slots[sub.bus]
        term({sub.slots["I_GR"]: 1.0, v_r: -sub.c_g}, 0.0, sub.w_g)
        term({sub.slots["I_BR"]: 1.0, v_i: -sub.c_b}, 0.0, sub.w_b)
        term({sub.slots["I_GI"]: 1.0, v_i: -sub.c_g}, 0.0, sub.w_g)
        term({sub.slots["I_BI"]: 1.0, v_r: -sub.c_b}, 0.0, sub.w_b)

    r = sp.coo_matrix((vals, (rows, cols)), shape=(len(targets), program.n_vars)).tocsr()
    m = np.asarray(targets)
    w = np.asarray(weights, dtype=float)
    scale = 1.0 / w.max() if normalize and len(w) else 1.0
    w = w * scale
    h = (2.0 * (r.T @ sp.diags(w, 0, shape=(len(w), len(w))) @ r)).tocsr()
    g = -2.0 * (r.T @ (w * m))
    return QuadraticObjective(
        h=h, g=np.asarray(g).ravel(), c=float(np.sum(w * m * m)), residuals=r, targets=m, weights=w, scale=scale
    )


def assemble_kkt(
    h: sp.spmatrix,
    g: np.ndarray,
    a: sp.spmatrix,
    b: np.ndarray | None = None,
    objective: QuadraticObjective | None = None,
) -> KktSystem:
    """[[H, A'], [A, 0]] [X; lam] = [-g; b]"""
    n_vars, n_cons = h.shape[0], a.shape[0]
    if a.shape[1] != n_vars or len(g) != n_vars:
        raise ValueError(f"KKT blocks disagree: H {h.shape}, A {a.shape}, g {len(g)}")
    b = np.zeros(n_cons) if b is None else np.asarray(b, dtype=float)
    matrix = sp.bmat([[h, a.T], [a, None]], format="csc")
    rhs = np.concatenate([-np.asarray(g, dtype=float), b])
    return KktSystem(matrix=matrix, rhs=rhs, n_vars=n_vars, n_cons=n_cons, objective=objective)


def _result(kkt: KktSystem, z: np.ndarray) -> EstimationResult:
    n = kkt.n_vars
    residual = kkt.matrix @ z - kkt.rhs
    norm_k = float(abs(kkt.matrix).sum(axis=1).max()) if kkt.matrix.nnz else 0.0
    denominator = norm_k * np.max(np.abs(z), initial=0.0) + np.max(np.abs(kkt.rhs), initial=0.0)
    backward = float(np.max(np.abs(residual), initial=0.0) / denominator) if denominator > 0 else 0.0
    if not np.all(np.isfinite(z)) or backward > SINGULAR_BACKWARD_ERROR:
        raise ObservabilityError(f"KKT solve is numerically singular (backward error {backward:.2e})")

    x = z[:n]
    if kkt.objective is not None:
        objective = kkt.objective.value(x) / kkt.objective.scale
    else:
        objective = float(0.5 * x @ (kkt.matrix[:n, :n] @ x) - kkt.rhs[:n] @ x)
    return EstimationResult(
        x=x,
        lam=z[n:],
        objective=objective,
        kkt_residual=float(np.max(np.abs(residual), initial=0.0)),
        stationarity=float(np.max(np.abs(residual[:n]), initial=0.0)),
        feasibility=float(np.max(np.abs(residual[n:]), initial=0.0)),
    )


def _equilibrate(matrix: sp.spmatrix, passes: int = 4) -> np.ndarray:
    """Symmetric diagonal scaling d, row maxima of D K D driven towards one (Ruiz)"""
    d = np.ones(matrix.shape[0])
    scaled = sp.csr_matrix(matrix)
    for _ in range(passes):
        row_max = np.asarray(abs(scaled).max(axis=1).todense()).ravel()
        row_max[row_max == 0] = 1.0
        step = 1.0 / np.sqrt(row_max)
        d *= step
        scaled = sp.diags(step) @ scaled @ sp.diags(step)
    return d


def solve(kkt: KktSystem) -> EstimationResult:
    """Sparse LU of the equilibrated KKT matrix plus one step of iterative refinement"""
    d = _equilibrate(kkt.matrix)
    scale = sp.diags(d)
    try:
        lu = splu((scale @ kkt.matrix @ scale).tocsc())
    except RuntimeError as e:
        raise ObservabilityError(f"KKT matrix is singular: unobservable system or redundant constraints ({e})") from e

    def apply(rhs: np.ndarray) -> np.ndarray:
        return d * lu.solve(d * rhs)

    z = apply(kkt.rhs)
    z = z + apply(kkt.rhs - kkt.matrix @ z)
    return _result(kkt, z)


def solve_dense(kkt: KktSystem) -> EstimationResult:
    """Dense LU reference solve of the same equilibrated system"""
    d = _equilibrate(kkt.matrix)
    dense = d[:, None] * kkt.matrix.toarray() * d[None, :]

    def apply(rhs: np.ndarray) -> np.ndarray:
        return d * np.linalg.solve(dense, d * rhs)

    try:
        z = apply(kkt.rhs)
        z = z + apply(kkt.rhs - kkt.matrix @ z)
    except np.linalg.LinAlgError as e:
        raise ObservabilityError(f"KKT matrix is singular ({e})") from e
    return _result(kkt, z)


def extract_state(result: EstimationResult, program: CircuitProgram) -> list[BusEstimate]:
    """Per-bus rectangular and polar voltages from the solved state vector"""
    estimates = []
    for bus_id, (slot_r, slot_i) in program.bus_slots.items():
        v = complex(result.x[slot_r], result.x[slot_i])
        estimates.append(
            BusEstimate(bus=bus_id, v_r=v.real, v_i=v.imag, magnitude=abs(v), angle=math.atan2(v.imag, v.real))
        )
    return estimates


class StateEstimator:
    """Runs the estimator for one network with fixed settings"""

    def __init__(self, net: NetworkModel, settings: Settings | None = None, g_pmu: float | None = None):
        self.net = net
        self.settings = settings or get_settings()
        self.g_pmu = g_pmu if g_pmu is not None else self.settings.g_pmu

    def build(self, meas: MeasurementSet) -> CircuitProgram:
        return build_circuit(
            self.net,
            meas,
            g_pmu=self.g_pmu,
            weight_cap=self.settings.weight_cap,
            sine_floor=self.settings.pf_sine_floor,
        )

    def estimate(self, meas: MeasurementSet) -> EstimationResult:
        start = time.perf_counter()
        program = self.build(meas)
        objective = build_objective(program, normalize=True)
        kkt = assemble_kkt(objective.h, objective.g, program.a, program.b, objective)
        assembled = time.perf_counter()

        try:
            result = solve(kkt)
        except ObservabilityError as e:
            raise ObservabilityError(str(e), self.unmeasured_buses(meas)) from e
        solved = time.perf_counter()

        self._attach(result, program)
        result.assembly_time = assembled - start
        result.solve_time = solved - assembled
        logger.debug(
            f"Estimated {self.net.n_bus} buses: objective {result.objective:.4e}, "
            f"KKT residual {result.kkt_residual:.2e}"
        )
        return result

    def unmeasured_buses(self, meas: MeasurementSet) -> list[int]:
        measured = {record.bus for record in meas.pmu} | {record.bus for record in meas.rtu}
        return [bus.id for bus in self.net.buses if bus.id not in measured]

    def _attach(self, result: EstimationResult, program: CircuitProgram) -> None:
        estimates = extract_state(result, program)
        result.bus_ids = tuple(e.bus for e in estimates)
        result.v_rect = np.array([complex(e.v_r, e.v_i) for e in estimates])
        x = result.x
        for sub in program.pmu:
            channels = [None] if sub.mode is DeviceMode.INJECTION else [c.branch for c in sub.channels]
            for branch, i_g in zip(channels, sub.slots["i_g"]):
                label = f"{sub.bus}" if branch is None else f"{sub.bus}/{branch}"
                result.conductance_currents[label] = float(abs(complex(x[i_g[0]], x[i_g[1]])))
            v_pmu = sub.slots["v_pmu"]
            result.voltage_residuals[sub.bus] = float(abs(complex(x[v_pmu[0]], x[v_pmu[1]]) - sub.v_measured))


def estimate(net: NetworkModel, meas: MeasurementSet, settings: Settings | None = None) -> EstimationResult:
    return StateEstimator(net, settings).estimate(meas)
