# Grid case parsing and the per-unit admittance model
import logging
import re
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from ecfse.core.exceptions import CaseFormatError, NetworkValidationError
from ecfse.models.models import (
    Branch,
    BranchStatus,
    Bus,
    BusKind,
    Generator,
    NetworkModel,
)

logger = logging.getLogger(__name__)

BUILTIN_CASES = {
    "ieee14": "case14.m",
    "case14": "case14.m",
    "ieee118": "case118.m",
    "case118": "case118.m",
}

# Columns consumed from each MATPOWER table; anything to the right is ignored
BUS_COLUMNS = ("bus_i", "type", "Pd", "Qd", "Gs", "Bs", "area", "Vm", "Va", "baseKV")
GEN_COLUMNS = ("bus", "Pg", "Qg", "Qmax", "Qmin", "Vg", "mBase", "status")
BRANCH_COLUMNS = (
    "fbus", "tbus", "r", "x", "b", "rateA", "rateB", "rateC", "ratio", "angle", "status",
)
BUS_KIND_CODES = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}

_FUNCTION_RE = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)\s*$")
_ASSIGN_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*")
_SCALAR_RE = re.compile(r"^('[^']*'|[-+0-9.eE]+)\s*;?\s*$")


class _CaseScanner:
    """Line-oriented scanner for the MATPOWER subset (see docs/case-format.md)"""

    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.name = ""
        self.scalars: dict[str, str] = {}
        self.tables: dict[str, list[tuple[int, list[float]]]] = {}

    def scan(self) -> "_CaseScanner":
        lineno = 0
        while lineno < len(self.lines):
            raw = self.lines[lineno]
            lineno += 1
            line = raw.split("%", 1)[0]
            if not line.strip():
                continue

            match = _FUNCTION_RE.match(line)
            if match:
                self.name = match.group(1)
                continue

            match = _ASSIGN_RE.match(line)
            if not match:
                column = len(line) - len(line.lstrip()) + 1
                raise CaseFormatError("expected 'mpc.<field> = ...'", lineno, column)

            field_name = match.group(1)
            rest = line[match.end():]
            stripped = rest.strip()
            if stripped.startswith("["):
                offset = match.end() + rest.index("[") + 1
                lineno = self._scan_matrix(field_name, lineno, offset)
            elif stripped.startswith("{"):
                lineno = self._skip_cell(field_name, lineno, line)
            else:
                scalar = _SCALAR_RE.match(stripped)
                if not scalar:
                    column = match.end() + len(rest) - len(rest.lstrip()) + 1
                    raise CaseFormatError(f"bad value for mpc.{field_name}", lineno, column)
                self.scalars[field_name] = scalar.group(1).strip("'")
        return self

    def _scan_matrix(self, field_name: str, lineno: int, offset: int) -> int:
        """Collect matrix rows starting after '[' on line `lineno`; returns next line number"""
        rows: list[tuple[int, list[float]]] = []
        current: list[float] = []
        current_line = lineno
        start_line = lineno
        line = self.lines[lineno - 1].split("%", 1)[0]
        position = offset

        while True:
            for token_match in re.finditer(r"[^\s,;\]]+|;|\]", line[position:]):
                token = token_match.group(0)
                column = position + token_match.start() + 1
                if token == "]":
                    if current:
                        rows.append((current_line, current))
                    tail = line[position + token_match.end():].strip()
                    if tail not in ("", ";"):
                        raise CaseFormatError(f"unexpected text after ']' in mpc.{field_name}", lineno, column + 1)
                    self.tables[field_name] = rows
                    return lineno
                if token == ";":
                    if current:
                        rows.append((current_line, current))
                    current = []
                    continue
                try:
                    value = float(token)
                except ValueError:
                    raise CaseFormatError(
                        f"invalid number {token!r} in mpc.{field_name}", lineno, column
                    ) from None
                if not current:
                    current_line = lineno
                current.append(value)

            if current:
                rows.append((current_line, current))
                current = []
            if lineno >= len(self.lines):
                raise CaseFormatError(f"unterminated matrix mpc.{field_name}", start_line, offset)
            lineno += 1
            line = self.lines[lineno - 1].split("%", 1)[0]
            position = 0

    def _skip_cell(self, field_name: str, lineno: int, line: str) -> int:
        start_line = lineno
        while "}" not in line:
            if lineno >= len(self.lines):
                raise CaseFormatError(f"unterminated cell array mpc.{field_name}", start_line)
            lineno += 1
            line = self.lines[lineno - 1].split("%", 1)[0]
        logger.warning(f"Ignoring cell array mpc.{field_name}")
        return lineno


def _table(scanner: _CaseScanner, name: str, columns: tuple[str, ...], required: bool = True) -> list[tuple[int, list[float]]]:
    rows = scanner.tables.get(name)
    if rows is None:
        if required:
            raise CaseFormatError(f"missing table mpc.{name}", len(scanner.lines) or 1)
        return []
    widest = 0
    for line, row in rows:
        if len(row) < len(columns):
            raise CaseFormatError(
                f"mpc.{name} row has {len(row)} columns, need at least {len(columns)}", line
            )
        widest = max(widest, len(row))
    if widest > len(columns):
        logger.warning(f"mpc.{name}: {widest - len(columns)} trailing column(s) ignored")
    return rows


def parse_case(text: str, name: str = "") -> NetworkModel:
    """Parse MATPOWER-subset case text into a validated per-unit NetworkModel"""
    scanner = _CaseScanner(text).scan()

    if "baseMVA" not in scanner.scalars:
        raise CaseFormatError("missing mpc.baseMVA", 1)
    try:
        base_mva = float(scanner.scalars["baseMVA"])
    except ValueError:
        raise CaseFormatError("mpc.baseMVA is not a number", 1) from None
    if base_mva <= 0:
        raise NetworkValidationError(f"baseMVA must be > 0, got {base_mva}")

    for table in scanner.tables:
        if table not in ("bus", "gen", "branch"):
            logger.warning(f"Ignoring table mpc.{table}")

    buses = []
    for line, row in _table(scanner, "bus", BUS_COLUMNS):
        code = int(row[1])
        if code not in BUS_KIND_CODES:
            raise NetworkValidationError(f"bus {int(row[0])} (line {line}): unsupported bus type {code}")
        base_kv = row[9]
        if base_kv <= 0:
            logger.warning(f"bus {int(row[0])}: baseKV {base_kv} unspecified, using 1.0")
            base_kv = 1.0
        buses.append(
            Bus(
                id=int(row[0]),
                base_kv=base_kv,
                shunt_g=row[4] / base_mva,
                shunt_b=row[5] / base_mva,
                bus_kind=BUS_KIND_CODES[code],
                p_load=row[2] / base_mva,
                q_load=row[3] / base_mva,
                vm_case=row[7],
                va_case=float(np.radians(row[8])),
            )
        )

    generators = [
        Generator(
            bus=int(row[0]),
            p_gen=row[1] / base_mva,
            q_gen=row[2] / base_mva,
            v_set=row[5],
            in_service=row[7] > 0,
        )
        for _, row in _table(scanner, "gen", GEN_COLUMNS, required=False)
    ]

    branches = []
    dropped = 0
    for _, row in _table(scanner, "branch", BRANCH_COLUMNS):
        if row[10] <= 0:
            dropped += 1
            continue
        branches.append(
            Branch(
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                series_r=row[2],
                series_x=row[3],
                charging_b=row[4],
                tap_ratio=row[8] if row[8] != 0 else 1.0,
                phase_shift=float(np.radians(row[9])),
            )
        )
    if dropped:
        logger.info(f"Dropped {dropped} out-of-service branch(es)")

    net = build_network(buses, branches, base_mva, generators, name=name or scanner.name)
    logger.info(f"Loaded case {net.name!r}: {net.n_bus} buses, {len(net.branches)} branches")
    return net


def build_network(
    buses: list[Bus],
    branches: list[Branch],
    base_mva: float = 100.0,
    generators: list[Generator] | None = None,
    name: str = "",
) -> NetworkModel:
    """Assemble and validate a NetworkModel; out-of-service branches are dropped"""
    seen: set[int] = set()
    for bus in buses:
        if bus.id in seen:
            raise NetworkValidationError(f"duplicate bus id {bus.id}")
        if not bus.base_kv > 0:
            raise NetworkValidationError(f"bus {bus.id}: base_kv must be > 0")
        seen.add(bus.id)

    slack = [bus.id for bus in buses if bus.bus_kind is BusKind.SLACK]
    if len(slack) != 1:
        raise NetworkValidationError(f"expected exactly one slack bus, found {len(slack)}")

    kept = [branch for branch in branches if branch.status is BranchStatus.IN_SERVICE]
    for branch in kept:
        for end in (branch.from_bus, branch.to_bus):
            if end not in seen:
                raise NetworkValidationError(
                    f"branch {branch.from_bus}-{branch.to_bus} references unknown bus {end}"
                )
        if branch.series_r**2 + branch.series_x**2 <= 0:
            raise NetworkValidationError(f"branch {branch.from_bus}-{branch.to_bus} has zero impedance")
        if not branch.tap_ratio > 0:
            raise NetworkValidationError(f"branch {branch.from_bus}-{branch.to_bus} has tap ratio <= 0")

    for gen in generators or []:
        if gen.bus not in seen:
            raise NetworkValidationError(f"generator references unknown bus {gen.bus}")

    net = NetworkModel(
        buses=tuple(buses),
        branches=tuple(kept),
        base_mva=base_mva,
        slack_bus=slack[0],
        generators=tuple(generators or ()),
        name=name,
    )
    _check_connected(net)
    return net


def _check_connected(net: NetworkModel) -> None:
    index = net.bus_index
    rows = [index[b.from_bus] for b in net.branches]
    cols = [index[b.to_bus] for b in net.branches]
    graph = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(net.n_bus, net.n_bus))
    n_islands, labels = connected_components(graph, directed=False)
    if n_islands > 1:
        slack_label = labels[index[net.slack_bus]]
        islanded = sorted(bus.id for bus, label in zip(net.buses, labels) if label != slack_label)
        raise NetworkValidationError(
            f"network has {n_islands} islands; buses not connected to the slack: {islanded}"
        )


def load_case(name_or_path: str | Path) -> NetworkModel:
    """Load a built-in case by name or a case file by path"""
    key = str(name_or_path).lower()
    if key in BUILTIN_CASES:
        text = resources.files("ecfse.data").joinpath(BUILTIN_CASES[key]).read_text(encoding="utf-8")
        return parse_case(text, name=BUILTIN_CASES[key].removesuffix(".m"))
    path = Path(name_or_path)
    return parse_case(path.read_text(encoding="utf-8"), name=path.stem)


def _direct(value: float) -> str:
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


def _scaled(value: float) -> str:
    text = f"{value:.12g}"
    return "0" if text == "-0" else text


def serialize_case(net: NetworkModel) -> str:
    """Canonical MATPOWER-subset text; parse_case(serialize_case(net)) == net"""
    base = net.base_mva
    kind_codes = {kind: code for code, kind in BUS_KIND_CODES.items()}
    lines = [
        f"function mpc = {net.name or 'case'}",
        "mpc.version = '2';",
        f"mpc.baseMVA = {_direct(base)};",
        "",
        "%\t" + "\t".join(BUS_COLUMNS),
        "mpc.bus = [",
    ]
    for bus in net.buses:
        values = [
            str(bus.id), str(kind_codes[bus.bus_kind]),
            _scaled(bus.p_load * base), _scaled(bus.q_load * base),
            _scaled(bus.shunt_g * base), _scaled(bus.shunt_b * base), "1",
            _direct(bus.vm_case), _scaled(np.degrees(bus.va_case)), _direct(bus.base_kv),
        ]
        lines.append("\t" + "\t".join(values) + ";")
    lines += ["];", "", "%\t" + "\t".join(GEN_COLUMNS), "mpc.gen = ["]
    for gen in net.generators:
        values = [
            str(gen.bus), _scaled(gen.p_gen * base), _scaled(gen.q_gen * base), "0", "0",
            _direct(gen.v_set), _direct(base), "1" if gen.in_service else "0",
        ]
        lines.append("\t" + "\t".join(values) + ";")
    lines += ["];", "", "%\t" + "\t".join(BRANCH_COLUMNS), "mpc.branch = ["]
    for branch in net.branches:
        values = [
            str(branch.from_bus), str(branch.to_bus), _direct(branch.series_r),
            _direct(branch.series_x), _direct(branch.charging_b), "0", "0", "0",
            _direct(branch.tap_ratio), _scaled(np.degrees(branch.phase_shift)), "1",
        ]
        lines.append("\t" + "\t".join(values) + ";")
    lines += ["];", ""]
    return "\n".join(lines)


def branch_two_port(branch: Branch) -> np.ndarray:
    """2x2 pi-model admittance [[Yff, Yft], [Ytf, Ytt]] with off-nominal tap on the from side"""
    if not branch.in_service:
        raise NetworkValidationError(f"branch {branch.from_bus}-{branch.to_bus} is out of service")
    z = complex(branch.series_r, branch.series_x)
    if z == 0:
        raise NetworkValidationError(f"branch {branch.from_bus}-{branch.to_bus} has zero impedance")
    y_series = 1 / z
    y_charge = 0.5j * branch.charging_b
    tap = branch.tap_ratio * np.exp(1j * branch.phase_shift)
    return np.array(
        [
            [(y_series + y_charge) / abs(tap) ** 2, -y_series / np.conj(tap)],
            [-y_series / tap, y_series + y_charge],
        ]
    )


def build_bus_admittance(net: NetworkModel) -> sp.csr_matrix:
    """Sparse N x N bus admittance: branch stamps plus bus shunts"""
    index = net.bus_index
    rows: list[int] = []
    cols: list[int] = []
    vals: list[complex] = []
    for branch in net.branches:
        stamp = branch_two_port(branch)
        ends = (index[branch.from_bus], index[branch.to_bus])
        for a in range(2):
            for b in range(2):
                rows.append(ends[a])
                cols.append(ends[b])
                vals.append(stamp[a, b])
    for pos, bus in enumerate(net.buses):
        if bus.shunt:
            rows.append(pos)
            cols.append(pos)
            vals.append(bus.shunt)
    # duplicate (row, col) entries are summed on conversion
    return sp.coo_matrix((vals, (rows, cols)), shape=(net.n_bus, net.n_bus), dtype=complex).tocsr()


def branch_currents(net: NetworkModel, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Current phasors leaving the from-bus and the to-bus into every branch"""
    index = net.bus_index
    i_from = np.zeros(len(net.branches), dtype=complex)
    i_to = np.zeros(len(net.branches), dtype=complex)
    for k, branch in enumerate(net.branches):
        stamp = branch_two_port(branch)
        ends = np.array([v[index[branch.from_bus]], v[index[branch.to_bus]]])
        i_from[k], i_to[k] = stamp @ ends
    return i_from, i_to


def current_leaving(net: NetworkModel, bus_id: int, k: int, i_from: np.ndarray, i_to: np.ndarray) -> complex:
    """Current leaving `bus_id` into branch k"""
    return complex(i_from[k] if net.branches[k].from_bus == bus_id else i_to[k])
