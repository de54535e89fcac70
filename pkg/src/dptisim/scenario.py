"""Scenario files: a versioned JSON schema describing processes, thread
programs, filter rules, optional enclaves, cost overrides, and expected
outcomes. Unknown keys are rejected so fixture typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .costmodel import CostTable, calibrate_default
from .dpti import Variant
from .filters import CmpOp, FilterBuilder, FilterError, syscall_nr
from .sgxdom import (
    EnclaveEexit,
    EnclaveInterrupt,
    EnclaveOcall,
    EnclaveOp,
    EnclaveRead,
    EnclaveSetReg,
    EnclaveWrite,
    build_isolated_mapping,
)
from .tasks import (
    EcallOp,
    ExecImage,
    ExecOp,
    ExitOp,
    ExplorationReport,
    ForkOp,
    MapSpec,
    MmapOp,
    MprotectOp,
    ProcMemWriteOp,
    ReadOp,
    SimReport,
    Simulation,
    SyscallOp,
    ThreadOp,
    WriteOp,
)
from .vmem import vpn_of

SCHEMA_VERSION = 1


class ScenarioError(Exception):
    def __init__(self, message: str, line: Optional[int] = None, col: Optional[int] = None):
        self.line = line
        self.col = col
        if line is not None:
            message = f"line {line}, column {col}: {message}"
        super().__init__(message)


def _require_keys(obj: dict, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ScenarioError(f"{where}: unknown key(s) {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ScenarioError(f"{where}: missing required key(s) {sorted(missing)}")


def _data_bytes(obj: dict, where: str) -> bytes:
    if "string" in obj:
        raw = obj["string"].encode()
        if obj.get("nul", True):
            raw += b"\x00"
        return raw
    if "bytes" in obj:
        return bytes(obj["bytes"])
    raise ScenarioError(f"{where}: needs 'string' or 'bytes'")


def _op_bytes(obj: dict, where: str) -> bytes:
    if "string" in obj:
        return obj["string"].encode()
    if "bytes" in obj:
        return bytes(obj["bytes"])
    raise ScenarioError(f"{where}: needs 'string' or 'bytes'")


_VARIANTS = {"none": None, "stash": Variant.STASH, "freeze": Variant.FREEZE}

# default for variant overrides: "use the variant the scenario declares"
_SCENARIO_VARIANT = object()


@dataclass
class Scenario:
    raw: dict[str, Any]
    name: str
    variant: Optional[Variant]
    cores: int
    deny_mode: str
    schedule: dict[str, Any]
    processes: list[dict[str, Any]]
    filters: Optional[dict[str, Any]]
    enclaves: list[dict[str, Any]] = field(default_factory=list)
    costs: Optional[dict[str, Any]] = None
    expectations: Optional[dict[str, Any]] = None


def load_scenario(path: Union[str, Path]) -> Scenario:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, line=exc.lineno, col=exc.colno) from None
    return scenario_from_dict(raw)


def scenario_from_dict(raw: dict[str, Any]) -> Scenario:
    _require_keys(
        raw,
        allowed={
            "version", "name", "variant", "cores", "deny_mode", "schedule",
            "processes", "filters", "enclaves", "costs", "expectations",
        },
        required={"version", "name", "processes"},
        where="scenario",
    )
    if raw["version"] != SCHEMA_VERSION:
        raise ScenarioError(
            f"schema version {raw['version']!r} not supported (expected {SCHEMA_VERSION})"
        )
    variant_name = raw.get("variant", "none")
    if variant_name not in _VARIANTS:
        raise ScenarioError(f"variant must be one of {sorted(_VARIANTS)}")
    schedule = raw.get("schedule", {"mode": "seeded", "seed": 0})
    _require_keys(
        schedule, allowed={"mode", "seed", "max_steps"}, required={"mode"}, where="schedule"
    )
    if schedule["mode"] not in ("seeded", "exhaustive"):
        raise ScenarioError("schedule.mode must be 'seeded' or 'exhaustive'")

    processes = raw["processes"]
    if not isinstance(processes, list) or not processes:
        raise ScenarioError("processes must be a non-empty list")
    for i, proc in enumerate(processes):
        _require_keys(
            proc,
            allowed={"name", "sandboxed", "mappings", "threads"},
            required={"name", "threads"},
            where=f"processes[{i}]",
        )
        for j, m in enumerate(proc.get("mappings", [])):
            _require_keys(
                m,
                allowed={
                    "vaddr", "pages", "write", "exec", "user", "shared",
                    "label", "alias_of", "data",
                },
                required=set() if "alias_of" in m else {"vaddr"},
                where=f"processes[{i}].mappings[{j}]",
            )
            if "alias_of" in m and "vaddr" not in m:
                raise ScenarioError(f"processes[{i}].mappings[{j}]: alias mappings still need 'vaddr'")
        for j, t in enumerate(proc["threads"]):
            _require_keys(
                t, allowed={"name", "rsp", "rbp", "ops"}, required={"name", "ops"},
                where=f"processes[{i}].threads[{j}]",
            )
            _validate_ops(t["ops"], f"processes[{i}].threads[{j}].ops")

    filters = raw.get("filters")
    if filters is not None:
        _require_keys(filters, allowed={"rules"}, required={"rules"}, where="filters")
        for k, rule in enumerate(filters["rules"]):
            _require_keys(
                rule, allowed={"nr", "arg", "op", "value", "strings", "allow"},
                required={"nr"}, where=f"filters.rules[{k}]",
            )

    enclaves = raw.get("enclaves", [])
    for i, enc in enumerate(enclaves):
        _require_keys(
            enc,
            allowed={
                "name", "process", "variant", "pages", "cbp_vaddr", "dbp_vaddrs",
                "syscall_exit", "script",
            },
            required={"name", "process", "pages", "cbp_vaddr"},
            where=f"enclaves[{i}]",
        )
        _require_keys(
            enc["pages"], allowed={"vaddr", "pages"}, required={"vaddr"},
            where=f"enclaves[{i}].pages",
        )

    expectations = raw.get("expectations")
    if expectations is not None:
        _EXP_KEYS = {"witnesses", "kills", "no_kills", "deadlocks", "paths"}
        _require_keys(
            expectations,
            allowed=_EXP_KEYS | {"by_variant"},
            required=set(),
            where="expectations",
        )
        for vname, sub in expectations.get("by_variant", {}).items():
            if vname not in _VARIANTS:
                raise ScenarioError(f"expectations.by_variant: unknown variant {vname!r}")
            _require_keys(sub, allowed=_EXP_KEYS, required=set(),
                          where=f"expectations.by_variant.{vname}")

    return Scenario(
        raw=raw,
        name=raw["name"],
        variant=_VARIANTS[variant_name],
        cores=raw.get("cores", 2),
        deny_mode=raw.get("deny_mode", "kill"),
        schedule=schedule,
        processes=processes,
        filters=filters,
        enclaves=enclaves,
        costs=raw.get("costs"),
        expectations=expectations,
    )


_OP_KEYS: dict[str, set[str]] = {
    "read": {"vaddr", "len"},
    "write": {"vaddr", "string", "bytes"},
    "syscall": {"nr", "args"},
    "mmap": {"vaddr", "pages", "write", "exec", "shared", "alias_of"},
    "mprotect": {"vaddr", "pages", "user", "write", "exec"},
    "fork": {"child"},
    "exec": {"path_vaddr", "image"},
    "exit": {"code", "group"},
    "proc_mem_write": {"target", "vaddr", "string", "bytes"},
    "ecall": {"enclave"},
}


def _validate_ops(ops: list, where: str) -> None:
    if not isinstance(ops, list):
        raise ScenarioError(f"{where}: expected a list")
    for n, op in enumerate(ops):
        if not isinstance(op, dict) or "op" not in op:
            raise ScenarioError(f"{where}[{n}]: expected an object with an 'op' key")
        kind = op["op"]
        if kind not in _OP_KEYS:
            raise ScenarioError(f"{where}[{n}]: unknown op {kind!r}")
        unknown = set(op) - _OP_KEYS[kind] - {"op"}
        if unknown:
            raise ScenarioError(f"{where}[{n}]: unknown key(s) {sorted(unknown)} for op {kind!r}")
        if kind == "fork":
            _validate_ops(op.get("child", []), f"{where}[{n}].child")
        if kind == "exec" and "image" in op:
            _require_keys(
                op["image"], allowed={"mappings", "ops"}, required=set(),
                where=f"{where}[{n}].image",
            )
            _validate_ops(op["image"].get("ops", []), f"{where}[{n}].image.ops")


# ---------------------------------------------------------------------------
# building a runnable simulation


def build_filters(spec: dict[str, Any]) -> FilterBuilder:
    fb = FilterBuilder()
    try:
        for rule in spec["rules"]:
            nr = rule["nr"]
            if "strings" in rule:
                for s in rule["strings"]:
                    fb.add_rule_string(nr, rule["arg"], CmpOp.EQ, s)
            elif "arg" in rule:
                fb.add_rule_primitive(nr, rule["arg"], CmpOp[rule.get("op", "EQ")], rule["value"])
            else:
                fb.add_rule(nr)
    except FilterError as exc:
        raise ScenarioError(f"filters: {exc}") from None
    return fb


def build_simulation(
    sc: Scenario,
    variant_override: object = _SCENARIO_VARIANT,
    cost_table: Optional[CostTable] = None,
) -> Simulation:
    variant = sc.variant if variant_override is _SCENARIO_VARIANT else variant_override
    if cost_table is None:
        cost_table = calibrate_default()
        if sc.costs:
            cost_table = cost_table.with_overrides(sc.costs)
    sim = Simulation(
        variant=variant,
        cores=sc.cores,
        deny_mode=sc.deny_mode,
        name=sc.name,
        cost_table=cost_table,
        config=sc.raw,
    )
    labels: dict[str, list[int]] = {}
    proc_infos = []
    for proc in sc.processes:
        sandboxed = proc.get("sandboxed", False)
        table = None
        if sandboxed:
            if sc.filters is None:
                raise ScenarioError(f"process {proc['name']!r} is sandboxed but no filters are defined")
            table = build_filters(sc.filters).install()
        info = sim.add_process(proc["name"], sandboxed=sandboxed, filters=table)
        proc_infos.append(info)
        for m in proc.get("mappings", []):
            spec = _map_spec(m, labels)
            frames = sim.map_region(info.asid, spec)
            if m.get("label"):
                labels[m["label"]] = frames
    for enc in sc.enclaves:
        host = next(p for p in proc_infos if p.name == enc["process"])
        enc_variant = (
            _VARIANTS[enc["variant"]] if "variant" in enc else variant
        )
        pages = enc["pages"]
        start = vpn_of(pages["vaddr"])
        enclave_vpns = set(range(start, start + pages.get("pages", 1)))
        domain = build_isolated_mapping(
            sim.vmem,
            sim.vmem.spaces[host.asid],
            enc["name"],
            enclave_vpns,
            vpn_of(enc["cbp_vaddr"]),
            enc.get("dbp_vaddrs", []),
            enc_variant,
            syscall_exit=enc.get("syscall_exit", False),
            script=[_enclave_op(o) for o in enc.get("script", [])],
        )
        sim.enclaves[enc["name"]] = domain
    for proc, info in zip(sc.processes, proc_infos):
        for t in proc["threads"]:
            sim.add_thread(
                info,
                [_thread_op(o, labels) for o in t["ops"]],
                name=t["name"],
                rsp=t.get("rsp", 0),
                rbp=t.get("rbp", 0),
            )
    return sim


def _map_spec(m: dict[str, Any], labels: dict[str, list[int]]) -> MapSpec:
    alias_frames = None
    if "alias_of" in m:
        label = m["alias_of"]
        if label not in labels:
            raise ScenarioError(f"alias_of references undefined label {label!r}")
        alias_frames = tuple(labels[label])
    data = tuple(
        (d["at"], _data_bytes(d, "mapping data")) for d in m.get("data", [])
    )
    pages = m.get("pages", len(alias_frames) if alias_frames else 1)
    lo, hi = m["vaddr"], m["vaddr"] + pages * 4096
    for at, raw in data:
        if not (lo <= at and at + len(raw) <= hi):
            raise ScenarioError(
                f"mapping data at {at:#x} (+{len(raw)}) falls outside {lo:#x}..{hi:#x}"
            )
    return MapSpec(
        vaddr=m["vaddr"],
        pages=pages,
        writable=m.get("write", True),
        executable=m.get("exec", False),
        user=m.get("user", True),
        shared=m.get("shared", False),
        alias_frames=alias_frames,
        data=data,
        label=m.get("label"),
    )


def _thread_op(op: dict[str, Any], labels: dict[str, list[int]]) -> ThreadOp:
    kind = op["op"]
    if kind == "read":
        return ReadOp(op["vaddr"], op.get("len", 1))
    if kind == "write":
        return WriteOp(op["vaddr"], _op_bytes(op, "write op"))
    if kind == "syscall":
        try:
            nr = syscall_nr(op["nr"])
        except FilterError as exc:
            raise ScenarioError(str(exc)) from None
        return SyscallOp(nr, tuple(op.get("args", [])))
    if kind == "mmap":
        return MmapOp(_map_spec(op, labels))
    if kind == "mprotect":
        return MprotectOp(
            op["vaddr"], op.get("pages", 1),
            user=op.get("user", True),
            writable=op.get("write", False),
            executable=op.get("exec", False),
        )
    if kind == "fork":
        return ForkOp(tuple(_thread_op(o, labels) for o in op.get("child", [])))
    if kind == "exec":
        image = op.get("image", {})
        return ExecOp(
            op["path_vaddr"],
            ExecImage(
                mappings=tuple(_map_spec(m, labels) for m in image.get("mappings", [])),
                ops=tuple(_thread_op(o, labels) for o in image.get("ops", [])),
            ),
        )
    if kind == "exit":
        return ExitOp(op.get("code", 0), op.get("group", True))
    if kind == "proc_mem_write":
        return ProcMemWriteOp(op["target"], op["vaddr"], _op_bytes(op, "proc_mem_write op"))
    if kind == "ecall":
        return EcallOp(op["enclave"])
    raise ScenarioError(f"unknown op {kind!r}")


def _enclave_op(op: dict[str, Any]) -> EnclaveOp:
    kind = op.get("op")
    if kind == "read":
        return EnclaveRead(op["vaddr"], op.get("len", 1))
    if kind == "write":
        return EnclaveWrite(op["vaddr"], _op_bytes(op, "enclave write"))
    if kind == "set_reg":
        return EnclaveSetReg(op["reg"], op["value"])
    if kind == "eexit":
        return EnclaveEexit(op.get("target", "legal"))
    if kind == "ocall":
        return EnclaveOcall()
    if kind == "interrupt":
        return EnclaveInterrupt()
    raise ScenarioError(f"unknown enclave op {kind!r}")


# ---------------------------------------------------------------------------
# expectations


def effective_expectations(sc: Scenario, variant: Optional[Variant]) -> Optional[dict[str, Any]]:
    """Base expectations merged with the per-variant override section."""
    exp = sc.expectations
    if exp is None:
        return None
    merged = {k: v for k, v in exp.items() if k != "by_variant"}
    name = variant.value if variant is not None else "none"
    merged.update(exp.get("by_variant", {}).get(name, {}))
    return merged or None


def check_expectations(
    sc: Scenario,
    result: Union[SimReport, ExplorationReport],
    variant: object = _SCENARIO_VARIANT,
) -> list[str]:
    """Returns a list of human-readable failures; empty means all hold."""
    if variant is _SCENARIO_VARIANT:
        variant = sc.variant
    exp = effective_expectations(sc, variant)
    if not exp:
        return []
    failures: list[str] = []
    exploring = isinstance(result, ExplorationReport)
    witnesses = result.witnesses if exploring else len(result.witnesses)
    bounds = exp.get("witnesses")
    if bounds:
        if "equals" in bounds and witnesses != bounds["equals"]:
            failures.append(f"witnesses: expected exactly {bounds['equals']}, found {witnesses}")
        if "min" in bounds and witnesses < bounds["min"]:
            failures.append(f"witnesses: expected at least {bounds['min']}, found {witnesses}")
        if "max" in bounds and witnesses > bounds["max"]:
            failures.append(f"witnesses: expected at most {bounds['max']}, found {witnesses}")
    for want in exp.get("kills", []):
        if exploring:
            if "process" in want:
                failures.append("kills: per-process expectations need a seeded run")
                continue
            cause = want.get("cause")
            if cause is not None and cause not in result.kills:
                failures.append(f"kills: no path killed with cause {cause!r}")
        else:
            hits = [
                k for k in result.kills
                if ("process" not in want or k["process"] == want["process"])
                and ("cause" not in want or k["cause"] == want["cause"])
            ]
            if not hits:
                failures.append(f"kills: no kill matching {want}")
    no_kills = exp.get("no_kills")
    if no_kills:
        if exploring:
            if result.kills:
                failures.append(f"no_kills: kills occurred: {sorted(result.kills)}")
        else:
            names = None if no_kills is True else set(no_kills)
            bad = [
                k for k in result.kills if names is None or k["process"] in names
            ]
            if bad:
                failures.append(f"no_kills: kills occurred: {bad}")
    deadlocks = exp.get("deadlocks")
    if deadlocks is not None:
        count = result.deadlock_paths if exploring else len(result.deadlocked)
        if count != deadlocks.get("equals", 0):
            failures.append(
                f"deadlocks: expected {deadlocks.get('equals', 0)}, found {count}"
            )
    paths = exp.get("paths")
    if paths is not None and exploring and result.paths < paths.get("min", 1):
        failures.append(f"paths: expected at least {paths.get('min', 1)}, explored {result.paths}")
    return failures
