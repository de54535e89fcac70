"""Cycle accounting over simulation events.

The table is a calibrated accounting device, not a hardware model: each
constant is fitted so that the canonical single-syscall benchmarks reproduce
measured totals, and everything else follows additively from the charged
components. Charges are exact (integers and rationals), so calibrated
totals compare with zero tolerance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from numbers import Rational
from typing import Any, Iterable, Optional, Sequence, Union

from .events import (
    EcallEvent,
    Event,
    OcallEvent,
    ProtectEvent,
    RestoreEvent,
    SeccompEvalEvent,
    StringCheckEvent,
    SyscallEvent,
)

Cycles = Union[int, Fraction]


def _num(x: Cycles) -> Union[int, float]:
    """JSON-friendly value: exact int when integral, float otherwise."""
    if isinstance(x, Rational) and x.denominator == 1:
        return int(x)
    return float(x)


@dataclass(frozen=True)
class CostTable:
    """Per-component cycle costs; the additive model charges a simulated run
    as the sum of its components.

    Defaults reproduce: 295/395/360 cycles for an allow-listed fast syscall
    under no filtering / a 349-rule sequential scan / constant table lookup;
    one-page deep string filtering dominated by the two TLB shootdowns; and
    domain-transition overheads of +19.9%/+9.9% (call-in, fault vs syscall
    exit) and +44.0%/+24.0% (call-out).
    """

    base_syscall: dict[str, Cycles] = field(
        default_factory=lambda: {"getppid": 295, "openat": 855, "write": 855, "default": 295}
    )
    filter_lookup_dpti: Cycles = 65
    seccomp_per_rule_scanned: Cycles = Fraction(100, 349)
    pt_resolve: Cycles = 86
    pte_manipulate: Cycles = 27
    tlb_flush: Cycles = 458
    string_compare_base: Cycles = 35
    string_compare_per_char: Cycles = Fraction(1, 2)
    ecall_base: Cycles = 10000
    ocall_base: Cycles = 5000
    domain_enter: Cycles = 390
    ocall_exit_fixed: Cycles = 600
    fault_exit: Cycles = 1600
    syscall_exit: Cycles = 600

    def base_for(self, name: str) -> Cycles:
        return self.base_syscall.get(name, self.base_syscall.get("default", 0))

    def string_compare_cost(self, arg_len: int, comparisons: int, matched: bool) -> Cycles:
        """Every candidate pays the comparison overhead; only the matching
        one is scanned to its full length."""
        cost = comparisons * self.string_compare_base
        if matched:
            cost = cost + self.string_compare_per_char * arg_len
        return cost

    @classmethod
    def zeroed(cls) -> CostTable:
        return cls(
            base_syscall={"default": 0},
            filter_lookup_dpti=0,
            seccomp_per_rule_scanned=0,
            pt_resolve=0,
            pte_manipulate=0,
            tlb_flush=0,
            string_compare_base=0,
            string_compare_per_char=0,
            ecall_base=0,
            ocall_base=0,
            domain_enter=0,
            ocall_exit_fixed=0,
            fault_exit=0,
            syscall_exit=0,
        )

    def with_overrides(self, overrides: dict[str, Any]) -> CostTable:
        fields: dict[str, Any] = {}
        for key, value in overrides.items():
            if key == "base_syscall":
                merged = dict(self.base_syscall)
                merged.update({k: _to_cycles(v) for k, v in value.items()})
                fields[key] = merged
            elif hasattr(self, key):
                fields[key] = _to_cycles(value)
            else:
                raise KeyError(f"unknown cost field {key!r}")
        return replace(self, **fields)


def _to_cycles(value: Any) -> Cycles:
    if isinstance(value, bool):
        raise TypeError("cost values must be numbers")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        return Fraction(str(value))
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return Fraction(int(value[0]), int(value[1]))
    raise TypeError(f"cannot interpret cost value {value!r}")


def calibrate_default() -> CostTable:
    return CostTable()


def charge(event: Event, table: CostTable) -> dict[str, Cycles]:
    """Component charges for one event; empty for uncharged event types."""
    if isinstance(event, SyscallEvent):
        out: dict[str, Cycles] = {"base": table.base_for(event.name)}
        if event.sandboxed:
            out["filter_lookup"] = table.filter_lookup_dpti
        return out
    if isinstance(event, ProtectEvent):
        return {
            "pt_resolve": table.pt_resolve * event.pages,
            "pte_manipulate": table.pte_manipulate * event.mappings,
            "tlb_flush": table.tlb_flush * event.mappings,
        }
    if isinstance(event, RestoreEvent):
        return {
            "pte_manipulate": table.pte_manipulate * event.mappings,
            "tlb_flush": table.tlb_flush * event.mappings,
        }
    if isinstance(event, StringCheckEvent):
        return {
            "string_check": table.string_compare_cost(
                event.arg_len, event.comparisons, event.matched
            )
        }
    if isinstance(event, SeccompEvalEvent):
        return {"seccomp_scan": event.scanned * table.seccomp_per_rule_scanned}
    if isinstance(event, EcallEvent):
        out = {"sgx_base": table.ecall_base}
        if event.protected:
            out["domain_enter"] = table.domain_enter
            out[f"{event.exit_kind}_exit"] = (
                table.fault_exit if event.exit_kind == "fault" else table.syscall_exit
            )
        return out
    if isinstance(event, OcallEvent):
        out = {"sgx_base": table.ocall_base}
        if event.protected:
            out["domain_exit"] = table.ocall_exit_fixed
            out[f"{event.exit_kind}_exit"] = (
                table.fault_exit if event.exit_kind == "fault" else table.syscall_exit
            )
        return out
    return {}


@dataclass
class CycleTotals:
    total: Cycles
    components: dict[str, Cycles]

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": _num(self.total),
            "components": {k: _num(v) for k, v in sorted(self.components.items())},
        }


def accumulate(events: Iterable[Event], table: CostTable) -> CycleTotals:
    total: Cycles = 0
    components: dict[str, Cycles] = {}
    for event in events:
        for component, cycles in charge(event, table).items():
            components[component] = components.get(component, 0) + cycles
            total = total + cycles
    return CycleTotals(total, components)


# ---------------------------------------------------------------------------
# benchmark reports


def overhead_pct(value: Cycles, baseline: Cycles) -> Optional[float]:
    if baseline == 0:
        return None
    return round(float(Fraction(value - baseline) / Fraction(baseline) * 100), 1)


@dataclass
class BenchRow:
    label: str
    cycles: Cycles
    overhead: Optional[float]  # percent vs the baseline row, 0.1% resolution
    components: dict[str, Cycles] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "cycles": _num(self.cycles),
            "overhead_pct": self.overhead,
            "components": {k: _num(v) for k, v in sorted(self.components.items())},
        }


@dataclass
class BenchReport:
    title: str
    rows: list[BenchRow]

    def row(self, label: str) -> BenchRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def to_dict(self) -> dict[str, Any]:
        return {"title": self.title, "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def render_text(self) -> str:
        width = max([len(r.label) for r in self.rows] + [len(self.title), 8])
        lines = [self.title, "-" * len(self.title)]
        for r in self.rows:
            cyc = _num(r.cycles)
            cyc_s = f"{cyc:.1f}" if isinstance(cyc, float) else str(cyc)
            over = "baseline" if r.overhead is None else f"{r.overhead:+.1f}%"
            lines.append(f"{r.label:<{width}}  {cyc_s:>10}  {over:>9}")
        return "\n".join(lines)


def bench_report(title: str, rows: Sequence[tuple[str, CycleTotals]], baseline: str) -> BenchReport:
    base_total = next(t.total for label, t in rows if label == baseline)
    out = []
    for label, totals in rows:
        out.append(
            BenchRow(
                label=label,
                cycles=totals.total,
                overhead=None if label == baseline else overhead_pct(totals.total, base_total),
                components=dict(totals.components),
            )
        )
    return BenchReport(title, out)
