"""Deterministic multi-thread simulator.

Threads run scripted op sequences; the scheduler picks one runnable thread
per step, either from a seeded RNG (reproducible runs) or by exhaustively
enumerating every choice at every branch point (systematic interleaving
exploration). Syscalls expand into multiple scheduler steps at their
preemption points, which is what makes check/use races schedulable.

Fault handling, stalling, wake-ups, and process lifecycle (fork, exec,
exit/exit_group with filter reference counting) all live here; the filtering
policy itself is in the engine this simulation hosts.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Optional, Sequence, Union

from . import costmodel
from .dpti import DptiEngine, SyscallContext, Variant, make_syscall_context
from .events import (
    DeadlockEvent,
    Event,
    FiltersFreedEvent,
    KillCause,
    KillEvent,
    StallEvent,
    SyscallEvent,
    WakeEvent,
)
from .filters import SYSCALL_NAMES, SYSCALL_NRS, FilterTable
from .sgxdom import EnclaveContext, EnclaveDomain, SgxRuntime
from .vmem import AccessMode, PAGE_SIZE, Vmem, vpn_of


# ---------------------------------------------------------------------------
# thread programs


@dataclass(frozen=True)
class ReadOp:
    vaddr: int
    length: int = 1


@dataclass(frozen=True)
class WriteOp:
    vaddr: int
    data: bytes


@dataclass(frozen=True)
class SyscallOp:
    nr: int
    args: tuple[int, ...] = ()


@dataclass(frozen=True)
class MapSpec:
    """One mapped region: pages, permissions, optional initial bytes.

    alias_frames maps existing physical frames again instead of allocating
    fresh ones; data entries are (absolute vaddr, bytes) pairs.
    """

    vaddr: int
    pages: int = 1
    writable: bool = True
    executable: bool = False
    user: bool = True
    shared: bool = False
    alias_frames: Optional[tuple[int, ...]] = None
    data: tuple[tuple[int, bytes], ...] = ()
    label: Optional[str] = None


@dataclass(frozen=True)
class MmapOp:
    spec: MapSpec


@dataclass(frozen=True)
class MprotectOp:
    vaddr: int
    pages: int
    user: bool = True
    writable: bool = False
    executable: bool = False

    @property
    def vpns(self) -> list[int]:
        start = vpn_of(self.vaddr)
        return list(range(start, start + self.pages))


@dataclass(frozen=True)
class ForkOp:
    child_ops: tuple = ()


@dataclass(frozen=True)
class ExecImage:
    mappings: tuple[MapSpec, ...] = ()
    ops: tuple = ()


@dataclass(frozen=True)
class ExecOp:
    path_vaddr: int
    image: ExecImage = ExecImage()


@dataclass(frozen=True)
class ExitOp:
    code: int = 0
    group: bool = True


@dataclass(frozen=True)
class ProcMemWriteOp:
    target: Union[int, str]  # tid or thread name
    vaddr: int
    data: bytes


@dataclass(frozen=True)
class EcallOp:
    enclave: str


ThreadOp = Union[
    ReadOp, WriteOp, SyscallOp, MmapOp, MprotectOp, ForkOp, ExecOp, ExitOp,
    ProcMemWriteOp, EcallOp,
]


def _op_label(op: ThreadOp) -> str:
    if isinstance(op, ReadOp):
        return f"read@{op.vaddr:#x}"
    if isinstance(op, WriteOp):
        return f"write@{op.vaddr:#x}"
    if isinstance(op, SyscallOp):
        return f"syscall:{SYSCALL_NAMES.get(op.nr, op.nr)}"
    if isinstance(op, MmapOp):
        return f"mmap@{op.spec.vaddr:#x}"
    if isinstance(op, MprotectOp):
        return f"mprotect@{op.vaddr:#x}"
    if isinstance(op, ForkOp):
        return "fork"
    if isinstance(op, ExecOp):
        return "exec"
    if isinstance(op, ExitOp):
        return "exit_group" if op.group else "exit"
    if isinstance(op, ProcMemWriteOp):
        return f"proc_mem_write@{op.vaddr:#x}"
    if isinstance(op, EcallOp):
        return f"ecall:{op.enclave}"
    return type(op).__name__


# ---------------------------------------------------------------------------
# tasks


class TaskState(Enum):
    RUNNABLE = "runnable"
    STALLED = "stalled"
    FINISHED = "finished"  # script exhausted without an exit syscall
    DEAD = "dead"


@dataclass
class CpuState:
    rax: int = 0
    rbx: int = 0
    rsp: int = 0
    rbp: int = 0

    def copy(self) -> CpuState:
        return replace(self)


@dataclass
class Task:
    tid: int
    pid: int
    tgid: int
    parent_pid: int
    name: str
    asid: int
    ops: list[ThreadOp]
    cpu: CpuState
    sandboxed: bool = False
    filters: Optional[FilterTable] = None
    ip: int = 0
    state: TaskState = TaskState.RUNNABLE
    stall: Optional[tuple[str, int]] = None
    micro: Optional[object] = None  # SyscallContext | EnclaveContext

    @property
    def alive(self) -> bool:
        return self.state is not TaskState.DEAD


@dataclass
class ProcessInfo:
    tgid: int
    name: str
    asid: int
    sandboxed: bool
    filters: Optional[FilterTable]


# ---------------------------------------------------------------------------
# reports


@dataclass
class SimReport:
    name: str
    variant: Optional[str]
    schedule: dict[str, Any]
    steps: int
    truncated: bool
    trace: list[list[Any]]
    events: list[dict[str, Any]]
    kills: list[dict[str, Any]]
    witnesses: list[dict[str, Any]]
    deadlocked: list[int]
    filters: dict[str, dict[str, Any]]
    cycles: Optional[dict[str, Any]] = None
    config: Optional[dict[str, Any]] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "variant": self.variant,
            "schedule": self.schedule,
            "steps": self.steps,
            "truncated": self.truncated,
            "trace": self.trace,
            "events": self.events,
            "kills": self.kills,
            "witnesses": self.witnesses,
            "deadlocked": self.deadlocked,
            "filters": self.filters,
            "cycles": self.cycles,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash_hex(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def extract_witnesses(events: Sequence[Event]) -> list[dict[str, Any]]:
    """Check/use divergences: completed syscalls whose deep-checked argument
    bytes differ from the bytes the syscall body consumed."""
    out = []
    for ev in events:
        if not isinstance(ev, SyscallEvent) or ev.checked is None or ev.used is None:
            continue
        for arg, checked in ev.checked.items():
            used = ev.used.get(arg)
            if used is not None and used != checked:
                out.append(
                    {
                        "step": ev.step,
                        "tid": ev.tid,
                        "nr": ev.nr,
                        "name": ev.name,
                        "arg": arg,
                        "checked": checked,
                        "used": used,
                    }
                )
    return out


# ---------------------------------------------------------------------------
# the simulator


class Simulation:
    def __init__(
        self,
        variant: Optional[Variant] = None,
        cores: int = 2,
        deny_mode: str = "kill",
        name: str = "sim",
        cost_table: Optional["costmodel.CostTable"] = None,
        config: Optional[dict[str, Any]] = None,
    ):
        self.name = name
        self.vmem = Vmem(cores=cores)
        self.engine = DptiEngine(self, variant, deny_mode=deny_mode)
        self.sgx = SgxRuntime(self)
        self.tasks: dict[int, Task] = {}
        self.tasks_by_name: dict[str, Task] = {}
        self.processes: dict[int, ProcessInfo] = {}
        self.enclaves: dict[str, EnclaveDomain] = {}
        self.events: list[Event] = []
        self.trace: list[list[Any]] = []
        self.kills: list[dict[str, Any]] = []
        self.step_count = 0
        self.truncated = False
        self.cost_table = cost_table
        self.config = config
        self.schedule_info: dict[str, Any] = {}
        self._next_tid = 1
        self._next_pid = 1
        self._current_tid = -1
        self._finalized = False

    @property
    def variant(self) -> Optional[Variant]:
        return self.engine.variant

    # ------------------------------------------------------------------
    # construction helpers

    def add_process(
        self,
        name: str,
        *,
        sandboxed: bool = False,
        filters: Optional[FilterTable] = None,
        parent_pid: int = 0,
    ) -> ProcessInfo:
        pid = self._next_pid
        self._next_pid += 1
        space = self.vmem.new_address_space()
        info = ProcessInfo(pid, name, space.asid, sandboxed, filters)
        self.processes[pid] = info
        return info

    def add_thread(
        self,
        proc: ProcessInfo,
        ops: Sequence[ThreadOp],
        name: Optional[str] = None,
        rsp: int = 0,
        rbp: int = 0,
    ) -> Task:
        tid = self._next_tid
        self._next_tid += 1
        existing = [t for t in self.tasks.values() if t.tgid == proc.tgid]
        if existing and proc.filters is not None:
            proc.filters.acquire()  # clone shares the installed filters
        task = Task(
            tid=tid,
            pid=proc.tgid,
            tgid=proc.tgid,
            parent_pid=0,
            name=name or f"{proc.name}.t{tid}",
            asid=proc.asid,
            ops=list(ops),
            cpu=CpuState(rsp=rsp, rbp=rbp),
            sandboxed=proc.sandboxed,
            filters=proc.filters,
        )
        if not task.ops:
            task.state = TaskState.FINISHED
        self.tasks[tid] = task
        if task.name in self.tasks_by_name:
            raise ValueError(f"duplicate thread name {task.name!r}")
        self.tasks_by_name[task.name] = task
        return task

    def map_region(self, asid: int, spec: MapSpec) -> list[int]:
        start = vpn_of(spec.vaddr)
        if spec.alias_frames is not None:
            frame_ids = list(spec.alias_frames)
        else:
            frame_ids = [self.vmem.alloc_frame().frame_id for _ in range(spec.pages)]
        for i, frame_id in enumerate(frame_ids):
            self.vmem.map(
                asid, start + i, frame_id,
                user=spec.user, writable=spec.writable,
                executable=spec.executable, shared=spec.shared,
            )
        for at, data in spec.data:
            addr, pos = at, 0
            while pos < len(data):
                frame = self.vmem.frames[frame_ids[vpn_of(addr) - start]]
                off = addr % PAGE_SIZE
                chunk = min(len(data) - pos, PAGE_SIZE - off)
                frame.data[off : off + chunk] = data[pos : pos + chunk]
                addr += chunk
                pos += chunk
        return frame_ids

    # ------------------------------------------------------------------
    # hooks used by the engine and the enclave runtime

    def emit(self, ev: Event) -> None:
        ev.step = self.step_count
        ev.seq = len(self.events)
        self.events.append(ev)

    def core_of(self, task: Task) -> int:
        return (task.tid - 1) % self.vmem.cores

    def process_of(self, task: Task) -> ProcessInfo:
        return self.processes[task.tgid]

    def stall_task(self, task: Task, kind: str, frame_id: int) -> None:
        if task.state is not TaskState.RUNNABLE:
            raise RuntimeError(f"cannot stall task {task.tid} in state {task.state.value}")
        task.state = TaskState.STALLED
        task.stall = (kind, frame_id)
        self.emit(StallEvent(tid=task.tid, kind=kind, frame_id=frame_id))

    def wake_frame_waiters(self, frames: set[int]) -> None:
        for tid in sorted(self.tasks):
            task = self.tasks[tid]
            if task.state is TaskState.STALLED and task.stall is not None and task.stall[1] in frames:
                task.state = TaskState.RUNNABLE
                self.emit(WakeEvent(tid=task.tid, frame_id=task.stall[1]))
                task.stall = None

    def kill_group(self, tgid: int, cause: KillCause, detail: str = "") -> None:
        proc = self.processes[tgid]
        victims = [t for t in self.tasks.values() if t.tgid == tgid and t.alive]
        self.emit(
            KillEvent(
                tid=self._current_tid, tgid=tgid, process=proc.name,
                cause=cause, detail=detail,
            )
        )
        self.kills.append(
            {"step": self.step_count, "process": proc.name, "cause": cause.value, "detail": detail}
        )
        self.engine.unwind_group({t.tid for t in victims})
        for task in victims:
            task.state = TaskState.DEAD
            task.micro = None
            task.stall = None
        if proc.filters is not None and victims:
            if proc.filters.release(len(victims)):
                self.emit(FiltersFreedEvent(tgid=tgid))

    # ------------------------------------------------------------------
    # lifecycle bodies (called from the dispatch engine)

    def fork_task(self, parent: Task, child_ops: Sequence[ThreadOp]) -> Task:
        child_space = self.vmem.fork_address_space(parent.asid)
        pid = self._next_pid
        self._next_pid += 1
        parent_proc = self.processes[parent.tgid]
        info = ProcessInfo(
            pid, f"{parent_proc.name}.child{pid}", child_space.asid,
            parent_proc.sandboxed, parent_proc.filters,
        )
        self.processes[pid] = info
        if info.filters is not None:
            info.filters.acquire()
        tid = self._next_tid
        self._next_tid += 1
        child = Task(
            tid=tid, pid=pid, tgid=pid, parent_pid=parent.pid,
            name=f"{info.name}.t{tid}", asid=info.asid,
            ops=list(child_ops), cpu=parent.cpu.copy(),
            sandboxed=info.sandboxed, filters=info.filters,
        )
        if not child.ops:
            child.state = TaskState.FINISHED
        self.tasks[tid] = child
        self.tasks_by_name[child.name] = child
        return child

    def exec_task(self, task: Task, image: Optional[ExecImage]) -> int:
        image = image or ExecImage()
        siblings = [
            t for t in self.tasks.values()
            if t.tgid == task.tgid and t.tid != task.tid and t.alive
        ]
        self.engine.unwind_group({s.tid for s in siblings})
        for sib in siblings:
            sib.state = TaskState.DEAD
            sib.micro = None
            sib.stall = None
        if task.filters is not None and siblings:
            task.filters.release(len(siblings))
        old_asid = task.asid
        restored_siblings = sum(
            1
            for record in self.engine.records.values()
            if record.owner_tid == task.tid
            for prior in record.mappings
            if prior.asid != old_asid
        )
        space = self.vmem.new_address_space()
        proc = self.processes[task.tgid]
        proc.asid = space.asid
        task.asid = space.asid
        for spec in image.mappings:
            self.map_region(space.asid, spec)
        self.vmem.destroy_address_space(old_asid)
        task.ops = list(image.ops)
        task.ip = -1  # advanced to 0 when the exec syscall completes
        task.cpu = CpuState()
        return restored_siblings

    def exit_task(self, task: Task, group: bool) -> tuple[int, bool]:
        targets = (
            [t for t in self.tasks.values() if t.tgid == task.tgid and t.alive]
            if group
            else [task]
        )
        self.engine.unwind_group({t.tid for t in targets})
        for t in targets:
            t.state = TaskState.DEAD
            if t.tid != task.tid:
                t.micro = None
            t.stall = None
        if task.filters is not None:
            freed = task.filters.release(len(targets))
            if freed:
                self.emit(FiltersFreedEvent(tgid=task.tgid))
            return task.filters.refcount, freed
        return 0, False

    def do_mmap(self, task: Task, spec: MapSpec) -> int:
        self.map_region(task.asid, spec)
        return spec.vaddr

    # ------------------------------------------------------------------
    # stepping

    def runnable_tids(self) -> list[int]:
        return [tid for tid in sorted(self.tasks) if self.tasks[tid].state is TaskState.RUNNABLE]

    def _advance(self, task: Task) -> None:
        task.ip += 1
        if task.ip >= len(task.ops) and task.state is TaskState.RUNNABLE:
            task.state = TaskState.FINISHED

    def step(self, tid: int) -> str:
        task = self.tasks[tid]
        if task.state is not TaskState.RUNNABLE:
            raise RuntimeError(f"stepping non-runnable task {tid}")
        self._current_tid = tid
        if task.micro is not None:
            label = "micro"
            if isinstance(task.micro, SyscallContext):
                label = f"syscall:{task.micro.name}"
                outcome = self._step_syscall(task)
            else:
                label = f"enclave:{task.micro.domain.name}"
                outcome = self._step_enclave(task)
        else:
            op = task.ops[task.ip]
            label = _op_label(op)
            outcome = self._exec_op(task, op)
        self.trace.append([self.step_count, tid, label, outcome])
        self.step_count += 1
        return outcome

    def _exec_op(self, task: Task, op: ThreadOp) -> str:
        if isinstance(op, (ReadOp, WriteOp)):
            return self._mem_op(task, op)
        if isinstance(op, ProcMemWriteOp):
            target = (
                self.tasks.get(op.target)
                if isinstance(op.target, int)
                else self.tasks_by_name.get(op.target)
            )
            outcome = self.engine.on_proc_mem_write(task, target, op.vaddr, op.data)
            if task.state is TaskState.RUNNABLE:
                self._advance(task)
            return f"proc_mem:{outcome}"
        if isinstance(op, EcallOp):
            domain = self.enclaves[op.enclave]
            self.sgx.enter(task, domain)
            return "enclave_enter"
        # Everything else enters the kernel as a syscall.
        task.micro = self._syscall_context_for(task, op)
        return self._step_syscall(task)

    def _syscall_context_for(self, task: Task, op: ThreadOp) -> SyscallContext:
        if isinstance(op, SyscallOp):
            return make_syscall_context(op.nr, list(op.args), tid=task.tid)
        if isinstance(op, ForkOp):
            return make_syscall_context(SYSCALL_NRS["fork"], [], payload=list(op.child_ops), tid=task.tid)
        if isinstance(op, ExecOp):
            return make_syscall_context(SYSCALL_NRS["execve"], [op.path_vaddr], payload=op.image, tid=task.tid)
        if isinstance(op, ExitOp):
            nr = SYSCALL_NRS["exit_group"] if op.group else SYSCALL_NRS["exit"]
            return make_syscall_context(nr, [op.code], payload=(op.code, op.group), tid=task.tid)
        if isinstance(op, MmapOp):
            return make_syscall_context(
                SYSCALL_NRS["mmap"], [op.spec.vaddr, op.spec.pages * PAGE_SIZE],
                payload=op.spec, tid=task.tid,
            )
        if isinstance(op, MprotectOp):
            return make_syscall_context(
                SYSCALL_NRS["mprotect"], [op.vaddr, op.pages * PAGE_SIZE],
                payload=op, tid=task.tid,
            )
        raise TypeError(f"op {op!r} has no syscall form")

    def _step_syscall(self, task: Task) -> str:
        ctx: SyscallContext = task.micro
        phase = ctx.phase.value
        status = self.engine.step_syscall(task)
        if status == "stalled":
            return "stalled"
        if status == "again":
            return phase
        # done
        if task.state is TaskState.RUNNABLE:
            task.micro = None
            self._advance(task)
        elif task.alive:
            task.micro = None
        return f"{phase}:done"

    def _step_enclave(self, task: Task) -> str:
        ctx: EnclaveContext = task.micro
        state = ctx.state
        status = self.sgx.step(task)
        if status == "again":
            return state
        if task.state is TaskState.RUNNABLE:
            task.micro = None
            self._advance(task)
        return f"{state}:done"

    def _mem_op(self, task: Task, op: Union[ReadOp, WriteOp]) -> str:
        for _ in range(4):  # copy-on-write resolution retries, one per page
            if isinstance(op, ReadOp):
                _, fault = self.vmem.read_bytes(
                    self.core_of(task), task.asid, AccessMode.USER, op.vaddr, op.length
                )
            else:
                fault = self.vmem.write_bytes(
                    self.core_of(task), task.asid, AccessMode.USER, op.vaddr, op.data
                )
            if fault is None:
                self._advance(task)
                return "ok"
            if task.micro is None and self._in_isolation(task):
                domain = self._domain_of(task)
                action = self.sgx.on_isolated_fault(task, domain, fault)
                if action == "retry":
                    continue
                return "killed"
            action = self.engine.on_page_fault(task, fault)
            if action[0] == "retry":
                continue
            if action[0] == "stall":
                self.stall_task(task, "frame", action[1])
                return "stalled"
            self.kill_group(task.tgid, action[1], f"fault {fault.reason.value} at {fault.vaddr:#x}")
            return "killed"
        self.kill_group(task.tgid, KillCause.SEGFAULT, "fault retry limit")
        return "killed"

    def _in_isolation(self, task: Task) -> bool:
        return any(
            d.isolated_asid is not None and d.isolated_asid == task.asid
            for d in self.enclaves.values()
        )

    def _domain_of(self, task: Task) -> EnclaveDomain:
        for d in self.enclaves.values():
            if d.isolated_asid == task.asid:
                return d
        raise KeyError("task not in any isolated mapping")

    # ------------------------------------------------------------------
    # drivers

    def run_seeded(self, seed: int = 0, max_steps: int = 1000) -> SimReport:
        rng = random.Random(seed)
        while self.step_count < max_steps:
            runnable = self.runnable_tids()
            if not runnable:
                break
            tid = runnable[0] if len(runnable) == 1 else runnable[rng.randrange(len(runnable))]
            self.step(tid)
        else:
            self.truncated = bool(self.runnable_tids())
        self.schedule_info = {"mode": "seeded", "seed": seed, "max_steps": max_steps}
        self._finalize()
        return self.build_report()

    def run_prefix(self, decisions: Sequence[int], max_steps: int) -> Optional[list[int]]:
        """Follow branch-point decisions; returns the runnable set at the
        first undecided branch point, or None when the run completed."""
        consumed = 0
        while self.step_count < max_steps:
            runnable = self.runnable_tids()
            if not runnable:
                self._finalize()
                return None
            if len(runnable) == 1:
                tid = runnable[0]
            elif consumed < len(decisions):
                tid = decisions[consumed]
                consumed += 1
            else:
                return runnable
            self.step(tid)
        self.truncated = bool(self.runnable_tids())
        self._finalize()
        return None

    def _finalize(self) -> None:
        if self._finalized:
            return
        self._finalized = True
        for tid in sorted(self.tasks):
            task = self.tasks[tid]
            if task.state is TaskState.STALLED and task.stall is not None:
                self.emit(DeadlockEvent(tid=tid, kind=task.stall[0], frame_id=task.stall[1]))

    # ------------------------------------------------------------------
    # reporting

    def deadlocked_tids(self) -> list[int]:
        return [
            tid for tid in sorted(self.tasks)
            if self.tasks[tid].state is TaskState.STALLED
        ]

    def build_report(self) -> SimReport:
        cycles = None
        if self.cost_table is not None:
            cycles = costmodel.accumulate(self.events, self.cost_table).to_dict()
        filters_state: dict[str, dict[str, Any]] = {}
        for proc in self.processes.values():
            if proc.filters is not None:
                filters_state[proc.name] = {
                    "refcount": proc.filters.refcount,
                    "freed": proc.filters.freed,
                }
        return SimReport(
            name=self.name,
            variant=self.engine.variant.value if self.engine.variant else None,
            schedule=dict(self.schedule_info),
            steps=self.step_count,
            truncated=self.truncated,
            trace=[list(entry) for entry in self.trace],
            events=[ev.to_dict() for ev in self.events],
            kills=list(self.kills),
            witnesses=extract_witnesses(self.events),
            deadlocked=self.deadlocked_tids(),
            filters=filters_state,
            cycles=cycles,
            config=self.config,
        )


# ---------------------------------------------------------------------------
# systematic exploration


@dataclass
class ExplorationReport:
    paths: int
    truncated_paths: int
    witnesses: int
    witness_paths: int
    kills: dict[str, int]  # cause -> number of paths with at least one
    deadlock_paths: int
    example_witness: Optional[dict[str, Any]]
    per_path: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "paths": self.paths,
            "truncated_paths": self.truncated_paths,
            "witnesses": self.witnesses,
            "witness_paths": self.witness_paths,
            "kills": self.kills,
            "deadlock_paths": self.deadlock_paths,
            "example_witness": self.example_witness,
            "per_path": self.per_path,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash_hex(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def explore(factory: Callable[[], Simulation], max_steps: int = 24) -> ExplorationReport:
    """Enumerate every scheduling choice at every branch point.

    A branch point is a step with more than one runnable thread; forced steps
    don't branch, so the number of explored paths equals the number of
    distinct interleavings of the scenario.
    """
    paths = 0
    truncated = 0
    witnesses = 0
    witness_paths = 0
    kills: dict[str, int] = {}
    deadlock_paths = 0
    example: Optional[dict[str, Any]] = None
    per_path: list[dict[str, Any]] = []
    stack: list[tuple[int, ...]] = [()]
    while stack:
        prefix = stack.pop()
        sim = factory()
        frontier = sim.run_prefix(prefix, max_steps)
        if frontier is not None:
            for tid in reversed(frontier):
                stack.append(prefix + (tid,))
            continue
        paths += 1
        if sim.truncated:
            truncated += 1
        path_witnesses = extract_witnesses(sim.events)
        witnesses += len(path_witnesses)
        if path_witnesses:
            witness_paths += 1
            if example is None:
                example = dict(path_witnesses[0], decisions=list(prefix))
        for cause in {k["cause"] for k in sim.kills}:
            kills[cause] = kills.get(cause, 0) + 1
        if sim.deadlocked_tids():
            deadlock_paths += 1
        per_path.append(
            {
                "decisions": list(prefix),
                "steps": sim.step_count,
                "witnesses": len(path_witnesses),
                "kills": sorted({k["cause"] for k in sim.kills}),
                "deadlocked": sim.deadlocked_tids(),
            }
        )
    return ExplorationReport(
        paths=paths,
        truncated_paths=truncated,
        witnesses=witnesses,
        witness_paths=witness_paths,
        kills=kills,
        deadlock_paths=deadlock_paths,
        example_witness=example,
        per_path=per_path,
    )
