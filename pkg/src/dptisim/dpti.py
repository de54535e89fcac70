"""Syscall dispatch with page-table protection windows.

Dispatch distinguishes three cases: unregistered syscalls kill the caller,
registered ones without argument filters run directly, and string-filtered
arguments get their backing pages protected for the duration of the syscall.
Two variants exist: stashing clears the user bit (page fully inaccessible
from user mode), freezing clears the writable bit plus the VMA write flag
(page read-only). Either way the bytes the filter checked are the bytes the
syscall body consumes.

Syscalls advance through explicit phases (lookup, deep check, body, restore)
so a scheduler can preempt between the check and the use; that window is
where the unprotected baseline races.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .events import (
    CowEvent,
    ExecEvent,
    ExitEvent,
    ForkEvent,
    KillCause,
    MprotectEvent,
    OpenEvent,
    ProcMemWriteEvent,
    ProtectEvent,
    RestoreEvent,
    StatEvent,
    StringCheckEvent,
    SyscallEvent,
    WriteSyscallEvent,
)
from .filters import SYSCALL_NAMES, Disposition, FilterRule, StringFilter
from .vmem import (
    AccessMode,
    FaultReason,
    PageFault,
    PteBit,
    Vmem,
    vpn_of,
)

# Longest page span a NUL-terminated string argument may cover.
MAX_SPAN = 2


class Variant(Enum):
    STASH = "stash"
    FREEZE = "freeze"


class SyscallPhase(Enum):
    LOOKUP = "lookup"
    DEEP_CHECK = "deep_check"
    BODY = "body"
    RESTORE = "restore"


@dataclass(slots=True)
class MappingPrior:
    """Pre-protection permission bits of one mapping, enough for exact restore."""

    asid: int
    vpn: int
    frame_id: int
    user: bool
    writable: bool
    executable: bool
    vm_write: bool


@dataclass
class ProtectionRecord:
    record_id: int
    owner_tid: int
    owner_tgid: int
    variant: Variant
    frames: list[int] = field(default_factory=list)
    mappings: list[MappingPrior] = field(default_factory=list)
    pages: int = 0
    active: bool = True


@dataclass
class SyscallContext:
    """One in-flight syscall; phases are the schedulable preemption points."""

    tid: int
    nr: int
    name: str
    args: list[int]
    body: str
    payload: Any = None  # op-specific (fork child ops, exec image, mmap spec...)
    phase: SyscallPhase = SyscallPhase.LOOKUP
    points_visited: list[str] = field(default_factory=list)
    rule: Optional[FilterRule] = None
    disposition: str = "unsandboxed"
    records: list[ProtectionRecord] = field(default_factory=list)
    checked: dict[int, bytes] = field(default_factory=dict)
    used: dict[int, bytes] = field(default_factory=dict)
    result: Optional[int] = None


def make_syscall_context(nr: int, args: list[int], payload: Any = None, tid: int = -1,
                         body: Optional[str] = None) -> SyscallContext:
    name = SYSCALL_NAMES.get(nr, f"sys_{nr}")
    if body is None:
        body = name if name in DptiEngine.BODIES else "generic"
    padded = (list(args) + [0] * 6)[:6]
    return SyscallContext(tid=tid, nr=nr, name=name, args=padded, body=body, payload=payload)


class DptiEngine:
    """Kernel-side policy: filter dispatch, protection records, fault handling.

    The engine mutates simulation state through the host object (`sim`),
    which provides tasks, memory, the event log, and kill/stall/wake hooks.
    """

    def __init__(self, sim, variant: Optional[Variant], deny_mode: str = "kill"):
        self.sim = sim
        self.variant = variant
        self.deny_mode = deny_mode
        self.records: dict[int, ProtectionRecord] = {}
        self.by_frame: dict[int, set[int]] = {}
        self._next_record = 1

    # ------------------------------------------------------------------
    # dispatch state machine

    def step_syscall(self, task) -> str:
        """Advance one phase; returns 'again', 'stalled', or 'done'."""
        ctx: SyscallContext = task.micro
        if ctx.phase is SyscallPhase.LOOKUP:
            return self._lookup_step(task, ctx)
        if ctx.phase is SyscallPhase.DEEP_CHECK:
            return self._deep_check_step(task, ctx)
        if ctx.phase is SyscallPhase.BODY:
            return self._body_step(task, ctx)
        return self._restore_step(task, ctx)

    def _lookup_step(self, task, ctx: SyscallContext) -> str:
        ctx.points_visited.append("pre_check")
        if not task.sandboxed or ctx.body in ("exit", "exit_group"):
            # exit/exit_group are the filter cleanup path and always proceed
            ctx.disposition = "unsandboxed" if not task.sandboxed else "allow"
            ctx.phase = SyscallPhase.BODY
            return self._body_step(task, ctx)
        rule = task.filters.lookup(ctx.nr)
        ctx.rule = rule
        if rule.disposition is Disposition.DENY:
            ctx.disposition = "deny"
            if self.deny_mode == "errno":
                ctx.result = -1
                self._finish(task, ctx, outcome="denied")
                return "done"
            self.kill(task, KillCause.UNREGISTERED_SYSCALL, f"{ctx.name} not registered")
            return "done"
        if rule.disposition is Disposition.ALLOW:
            ctx.disposition = "allow"
            ctx.phase = SyscallPhase.BODY
            return "again"
        ctx.disposition = "allow_if"
        # Primitive argument values already live in registers; check in place.
        for prim in rule.primitives:
            if not prim.op.evaluate(ctx.args[prim.arg_index], prim.value):
                self.kill(
                    task,
                    KillCause.FILTER_VIOLATION,
                    f"{ctx.name} arg{prim.arg_index} fails {prim.op.value} {prim.value}",
                )
                return "done"
        if rule.strings:
            ctx.phase = SyscallPhase.DEEP_CHECK
        else:
            ctx.phase = SyscallPhase.BODY
        return "again"

    def _deep_check_step(self, task, ctx: SyscallContext) -> str:
        for sf in ctx.rule.strings:
            record = self.protect_argument(task, ctx, sf.arg_index)
            if record is False:
                return "done"  # killed while protecting
            if record is not None:
                ctx.records.append(record)
            if not self.check_string(task, ctx, sf):
                self.kill(
                    task,
                    KillCause.FILTER_VIOLATION,
                    f"{ctx.name} arg{sf.arg_index} string not allowed",
                )
                return "done"
        ctx.points_visited.append("post_check")
        ctx.phase = SyscallPhase.BODY
        return "again"

    def _body_step(self, task, ctx: SyscallContext) -> str:
        body = self.BODIES.get(ctx.body, DptiEngine._body_generic)
        status = body(self, task, ctx)
        if status == "stalled":
            return "stalled"
        if status == "killed":
            return "done"
        if ctx.records:
            ctx.points_visited.append("pre_restore")
            ctx.phase = SyscallPhase.RESTORE
            return "again"
        self._finish(task, ctx)
        return "done"

    def _restore_step(self, task, ctx: SyscallContext) -> str:
        for record in list(ctx.records):
            if record.active and not self.restore(task, record):
                return "done"  # killed: concurrent use of a protected frame
        self._finish(task, ctx)
        return "done"

    def _finish(self, task, ctx: SyscallContext, outcome: str = "executed") -> None:
        self.sim.emit(
            SyscallEvent(
                tid=task.tid,
                nr=ctx.nr,
                name=ctx.name,
                sandboxed=task.sandboxed,
                disposition=ctx.disposition,
                outcome=outcome,
                result=ctx.result,
                checked={k: v.decode("latin-1") for k, v in ctx.checked.items()} or None,
                used={k: v.decode("latin-1") for k, v in ctx.used.items()} or None,
            )
        )

    # ------------------------------------------------------------------
    # protection windows

    def protect_argument(self, task, ctx: SyscallContext, arg_index: int):
        """Protect every page the string argument spans, aliases included.

        Pages are protected one by one while scanning for the terminator, so
        a byte is only trusted once its page can no longer change. Returns
        the record, None when protection is disabled, or False if the caller
        was killed (bad pointer, executable page under stashing).
        """
        vmem: Vmem = self.sim.vmem
        vaddr = ctx.args[arg_index]
        if self.variant is None:
            s, fault, _ = vmem.read_cstring(
                self.sim.core_of(task), task.asid, AccessMode.KERNEL, vaddr, MAX_SPAN
            )
            if s is None:
                self.kill(task, KillCause.BAD_POINTER, f"{ctx.name} arg{arg_index} unreadable")
                return False
            return None
        record = ProtectionRecord(
            self._next_record, task.tid, task.tgid, self.variant
        )
        self._next_record += 1
        addr = vaddr
        terminated = False
        for _ in range(MAX_SPAN):
            vpn = vpn_of(addr)
            if not self._protect_page(task, record, vpn):
                return False
            space = vmem.spaces[task.asid]
            frame = vmem.frames[space.entries[vpn].frame_id]
            chunk = frame.data[addr - vpn * 4096 :]
            if 0 in chunk:
                terminated = True
                break
            addr = (vpn + 1) * 4096
        if not terminated:
            self._unwind_record(record)
            self.kill(
                task,
                KillCause.BAD_POINTER,
                f"{ctx.name} arg{arg_index} unterminated within {MAX_SPAN} pages",
            )
            return False
        self.records[record.record_id] = record
        for frame_id in record.frames:
            self.by_frame.setdefault(frame_id, set()).add(record.record_id)
        self.sim.emit(
            ProtectEvent(
                tid=task.tid,
                variant=record.variant.value,
                frames=list(record.frames),
                mappings=len(record.mappings),
                pages=record.pages,
            )
        )
        return record

    def _protect_page(self, task, record: ProtectionRecord, vpn: int) -> bool:
        vmem: Vmem = self.sim.vmem
        space = vmem.spaces[task.asid]
        pte = space.entries.get(vpn)
        if pte is None or not pte.present:
            self._unwind_record(record)
            self.kill(task, KillCause.BAD_POINTER, f"argument page {vpn:#x} unmapped")
            return False
        if pte.cow:
            # Resolve sharing first so the protection stays private to this
            # process and survives an exec by the sharing sibling.
            old = pte.frame_id
            new = vmem.cow_resolve(task.asid, vpn)
            self.sim.emit(CowEvent(tid=task.tid, asid=task.asid, vpn=vpn, old_frame=old, new_frame=new))
            pte = space.entries[vpn]
        if record.variant is Variant.STASH and pte.executable:
            self._unwind_record(record)
            self.kill(task, KillCause.EXECUTABLE_PAGE, f"stash refused executable page {vpn:#x}")
            return False
        frame_id = pte.frame_id
        for asid, a_vpn, _perms in vmem.aliases_of(frame_id):
            a_space = vmem.spaces[asid]
            a_pte = a_space.entries[a_vpn]
            vma = a_space.vma_for(a_vpn)
            record.mappings.append(
                MappingPrior(
                    asid,
                    a_vpn,
                    frame_id,
                    a_pte.user,
                    a_pte.writable,
                    a_pte.executable,
                    vma.vm_write if vma is not None else a_pte.writable,
                )
            )
            if record.variant is Variant.STASH:
                vmem.set_bit(asid, a_vpn, PteBit.USER, False)
                vmem.set_bit(asid, a_vpn, PteBit.EXECUTABLE, False)
            else:
                vmem.set_bit(asid, a_vpn, PteBit.WRITABLE, False)
                if vma is not None:
                    vma.vm_write = False
            vmem.tlb_flush(asid, a_vpn)
        record.frames.append(frame_id)
        record.pages += 1
        return True

    def cover_new_mapping(self, asid: int, vpn: int) -> None:
        """A fresh mapping of a frame appeared while that frame is inside a
        protection window (an alias mapped mid-syscall): fold it into the
        covering record so the window stays complete and restore returns the
        mapping to the permissions it was created with."""
        vmem: Vmem = self.sim.vmem
        pte = vmem.spaces[asid].entries[vpn]
        ids = self.by_frame.get(pte.frame_id)
        if not ids:
            return
        record = self.records[max(ids)]
        vma = vmem.spaces[asid].vma_for(vpn)
        record.mappings.append(
            MappingPrior(
                asid, vpn, pte.frame_id,
                pte.user, pte.writable, pte.executable,
                vma.vm_write if vma is not None else pte.writable,
            )
        )
        if record.variant is Variant.STASH:
            vmem.set_bit(asid, vpn, PteBit.USER, False)
            vmem.set_bit(asid, vpn, PteBit.EXECUTABLE, False)
        else:
            vmem.set_bit(asid, vpn, PteBit.WRITABLE, False)
            if vma is not None:
                vma.vm_write = False
        vmem.tlb_flush(asid, vpn)

    def check_string(self, task, ctx: SyscallContext, sf: StringFilter) -> bool:
        """The check fetch: read the (now unmodifiable) argument and compare
        it against each allowed value in order."""
        vmem: Vmem = self.sim.vmem
        s, fault, _ = vmem.read_cstring(
            self.sim.core_of(task), task.asid, AccessMode.KERNEL,
            ctx.args[sf.arg_index], MAX_SPAN,
        )
        if s is None:
            self.kill(task, KillCause.BAD_POINTER, "argument vanished during check")
            return False
        ctx.checked[sf.arg_index] = s
        comparisons = 0
        matched = False
        for candidate in sf.allowed:
            comparisons += 1
            if candidate == s:
                matched = True
                break
        self.sim.emit(
            StringCheckEvent(
                tid=task.tid,
                nr=ctx.nr,
                arg_index=sf.arg_index,
                arg_len=len(s),
                comparisons=comparisons,
                matched=matched,
            )
        )
        return matched

    def restore(self, task, record: ProtectionRecord) -> bool:
        """Put every recorded mapping back exactly as found; wake stalled
        writers. If the frame is still inside another live protection window
        the application is killed instead."""
        for frame_id in record.frames:
            others = self.by_frame.get(frame_id, set()) - {record.record_id}
            if others:
                self.kill(
                    task,
                    KillCause.CONCURRENT_USE,
                    f"frame {frame_id} still protected by another syscall",
                )
                return False
        restored = self._apply_restore(record)
        self.sim.emit(
            RestoreEvent(tid=record.owner_tid, frames=list(record.frames), mappings=restored)
        )
        self.sim.wake_frame_waiters(set(record.frames))
        return True

    def _apply_restore(self, record: ProtectionRecord) -> int:
        vmem: Vmem = self.sim.vmem
        restored = 0
        for prior in reversed(record.mappings):
            space = vmem.spaces.get(prior.asid)
            if space is None:
                continue  # address space replaced (exec) or torn down
            pte = space.entries.get(prior.vpn)
            if pte is None or pte.frame_id != prior.frame_id:
                continue
            vmem.set_bit(prior.asid, prior.vpn, PteBit.USER, prior.user)
            vmem.set_bit(prior.asid, prior.vpn, PteBit.WRITABLE, prior.writable)
            vmem.set_bit(prior.asid, prior.vpn, PteBit.EXECUTABLE, prior.executable)
            vma = space.vma_for(prior.vpn)
            if vma is not None:
                vma.vm_write = prior.vm_write
            vmem.tlb_flush(prior.asid, prior.vpn)
            restored += 1
        self._forget_record(record)
        return restored

    def _unwind_record(self, record: ProtectionRecord) -> None:
        if record.active:
            self._apply_restore(record)
            self.sim.wake_frame_waiters(set(record.frames))

    def _forget_record(self, record: ProtectionRecord) -> None:
        record.active = False
        self.records.pop(record.record_id, None)
        for frame_id in record.frames:
            ids = self.by_frame.get(frame_id)
            if ids is not None:
                ids.discard(record.record_id)
                if not ids:
                    del self.by_frame[frame_id]

    def unwind_group(self, tids: set[int]) -> None:
        """Kill path: release every protection owned by these tasks, newest
        first, without the concurrent-use check."""
        owned = [r for r in self.records.values() if r.owner_tid in tids]
        for record in sorted(owned, key=lambda r: r.record_id, reverse=True):
            self._unwind_record(record)

    def frame_protected(self, frame_id: int) -> bool:
        return bool(self.by_frame.get(frame_id))

    # ------------------------------------------------------------------
    # fault and interface policy

    def on_page_fault(self, task, fault: PageFault):
        """Classify a user-mode fault: ('retry',), ('stall', frame), or
        ('kill', cause)."""
        if fault.reason is FaultReason.COW_PENDING:
            old = fault.frame_id
            new = self.sim.vmem.cow_resolve(fault.asid, fault.vpn)
            self.sim.emit(
                CowEvent(tid=task.tid, asid=fault.asid, vpn=fault.vpn, old_frame=old, new_frame=new)
            )
            return ("retry",)
        if (
            self.variant is Variant.STASH
            and fault.reason is FaultReason.USER_BIT
            and fault.frame_id is not None
            and self.frame_protected(fault.frame_id)
        ):
            return ("stall", fault.frame_id)
        if (
            self.variant is Variant.FREEZE
            and fault.reason is FaultReason.WRITE_PROT
            and fault.frame_id is not None
            and self.frame_protected(fault.frame_id)
        ):
            return ("stall", fault.frame_id)
        return ("kill", KillCause.SEGFAULT)

    def mprotect_decision(self, task, vpns: list[int], writable: bool, user: bool) -> Optional[int]:
        """Return the protected frame id the request must wait on, or None."""
        if self.variant is None:
            return None
        vmem: Vmem = self.sim.vmem
        for vpn in vpns:
            pte = vmem.spaces[task.asid].entries.get(vpn)
            if pte is None:
                continue
            if not self.frame_protected(pte.frame_id):
                continue
            if self.variant is Variant.FREEZE and writable:
                return pte.frame_id
            if self.variant is Variant.STASH and user:
                return pte.frame_id
        return None

    def on_proc_mem_write(self, writer, target, vaddr: int, data: bytes) -> str:
        """Direct-memory interface: writes ignore page permissions, so the
        whole interface is shut for sandboxed tasks while filtering is
        active."""
        if writer.sandboxed and self.variant is not None:
            outcome = "denied"
        elif target is None or not target.alive:
            outcome = "denied"
        else:
            vmem: Vmem = self.sim.vmem
            space = vmem.spaces.get(target.asid)
            vpn = vpn_of(vaddr)
            pte = space.entries.get(vpn) if space is not None else None
            if pte is None or not pte.present:
                outcome = "denied"
            else:
                if pte.cow:
                    old = pte.frame_id
                    new = vmem.cow_resolve(target.asid, vpn)
                    self.sim.emit(
                        CowEvent(tid=writer.tid, asid=target.asid, vpn=vpn, old_frame=old, new_frame=new)
                    )
                    pte = space.entries[vpn]
                frame = vmem.frames[pte.frame_id]
                off = vaddr % 4096
                frame.data[off : off + len(data)] = data
                outcome = "executed"
        self.sim.emit(
            ProcMemWriteEvent(
                tid=writer.tid,
                target_tid=target.tid if target is not None else -1,
                vaddr=vaddr,
                outcome=outcome,
            )
        )
        return outcome

    def kill(self, task, cause: KillCause, detail: str = "") -> None:
        self.sim.kill_group(task.tgid, cause, detail)

    # ------------------------------------------------------------------
    # syscall bodies (simulated effects; these perform the "use" fetches)

    def _use_fetch(self, task, ctx: SyscallContext, arg_index: int) -> Optional[bytes]:
        s, _fault, _ = self.sim.vmem.read_cstring(
            self.sim.core_of(task), task.asid, AccessMode.KERNEL,
            ctx.args[arg_index], MAX_SPAN,
        )
        if s is None:
            self.kill(task, KillCause.BAD_POINTER, f"{ctx.name} arg{arg_index} unreadable")
            return None
        ctx.used[arg_index] = s
        return s

    def _body_openat(self, task, ctx: SyscallContext) -> str:
        path = self._use_fetch(task, ctx, 1)
        if path is None:
            return "killed"
        ctx.result = 3
        self.sim.emit(OpenEvent(tid=task.tid, path=path.decode("latin-1"), fd=3))
        return "ok"

    def _body_write(self, task, ctx: SyscallContext) -> str:
        buf = self._use_fetch(task, ctx, 1)
        if buf is None:
            return "killed"
        ctx.result = ctx.args[2]
        self.sim.emit(WriteSyscallEvent(tid=task.tid, data=buf.decode("latin-1")))
        return "ok"

    def _body_stat(self, task, ctx: SyscallContext) -> str:
        if self._use_fetch(task, ctx, 0) is None:
            return "killed"
        ctx.result = 0
        self.sim.emit(StatEvent(tid=task.tid, origin="syscall"))
        return "ok"

    def _body_execve(self, task, ctx: SyscallContext) -> str:
        path = self._use_fetch(task, ctx, 0)
        if path is None:
            return "killed"
        restored = self.sim.exec_task(task, ctx.payload)
        ctx.result = 0
        self.sim.emit(
            ExecEvent(tid=task.tid, path=path.decode("latin-1"), restored_sibling_mappings=restored)
        )
        return "ok"

    def _body_fork(self, task, ctx: SyscallContext) -> str:
        child = self.sim.fork_task(task, ctx.payload or [])
        ctx.result = child.pid
        refcount = task.filters.refcount if task.filters is not None else 0
        self.sim.emit(
            ForkEvent(tid=task.tid, child_pid=child.pid, child_tid=child.tid, refcount=refcount)
        )
        return "ok"

    def _body_exit(self, task, ctx: SyscallContext) -> str:
        code, group = ctx.payload if ctx.payload is not None else (0, True)
        refcount, freed = self.sim.exit_task(task, group)
        ctx.result = None
        self.sim.emit(
            ExitEvent(tid=task.tid, code=code, group=group, refcount=refcount, freed=freed)
        )
        return "ok"

    def _body_getppid(self, task, ctx: SyscallContext) -> str:
        ctx.result = task.parent_pid
        return "ok"

    def _body_mmap(self, task, ctx: SyscallContext) -> str:
        spec = ctx.payload
        ctx.result = self.sim.do_mmap(task, spec)
        if self.variant is not None:
            start = vpn_of(spec.vaddr)
            count = len(spec.alias_frames) if spec.alias_frames else spec.pages
            for vpn in range(start, start + count):
                self.cover_new_mapping(task.asid, vpn)
        return "ok"

    def _body_mprotect(self, task, ctx: SyscallContext) -> str:
        spec = ctx.payload
        vpns = spec.vpns
        blocking_frame = self.mprotect_decision(task, vpns, spec.writable, spec.user)
        if blocking_frame is not None:
            self.sim.stall_task(task, "mprotect", blocking_frame)
            self.sim.emit(MprotectEvent(tid=task.tid, vpns=vpns, outcome="stalled"))
            return "stalled"
        vmem: Vmem = self.sim.vmem
        for vpn in vpns:
            space = vmem.spaces[task.asid]
            if vpn not in space.entries:
                continue
            vmem.set_bit(task.asid, vpn, PteBit.USER, spec.user)
            vmem.set_bit(task.asid, vpn, PteBit.WRITABLE, spec.writable)
            vmem.set_bit(task.asid, vpn, PteBit.EXECUTABLE, spec.executable)
            vma = space.vma_for(vpn)
            if vma is not None:
                vma.vm_write = spec.writable
                vma.vm_exec = spec.executable
            vmem.tlb_flush(task.asid, vpn)
        ctx.result = 0
        self.sim.emit(MprotectEvent(tid=task.tid, vpns=vpns, outcome="applied"))
        return "ok"

    def _body_read(self, task, ctx: SyscallContext) -> str:
        ctx.result = 0
        return "ok"

    def _body_generic(self, task, ctx: SyscallContext) -> str:
        # A generic body still consumes any string-filtered arguments.
        if ctx.rule is not None:
            for sf in ctx.rule.strings:
                if self._use_fetch(task, ctx, sf.arg_index) is None:
                    return "killed"
        ctx.result = 0
        return "ok"

    BODIES = {
        "openat": _body_openat,
        "write": _body_write,
        "stat": _body_stat,
        "execve": _body_execve,
        "fork": _body_fork,
        "exit": _body_exit,
        "exit_group": _body_exit,
        "getppid": _body_getppid,
        "mmap": _body_mmap,
        "mprotect": _body_mprotect,
        "read": _body_read,
        "generic": _body_generic,
    }
