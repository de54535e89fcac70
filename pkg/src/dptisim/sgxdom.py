"""Enclave protection domains built from an isolated address mapping.

While a thread runs enclave code its address space is switched to a reduced
mapping: under stashing only the enclave pages, one code bridge page, the
data bridge pages and the pages below the aligned stack pointer exist at
all; under freezing every host page stays readable but only bridge and stack
pages stay writable. All transitions in and out of the domain funnel through
the code bridge page, and the exit verifies the stack and base pointer
against the values saved on entry.

Enclave code is a scripted op sequence, and the bridge page is modeled as a
page with semantic regions plus an exhaustive offset-behavior table rather
than decoded instructions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from .dpti import Variant
from .events import (
    DiagnosticEvent,
    EcallEvent,
    EnclaveLazyMapEvent,
    KillCause,
    OcallEvent,
    SgxFaultEvent,
    StatEvent,
)
from .vmem import (
    AccessKind,
    AccessMode,
    AddressSpace,
    PageFault,
    PteBit,
    Vmem,
    PAGE_SIZE,
    vpn_of,
)


class SgxError(Exception):
    pass


class UnalignedDbpError(SgxError):
    pass


class OverlapWithEnclaveError(SgxError):
    pass


# Code bridge page regions, in byte offsets. The enter stub sits first, then
# the resume stub; everything after is single-byte no-ops except for the
# optional exit stub (register setup ending in the one syscall instruction).
ENTRY_STUB_END = 16
ENCLU_STUB_END = 20
EXIT_STUB_START = 20
SYSCALL_INSN_START = 36
SYSCALL_INSN_END = 38


@dataclass(frozen=True)
class CbpBehavior:
    outcome: str  # "legal" | "kill"
    exit_kind: Optional[str]  # "fault" | "syscall" | None on kill
    stat_executed: bool


@dataclass(frozen=True)
class CbpContents:
    """Offset-behavior table for exits landing anywhere on the bridge page.

    Landing at or sliding into the resume stub with no pending asynchronous
    exit faults on the bridge page itself, which is never a permitted fault
    address. Only the full exit stub reaches the driver; a jump into its
    middle or straight at the syscall instruction can at most execute the
    stat syscall (the exit leaf forces the register selecting it) and then
    slides on to the legal exit fault.
    """

    syscall_exit_stub: bool

    def behavior(self, offset: int) -> CbpBehavior:
        if not 0 <= offset < PAGE_SIZE:
            raise ValueError(f"offset {offset} outside the bridge page")
        if offset < ENCLU_STUB_END:
            return CbpBehavior("kill", None, False)
        if self.syscall_exit_stub:
            if offset == EXIT_STUB_START:
                return CbpBehavior("legal", "syscall", False)
            if offset < SYSCALL_INSN_END:
                return CbpBehavior("legal", "fault", True)
        return CbpBehavior("legal", "fault", False)


# ---------------------------------------------------------------------------
# scripted enclave ops


@dataclass(frozen=True)
class EnclaveRead:
    vaddr: int
    length: int = 1


@dataclass(frozen=True)
class EnclaveWrite:
    vaddr: int
    data: bytes


@dataclass(frozen=True)
class EnclaveSetReg:
    reg: str  # rsp | rbp | rax | rbx
    value: int


@dataclass(frozen=True)
class EnclaveEexit:
    target: Union[int, str] = "legal"  # explicit address or the sanctioned exit


@dataclass(frozen=True)
class EnclaveOcall:
    pass


@dataclass(frozen=True)
class EnclaveInterrupt:
    pass


EnclaveOp = Union[
    EnclaveRead, EnclaveWrite, EnclaveSetReg, EnclaveEexit, EnclaveOcall, EnclaveInterrupt
]


@dataclass
class EnclaveDomain:
    name: str
    variant: Optional[Variant]  # None models an unconfined enclave
    enclave_vpns: set[int]
    cbp_vpn: int
    dbp_vpns: set[int]
    host_asid: int
    isolated_asid: Optional[int]
    cbp: CbpContents
    script: list[EnclaveOp] = field(default_factory=list)
    saved: dict[int, tuple[int, int]] = field(default_factory=dict)  # tid -> (rsp, rbp)
    thread_stack_vpns: dict[int, list[int]] = field(default_factory=dict)

    @property
    def exit_fault_vaddr(self) -> int:
        """First instruction after the bridge page: the one permitted fetch fault."""
        return (self.cbp_vpn + 1) * PAGE_SIZE

    def legal_exit_kind(self) -> str:
        return "syscall" if self.cbp.syscall_exit_stub else "fault"


@dataclass
class EnclaveContext:
    """Micro-state of one thread executing inside a domain."""

    domain: EnclaveDomain
    ip: int = 0
    state: str = "running"  # running | ocall_out | exiting
    exit_kind: Optional[str] = None


def build_isolated_mapping(
    vmem: Vmem,
    host: AddressSpace,
    name: str,
    enclave_vpns: set[int],
    cbp_vpn: int,
    dbp_vaddrs: list[int],
    variant: Optional[Variant],
    syscall_exit: bool = False,
    script: Optional[list[EnclaveOp]] = None,
) -> EnclaveDomain:
    """Construct the reusable isolated mapping for one enclave.

    Data bridge pages must be page-aligned (their whole page is exposed) and
    neither they nor the code bridge may lie inside the enclave range.
    """
    dbp_vpns: set[int] = set()
    for vaddr in dbp_vaddrs:
        if vaddr % PAGE_SIZE != 0:
            raise UnalignedDbpError(f"data bridge page at {vaddr:#x} is not page-aligned")
        dbp_vpns.add(vpn_of(vaddr))
    for vpn in dbp_vpns | {cbp_vpn}:
        if vpn in enclave_vpns:
            raise OverlapWithEnclaveError(f"bridge page {vpn:#x} overlaps the enclave")
    for vpn in sorted(dbp_vpns | {cbp_vpn}):
        if vpn not in host.entries:
            raise SgxError(f"bridge page {vpn:#x} not mapped in the host")

    cbp = CbpContents(syscall_exit_stub=syscall_exit)
    if variant is None:
        return EnclaveDomain(
            name, None, set(enclave_vpns), cbp_vpn, dbp_vpns, host.asid, None, cbp,
            script=list(script or []),
        )

    # The isolated space shares the host's VMA structures; only the hardware
    # mapping differs.
    isolated = vmem.new_address_space(vmas=host.vmas)
    if variant is Variant.STASH:
        vmem.map(isolated.asid, cbp_vpn, host.entries[cbp_vpn].frame_id,
                 user=True, writable=False, executable=True)
        for vpn in sorted(dbp_vpns):
            vmem.map(isolated.asid, vpn, host.entries[vpn].frame_id,
                     user=True, writable=True, executable=False)
        # Enclave pages are mapped lazily on first touch.
    else:
        for vpn, pte in sorted(host.entries.items()):
            vmem.map(
                isolated.asid, vpn, pte.frame_id,
                user=True,
                writable=vpn in dbp_vpns,
                executable=vpn == cbp_vpn,
            )
    return EnclaveDomain(
        name, variant, set(enclave_vpns), cbp_vpn, dbp_vpns, host.asid,
        isolated.asid, cbp, script=list(script or []),
    )


def classify_eexit(domain: EnclaveDomain, target: int) -> CbpBehavior:
    """Outcome of an exit-leaf transfer to an arbitrary target address."""
    cbp_base = domain.cbp_vpn * PAGE_SIZE
    if target == domain.exit_fault_vaddr:
        return CbpBehavior("legal", "fault", False)
    if cbp_base <= target < cbp_base + PAGE_SIZE:
        return domain.cbp.behavior(target - cbp_base)
    return CbpBehavior("kill", None, False)


class SgxRuntime:
    """Domain enter/exit transitions and the isolated-thread fault policy."""

    def __init__(self, sim):
        self.sim = sim

    # ------------------------------------------------------------------
    # transitions

    def enter(self, task, domain: EnclaveDomain) -> None:
        """Switch the calling thread onto the isolated mapping.

        The stack pointer is aligned down to a page boundary; pages at and
        above it (holding return addresses) are withheld from the isolation,
        pages below stay usable for outcall argument passing.
        """
        vmem: Vmem = self.sim.vmem
        aligned = task.cpu.rsp - (task.cpu.rsp % PAGE_SIZE)
        task.cpu.rsp = aligned
        domain.saved[task.tid] = (task.cpu.rsp, task.cpu.rbp)
        if domain.variant is None:
            task.micro = EnclaveContext(domain)
            return
        host = vmem.spaces[domain.host_asid]
        permitted: list[int] = []
        if aligned > 0:
            stack_vma = host.vma_for(vpn_of(aligned) - 1)
            if stack_vma is not None:
                permitted = list(range(stack_vma.start, vpn_of(aligned)))
        domain.thread_stack_vpns[task.tid] = permitted
        self._attach_stack(domain, permitted)
        for vpn in permitted:
            frame = vmem.frames[host.entries[vpn].frame_id]
            if any(frame.data):
                self.sim.emit(
                    DiagnosticEvent(
                        tid=task.tid,
                        message=f"stale non-zero bytes on stack page {vpn:#x} below the aligned stack pointer",
                    )
                )
        task.asid = domain.isolated_asid
        task.micro = EnclaveContext(domain)

    def _attach_stack(self, domain: EnclaveDomain, vpns: list[int]) -> None:
        vmem: Vmem = self.sim.vmem
        host = vmem.spaces[domain.host_asid]
        for vpn in vpns:
            if domain.variant is Variant.STASH:
                if vpn not in vmem.spaces[domain.isolated_asid].entries:
                    vmem.map(domain.isolated_asid, vpn, host.entries[vpn].frame_id,
                             user=True, writable=True, executable=False)
            else:
                vmem.set_bit(domain.isolated_asid, vpn, PteBit.WRITABLE, True)
                vmem.tlb_flush(domain.isolated_asid, vpn)

    def _detach_stack(self, domain: EnclaveDomain, tid: int) -> None:
        vmem: Vmem = self.sim.vmem
        for vpn in domain.thread_stack_vpns.get(tid, []):
            if domain.variant is Variant.STASH:
                if vpn in vmem.spaces[domain.isolated_asid].entries:
                    vmem.unmap(domain.isolated_asid, vpn)
                    vmem.tlb_flush(domain.isolated_asid, vpn)
            else:
                vmem.set_bit(domain.isolated_asid, vpn, PteBit.WRITABLE, False)
                vmem.tlb_flush(domain.isolated_asid, vpn)

    def step(self, task) -> str:
        """Run one enclave-script op (or transition); 'again' or 'done'."""
        ctx: EnclaveContext = task.micro
        domain = ctx.domain
        if ctx.state == "ocall_out":
            # Outcall body finished; re-enter the isolation.
            if domain.variant is not None:
                self._attach_stack(domain, domain.thread_stack_vpns.get(task.tid, []))
                task.asid = domain.isolated_asid
            ctx.state = "running"
            return "again"
        if ctx.state == "exiting" or ctx.ip >= len(domain.script):
            return self._ecall_return(task, ctx)
        op = domain.script[ctx.ip]
        if isinstance(op, EnclaveRead):
            return self._mem_op(task, ctx, op.vaddr, AccessKind.READ, op.length, None)
        if isinstance(op, EnclaveWrite):
            return self._mem_op(task, ctx, op.vaddr, AccessKind.WRITE, len(op.data), op.data)
        if isinstance(op, EnclaveSetReg):
            setattr(task.cpu, op.reg, op.value)
            ctx.ip += 1
            return "again"
        if isinstance(op, EnclaveInterrupt):
            # Asynchronous exit: state is parked, the handler runs, and the
            # resume stub on the bridge page re-enters the enclave.
            self.sim.emit(
                DiagnosticEvent(tid=task.tid, message="async exit resumed via bridge-page resume stub")
            )
            ctx.ip += 1
            return "again"
        if isinstance(op, EnclaveOcall):
            return self._ocall(task, ctx)
        if isinstance(op, EnclaveEexit):
            return self._eexit(task, ctx, op.target)
        raise SgxError(f"unknown enclave op {op!r}")

    def _mem_op(self, task, ctx: EnclaveContext, vaddr: int, kind: AccessKind,
                length: int, data: Optional[bytes]) -> str:
        vmem: Vmem = self.sim.vmem
        domain = ctx.domain
        for _ in range(4):  # retries after lazy maps, one per spanned page
            if kind is AccessKind.READ:
                _, fault = vmem.read_bytes(self.sim.core_of(task), task.asid,
                                           AccessMode.USER, vaddr, length)
            else:
                fault = vmem.write_bytes(self.sim.core_of(task), task.asid,
                                         AccessMode.USER, vaddr, data)
            if fault is None:
                ctx.ip += 1
                return "again"
            action = self.on_isolated_fault(task, domain, fault)
            if action == "retry":
                continue
            return "done"
        self.sim.kill_group(task.tgid, KillCause.ISOLATION_VIOLATION, "fault retry limit")
        return "done"

    def on_isolated_fault(self, task, domain: EnclaveDomain, fault: PageFault) -> str:
        """Faults from isolated threads: enclave pages map lazily; anything
        else means the enclave reached for data it was not given."""
        vmem: Vmem = self.sim.vmem
        if fault.vpn in domain.enclave_vpns:
            isolated = vmem.spaces[domain.isolated_asid]
            host = vmem.spaces[domain.host_asid]
            if fault.vpn in isolated.entries:
                pte = isolated.entries[fault.vpn]
                pte.user = True
                pte.writable = True
                pte.executable = True
                vmem.rmap[pte.frame_id][(domain.isolated_asid, fault.vpn)] = pte.perms()
            else:
                vmem.map(domain.isolated_asid, fault.vpn, host.entries[fault.vpn].frame_id,
                         user=True, writable=True, executable=True)
            vmem.tlb_flush(domain.isolated_asid, fault.vpn)
            self.sim.emit(EnclaveLazyMapEvent(tid=task.tid, vpn=fault.vpn))
            return "retry"
        self.sim.emit(SgxFaultEvent(tid=task.tid, vaddr=fault.vaddr, classification="kill"))
        self.sim.kill_group(
            task.tgid, KillCause.ISOLATION_VIOLATION,
            f"enclave touched non-bridge address {fault.vaddr:#x} ({fault.reason.value})",
        )
        return "kill"

    def _ocall(self, task, ctx: EnclaveContext) -> str:
        domain = ctx.domain
        saved_rsp, _ = domain.saved[task.tid]
        if task.cpu.rsp > saved_rsp:
            self.sim.kill_group(
                task.tgid, KillCause.STACK_TAMPER,
                f"outcall with stack pointer {task.cpu.rsp:#x} above saved {saved_rsp:#x}",
            )
            return "done"
        if domain.variant is not None:
            # The thread's own stack leaves the isolated mapping for the
            # duration, so sibling enclave threads cannot alter it.
            self._detach_stack(domain, task.tid)
            task.asid = domain.host_asid
        self.sim.emit(
            OcallEvent(
                tid=task.tid, enclave=domain.name,
                protected=domain.variant is not None,
                exit_kind=domain.legal_exit_kind() if domain.variant is not None else None,
            )
        )
        ctx.state = "ocall_out"
        ctx.ip += 1
        return "again"

    def _eexit(self, task, ctx: EnclaveContext, target: Union[int, str]) -> str:
        domain = ctx.domain
        task.cpu.rax = 4
        if target == "legal":
            if domain.variant is None:
                ctx.exit_kind = None
                ctx.state = "exiting"
                ctx.ip += 1
                return "again"
            if domain.cbp.syscall_exit_stub:
                target = domain.cbp_vpn * PAGE_SIZE + EXIT_STUB_START
            else:
                target = domain.exit_fault_vaddr
        task.cpu.rbx = int(target)
        if domain.variant is None:
            ctx.exit_kind = None
            ctx.state = "exiting"
            ctx.ip += 1
            return "again"
        behavior = classify_eexit(domain, int(target))
        if behavior.stat_executed:
            self.sim.emit(StatEvent(tid=task.tid, origin="cbp_stub"))
        if behavior.outcome == "kill":
            self.sim.emit(
                SgxFaultEvent(tid=task.tid, vaddr=int(target), classification="kill")
            )
            self.sim.kill_group(
                task.tgid, KillCause.ISOLATION_VIOLATION,
                f"exit-leaf transfer to disallowed target {int(target):#x}",
            )
            return "done"
        self.sim.emit(
            SgxFaultEvent(
                tid=task.tid,
                vaddr=domain.exit_fault_vaddr if behavior.exit_kind == "fault" else int(target),
                classification="legal_exit",
            )
        )
        ctx.exit_kind = behavior.exit_kind
        ctx.state = "exiting"
        ctx.ip += 1
        return "again"

    def _ecall_return(self, task, ctx: EnclaveContext) -> str:
        domain = ctx.domain
        saved_rsp, saved_rbp = domain.saved[task.tid]
        protected = domain.variant is not None
        if protected and (task.cpu.rsp != saved_rsp or task.cpu.rbp != saved_rbp):
            self.sim.kill_group(
                task.tgid, KillCause.STACK_TAMPER,
                f"return with rsp={task.cpu.rsp:#x} rbp={task.cpu.rbp:#x}, "
                f"saved rsp={saved_rsp:#x} rbp={saved_rbp:#x}",
            )
            return "done"
        task.cpu.rsp, task.cpu.rbp = saved_rsp, saved_rbp
        if protected:
            self._detach_stack(domain, task.tid)
            task.asid = domain.host_asid
        exit_kind = ctx.exit_kind or (domain.legal_exit_kind() if protected else None)
        self.sim.emit(
            EcallEvent(
                tid=task.tid, enclave=domain.name, protected=protected,
                exit_kind=exit_kind, outcome="returned",
            )
        )
        domain.saved.pop(task.tid, None)
        domain.thread_stack_vpns.pop(task.tid, None)
        task.micro = None
        return "done"
