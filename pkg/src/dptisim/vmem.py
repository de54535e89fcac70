"""Simulated physical memory, per-process page tables, per-core TLBs, and a
frame-to-mappings reverse map.

The model keeps exactly the machinery that page-permission protection windows
are built on: permission bits per page-table entry, TLB snapshots that go
stale unless explicitly flushed, copy-on-write sharing across fork, and alias
mappings of one physical frame in one or several address spaces.

Page tables are flat vpn->entry dicts (no radix walk) and TLBs have unbounded
capacity with explicit-flush-only invalidation, so stale-entry hazards are
deterministic and testable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Optional

PAGE_SIZE = 4096


def vpn_of(vaddr: int) -> int:
    return vaddr // PAGE_SIZE


def page_offset(vaddr: int) -> int:
    return vaddr % PAGE_SIZE


class VmemError(Exception):
    """API misuse. Simulated faults are values (PageFault), never exceptions."""


class DoubleMapError(VmemError):
    pass


class UnmappedError(VmemError):
    pass


class NotCowError(VmemError):
    pass


class AccessMode(Enum):
    USER = "user"
    KERNEL = "kernel"


class AccessKind(Enum):
    READ = "read"
    WRITE = "write"
    EXEC = "exec"


class FaultReason(Enum):
    NOT_PRESENT = "not_present"
    USER_BIT = "user_bit_violation"
    WRITE_PROT = "write_violation"
    EXEC_PROT = "exec_violation"
    COW_PENDING = "cow_pending"


class PteBit(Enum):
    USER = "user"
    WRITABLE = "writable"
    EXECUTABLE = "executable"


@dataclass(slots=True)
class PageTableEntry:
    frame_id: int
    present: bool = True
    user: bool = True
    writable: bool = True
    executable: bool = False
    cow: bool = False  # cow implies writable=False

    def snapshot(self) -> PageTableEntry:
        return replace(self)

    def perms(self) -> tuple[bool, bool, bool]:
        return (self.user, self.writable, self.executable)


@dataclass(slots=True)
class Frame:
    frame_id: int
    data: bytearray


@dataclass(slots=True)
class Vma:
    """Virtual memory area; start/end are vpns, both inclusive."""

    start: int
    end: int
    vm_write: bool
    vm_exec: bool
    shared: bool = False

    def covers(self, vpn: int) -> bool:
        return self.start <= vpn <= self.end


@dataclass(slots=True)
class PageFault:
    reason: FaultReason
    asid: int
    vaddr: int
    vpn: int
    kind: AccessKind
    mode: AccessMode
    frame_id: Optional[int] = None


@dataclass(slots=True)
class AccessResult:
    fault: Optional[PageFault]
    frame: Optional[Frame]
    offset: int = 0

    @property
    def ok(self) -> bool:
        return self.fault is None


class AddressSpace:
    """One process's mapping table. The asid is the CR3-switch unit."""

    def __init__(self, asid: int, vmas: Optional[list[Vma]] = None):
        self.asid = asid
        self.entries: dict[int, PageTableEntry] = {}
        # May be shared with another AddressSpace (retained VMA structures
        # while the hardware mapping is switched).
        self.vmas: list[Vma] = vmas if vmas is not None else []

    def vma_for(self, vpn: int) -> Optional[Vma]:
        for vma in self.vmas:
            if vma.covers(vpn):
                return vma
        return None


class Tlb:
    """Per-core translation cache of PTE snapshots.

    An entry is filled only by a successful access and only replaced by an
    explicit flush, so a cached translation always equals the PTE snapshot
    at last fill, never a mixture.
    """

    def __init__(self, core_id: int):
        self.core_id = core_id
        self.cached: dict[tuple[int, int], PageTableEntry] = {}

    def lookup(self, asid: int, vpn: int) -> Optional[PageTableEntry]:
        return self.cached.get((asid, vpn))

    def fill(self, asid: int, vpn: int, pte: PageTableEntry) -> None:
        self.cached[(asid, vpn)] = pte.snapshot()

    def flush(self, asid: int, vpn: int) -> None:
        self.cached.pop((asid, vpn), None)

    def flush_asid(self, asid: int) -> None:
        for key in [k for k in self.cached if k[0] == asid]:
            del self.cached[key]


class Vmem:
    def __init__(self, cores: int = 2):
        self.frames: dict[int, Frame] = {}
        self.spaces: dict[int, AddressSpace] = {}
        self.tlbs: list[Tlb] = [Tlb(c) for c in range(cores)]
        # frame_id -> {(asid, vpn): (user, writable, executable)}
        self.rmap: dict[int, dict[tuple[int, int], tuple[bool, bool, bool]]] = {}
        self._next_asid = 1
        self._next_frame = 1

    @property
    def cores(self) -> int:
        return len(self.tlbs)

    def all_cores(self) -> set[int]:
        return set(range(len(self.tlbs)))

    # ------------------------------------------------------------------
    # allocation

    def new_address_space(self, vmas: Optional[list[Vma]] = None) -> AddressSpace:
        space = AddressSpace(self._next_asid, vmas)
        self._next_asid += 1
        self.spaces[space.asid] = space
        return space

    def alloc_frame(self, fill: bytes = b"") -> Frame:
        data = bytearray(PAGE_SIZE)
        data[: len(fill)] = fill[:PAGE_SIZE]
        frame = Frame(self._next_frame, data)
        self._next_frame += 1
        self.frames[frame.frame_id] = frame
        return frame

    # ------------------------------------------------------------------
    # mapping

    def map(
        self,
        asid: int,
        vpn: int,
        frame_id: int,
        user: bool = True,
        writable: bool = True,
        executable: bool = False,
        shared: bool = False,
    ) -> PageTableEntry:
        space = self.spaces[asid]
        if vpn in space.entries:
            raise DoubleMapError(f"vpn {vpn:#x} already mapped in asid {asid}")
        pte = PageTableEntry(
            frame_id, user=user, writable=writable, executable=executable
        )
        space.entries[vpn] = pte
        self._cover_with_vma(space, vpn, writable, executable, shared)
        self.rmap.setdefault(frame_id, {})[(asid, vpn)] = pte.perms()
        return pte

    def _cover_with_vma(
        self, space: AddressSpace, vpn: int, writable: bool, executable: bool, shared: bool
    ) -> None:
        if space.vma_for(vpn) is not None:
            return
        for vma in space.vmas:
            if vma.end + 1 == vpn and vma.vm_write == writable and vma.vm_exec == executable and vma.shared == shared:
                vma.end = vpn
                return
        space.vmas.append(Vma(vpn, vpn, writable, executable, shared))

    def unmap(self, asid: int, vpn: int) -> None:
        space = self.spaces[asid]
        pte = space.entries.pop(vpn, None)
        if pte is None:
            raise UnmappedError(f"vpn {vpn:#x} not mapped in asid {asid}")
        mappings = self.rmap.get(pte.frame_id)
        if mappings is not None:
            mappings.pop((asid, vpn), None)
            if not mappings:
                del self.rmap[pte.frame_id]

    def destroy_address_space(self, asid: int) -> None:
        space = self.spaces.pop(asid)
        for vpn, pte in space.entries.items():
            mappings = self.rmap.get(pte.frame_id)
            if mappings is not None:
                mappings.pop((asid, vpn), None)
                if not mappings:
                    del self.rmap[pte.frame_id]
        for tlb in self.tlbs:
            tlb.flush_asid(asid)

    # ------------------------------------------------------------------
    # translation and access

    def pte(self, asid: int, vpn: int) -> PageTableEntry:
        try:
            return self.spaces[asid].entries[vpn]
        except KeyError:
            raise UnmappedError(f"vpn {vpn:#x} not mapped in asid {asid}") from None

    def access(
        self, core: int, asid: int, mode: AccessMode, kind: AccessKind, vaddr: int
    ) -> AccessResult:
        """Translate and permission-check one access; TLB first, fill on miss.

        Returns a handle to the backing frame on success, a PageFault value
        otherwise. A successful translation served from a stale TLB snapshot
        deliberately bypasses the current PTE: this is the hazard that makes
        explicit flushes mandatory.
        """
        vpn = vpn_of(vaddr)
        tlb = self.tlbs[core]
        pte = tlb.lookup(asid, vpn)
        filled_from_walk = False
        if pte is None:
            space = self.spaces.get(asid)
            pte = space.entries.get(vpn) if space is not None else None
            filled_from_walk = True
        fault = self._check(pte, asid, vaddr, vpn, kind, mode)
        if fault is not None:
            return AccessResult(fault, None)
        assert pte is not None
        if filled_from_walk:
            tlb.fill(asid, vpn, pte)
        return AccessResult(None, self.frames[pte.frame_id], page_offset(vaddr))

    @staticmethod
    def _check(
        pte: Optional[PageTableEntry],
        asid: int,
        vaddr: int,
        vpn: int,
        kind: AccessKind,
        mode: AccessMode,
    ) -> Optional[PageFault]:
        if pte is None or not pte.present:
            return PageFault(FaultReason.NOT_PRESENT, asid, vaddr, vpn, kind, mode)
        if mode is AccessMode.USER and not pte.user:
            return PageFault(
                FaultReason.USER_BIT, asid, vaddr, vpn, kind, mode, pte.frame_id
            )
        if kind is AccessKind.WRITE:
            if pte.cow:
                return PageFault(
                    FaultReason.COW_PENDING, asid, vaddr, vpn, kind, mode, pte.frame_id
                )
            if not pte.writable:
                return PageFault(
                    FaultReason.WRITE_PROT, asid, vaddr, vpn, kind, mode, pte.frame_id
                )
        if kind is AccessKind.EXEC and not pte.executable:
            return PageFault(
                FaultReason.EXEC_PROT, asid, vaddr, vpn, kind, mode, pte.frame_id
            )
        return None

    def read_bytes(
        self, core: int, asid: int, mode: AccessMode, vaddr: int, length: int
    ) -> tuple[Optional[bytes], Optional[PageFault]]:
        out = bytearray()
        addr = vaddr
        remaining = length
        while remaining > 0:
            res = self.access(core, asid, mode, AccessKind.READ, addr)
            if res.fault is not None:
                return None, res.fault
            chunk = min(remaining, PAGE_SIZE - res.offset)
            out += res.frame.data[res.offset : res.offset + chunk]
            addr += chunk
            remaining -= chunk
        return bytes(out), None

    def write_bytes(
        self, core: int, asid: int, mode: AccessMode, vaddr: int, data: bytes
    ) -> Optional[PageFault]:
        addr = vaddr
        pos = 0
        while pos < len(data):
            res = self.access(core, asid, mode, AccessKind.WRITE, addr)
            if res.fault is not None:
                return res.fault
            chunk = min(len(data) - pos, PAGE_SIZE - res.offset)
            res.frame.data[res.offset : res.offset + chunk] = data[pos : pos + chunk]
            addr += chunk
            pos += chunk
        return None

    def read_cstring(
        self, core: int, asid: int, mode: AccessMode, vaddr: int, max_pages: int
    ) -> tuple[Optional[bytes], Optional[PageFault], list[int]]:
        """Read a NUL-terminated string spanning at most max_pages pages.

        Returns (bytes-without-NUL, fault, spanned vpns). Unterminated
        strings within the span return (None, None, vpns).
        """
        out = bytearray()
        spanned: list[int] = []
        addr = vaddr
        for _ in range(max_pages):
            vpn = vpn_of(addr)
            res = self.access(core, asid, mode, AccessKind.READ, addr)
            if res.fault is not None:
                return None, res.fault, spanned
            spanned.append(vpn)
            chunk = res.frame.data[res.offset : PAGE_SIZE]
            nul = chunk.find(0)
            if nul >= 0:
                out += chunk[:nul]
                return bytes(out), None, spanned
            out += chunk
            addr = (vpn + 1) * PAGE_SIZE
        return None, None, spanned

    # ------------------------------------------------------------------
    # permission bits and TLB maintenance

    def set_bit(self, asid: int, vpn: int, bit: PteBit, value: bool) -> bool:
        """Set one permission bit; returns the previous value.

        Deliberately does not flush any TLB: callers own the flush step,
        mirroring the real two-step hazard.
        """
        pte = self.pte(asid, vpn)
        prev = getattr(pte, bit.value)
        setattr(pte, bit.value, value)
        self.rmap[pte.frame_id][(asid, vpn)] = pte.perms()
        return prev

    def tlb_flush(self, asid: int, vpn: int, cores: Optional[Iterable[int]] = None) -> None:
        targets = self.all_cores() if cores is None else set(cores)
        for core in targets:
            self.tlbs[core].flush(asid, vpn)

    # ------------------------------------------------------------------
    # copy-on-write and fork

    def cow_resolve(self, asid: int, vpn: int) -> int:
        """Give this mapping a private copy of its frame; returns new frame id."""
        pte = self.pte(asid, vpn)
        if not pte.cow:
            raise NotCowError(f"vpn {vpn:#x} in asid {asid} is not copy-on-write")
        old = self.frames[pte.frame_id]
        fresh = self.alloc_frame(bytes(old.data))
        mappings = self.rmap[pte.frame_id]
        del mappings[(asid, vpn)]
        if not mappings:
            del self.rmap[pte.frame_id]
        pte.frame_id = fresh.frame_id
        pte.cow = False
        vma = self.spaces[asid].vma_for(vpn)
        pte.writable = vma.vm_write if vma is not None else True
        self.rmap.setdefault(fresh.frame_id, {})[(asid, vpn)] = pte.perms()
        self.tlb_flush(asid, vpn)
        return fresh.frame_id

    def fork_address_space(self, parent_asid: int) -> AddressSpace:
        """COW snapshot of a parent space: private writable pages become
        copy-on-write in both parent and child; shared mappings stay shared.
        """
        parent = self.spaces[parent_asid]
        child = self.new_address_space([replace(v) for v in parent.vmas])
        for vpn, ppte in parent.entries.items():
            vma = parent.vma_for(vpn)
            shared = vma.shared if vma is not None else False
            if shared or not (vma.vm_write if vma is not None else ppte.writable):
                cpte = ppte.snapshot()
            else:
                ppte.cow = True
                ppte.writable = False
                self.rmap[ppte.frame_id][(parent_asid, vpn)] = ppte.perms()
                self.tlb_flush(parent_asid, vpn)
                cpte = ppte.snapshot()
            child.entries[vpn] = cpte
            self.rmap.setdefault(cpte.frame_id, {})[(child.asid, vpn)] = cpte.perms()
        return child

    # ------------------------------------------------------------------
    # reverse map queries

    def aliases_of(self, frame_id: int) -> list[tuple[int, int, tuple[bool, bool, bool]]]:
        mappings = self.rmap.get(frame_id, {})
        return sorted((asid, vpn, perms) for (asid, vpn), perms in mappings.items())

    def rebuild_reverse_map(self) -> dict[int, dict[tuple[int, int], tuple[bool, bool, bool]]]:
        """Brute-force inverse of all address spaces, for soundness checks."""
        rebuilt: dict[int, dict[tuple[int, int], tuple[bool, bool, bool]]] = {}
        for asid, space in self.spaces.items():
            for vpn, pte in space.entries.items():
                rebuilt.setdefault(pte.frame_id, {})[(asid, vpn)] = pte.perms()
        return rebuilt
