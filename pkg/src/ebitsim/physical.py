"""Memory cells, pair absorption and the fusion measurement primitive.

Cell life cycle: Empty -> Valid (a half-pair lands), Valid -> Valid (a newer
pair overwrites the oldest one when no cell is free), Valid -> Used (locked by
the protocol), Used -> Empty and Valid -> Empty (freed). Used cells are never
overwritten; an arrival finding neither Empty nor Valid cells is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

from ebitsim.core import PhysicalParams, ProtocolError, RandomStream, swap_fidelity
from ebitsim.engine import PAIR_ARRIVAL, Engine
from ebitsim.network import Link, Role, Topology


class CellState(Enum):
    EMPTY = "empty"
    VALID = "valid"
    USED = "used"


@dataclass(frozen=True)
class StoredHalf:
    """One qubit of an entangled pair sitting in a memory cell."""

    link_id: int
    pair_seq: int
    birth: float      # absorption instant; dephasing clock starts here
    f_init: float


class Cell:
    __slots__ = ("index", "state", "half")

    def __init__(self, index: int) -> None:
        self.index = index
        self.state = CellState.EMPTY
        self.half: StoredHalf | None = None

    def __repr__(self) -> str:
        seq = self.half.pair_seq if self.half else "-"
        return f"<Cell {self.index} {self.state.value} seq={seq}>"


class AbsorbResult(Enum):
    STORED = "stored"
    OVERWROTE = "overwrote"
    DROPPED = "dropped"


class LockResult(Enum):
    LOCKED = "locked"
    STALE_MISMATCH = "stale-mismatch"
    NOT_VALID = "not-valid"


@dataclass(frozen=True)
class AbsorbOutcome:
    result: AbsorbResult
    cell_index: int | None = None   # where the half landed (None when dropped)
    evicted_seq: int | None = None  # pair displaced by an overwrite


class MemoryPool:
    """The cells one node dedicates to one link in one role.

    Cell indices are node wide, not pool local: a node's pools carve up one
    contiguous range so that mirror bookkeeping can name cells unambiguously.
    """

    def __init__(self, node: int, link_id: int, role: Role, size: int,
                 index_base: int = 0) -> None:
        self.node = node
        self.link_id = link_id
        self.role = role
        self.index_base = index_base
        self.cells = [Cell(index_base + i) for i in range(size)]
        self.stored = 0
        self.overwritten = 0
        self.dropped = 0

    def cell(self, cell_index: int) -> Cell:
        return self.cells[cell_index - self.index_base]

    @property
    def arrivals(self) -> int:
        return self.stored + self.overwritten + self.dropped

    def absorb(self, half: StoredHalf) -> AbsorbOutcome:
        """Place an arriving half: free cell first, else overwrite the oldest."""
        empty = next((c for c in self.cells if c.state is CellState.EMPTY), None)
        if empty is not None:
            empty.state = CellState.VALID
            empty.half = half
            self.stored += 1
            return AbsorbOutcome(AbsorbResult.STORED, empty.index)
        oldest: Cell | None = None
        for c in self.cells:
            if c.state is CellState.VALID:
                if oldest is None or c.half.birth < oldest.half.birth:
                    oldest = c
        if oldest is not None:
            evicted = oldest.half.pair_seq
            oldest.half = half
            self.overwritten += 1
            return AbsorbOutcome(AbsorbResult.OVERWROTE, oldest.index, evicted)
        self.dropped += 1
        return AbsorbOutcome(AbsorbResult.DROPPED)

    def lock(self, cell_index: int, expected_seq: int) -> LockResult:
        """Claim a Valid cell for a specific pair; detects overwritten targets."""
        cell = self.cell(cell_index)
        if cell.state is not CellState.VALID:
            return LockResult.NOT_VALID
        if cell.half.pair_seq != expected_seq:
            return LockResult.STALE_MISMATCH
        cell.state = CellState.USED
        return LockResult.LOCKED

    def free(self, cell_index: int) -> None:
        cell = self.cell(cell_index)
        if cell.state is CellState.EMPTY:
            raise ProtocolError(
                f"double free of cell {cell_index} at node {self.node} "
                f"(link {self.link_id}, {self.role.value})"
            )
        cell.state = CellState.EMPTY
        cell.half = None

    def youngest_valid(self) -> Cell | None:
        best: Cell | None = None
        for c in self.cells:
            if c.state is CellState.VALID:
                if best is None or c.half.birth > best.half.birth:
                    best = c
        return best

    def find_valid_seq(self, pair_seq: int) -> Cell | None:
        """Locate the still-Valid half of a given pair, wherever it sits.

        Peers identify pairs by the arrival counter, not by cell position:
        lock and free decisions happen at different times on the two ends, so
        the same pair can land in different cells on each side."""
        for c in self.cells:
            if c.state is CellState.VALID and c.half.pair_seq == pair_seq:
                return c
        return None

    def count(self, state: CellState) -> int:
        return sum(1 for c in self.cells if c.state is state)

    def seq_snapshot(self) -> list[int | None]:
        """Pair id per cell, Used and Valid alike (mirror-consistency checks)."""
        return [c.half.pair_seq if c.half is not None else None for c in self.cells]


@dataclass(frozen=True)
class BsmResult:
    success: bool
    bits: int          # two classical bits, uniform over {0, 1, 2, 3}
    f_out: float       # fidelity of the fused pair, valid only on success


def attempt_bsm(f_left: float, f_right: float, params: PhysicalParams,
                rng: RandomStream) -> BsmResult:
    """Fuse two halves already dephased to the measurement completion instant."""
    success = rng.bernoulli(params.bsm_success_prob)
    bits = rng.two_bits()
    return BsmResult(success, bits, swap_fidelity(f_left, f_right))


# callback signature: (link, pair_seq, master_outcome, slave_outcome)
AbsorbListener = Callable[[Link, int, AbsorbOutcome, AbsorbOutcome], None]


class PairGenerator:
    """Poisson pair source at one link's midpoint.

    Successive generation instants are exponentially spaced; both halves land
    simultaneously half a link later, and both endpoint pools apply the same
    absorption rule in the same order, which keeps mirrored pools aligned
    whenever the protocol has not locked cells asymmetrically.
    """

    def __init__(self, link: Link, master_pool: MemoryPool, slave_pool: MemoryPool,
                 engine: Engine, rng: RandomStream, params: PhysicalParams,
                 listener: AbsorbListener | None = None) -> None:
        self.link = link
        self.master_pool = master_pool
        self.slave_pool = slave_pool
        self.engine = engine
        self.rng = rng
        self.params = params
        self.listener = listener
        self.horizon = float("inf")  # generation stops after this instant
        self._gen_time = 0.0
        self._detail = f"link={link.link_id}"

    def start(self) -> None:
        self._schedule_next()

    def _schedule_next(self) -> None:
        self._gen_time += self.rng.exponential(self.params.epsg_rate_hz)
        if self._gen_time > self.horizon:
            return
        fire = self._gen_time + self.link.arrival_delay_s
        self.engine.schedule(fire - self.engine.now, PAIR_ARRIVAL, self._arrive, self._detail)

    def _arrive(self) -> None:
        seq = self.link.next_pair_seq
        self.link.next_pair_seq += 1
        half = StoredHalf(self.link.link_id, seq, self.engine.now, self.params.f_init)
        master_out = self.master_pool.absorb(half)
        slave_out = self.slave_pool.absorb(half)
        if self.listener is not None:
            self.listener(self.link, seq, master_out, slave_out)
        self._schedule_next()


def build_pools(topo: Topology) -> dict[tuple[int, int, Role], MemoryPool]:
    """One MemoryPool per (node, link, role) group of the topology.

    Groups are contiguous index ranges, so each pool carries the range start
    and its cells keep their node-wide indices."""
    pools = {}
    for key, assignments in topo.groups.items():
        base = assignments[0].cell_index if assignments else 0
        pools[key] = MemoryPool(key[0], key[1], key[2], len(assignments), base)
    return pools
