"""Asynchronous hop-by-hop ebit delivery over a chain.

One attempt walks the chain left to right. The source locks a fresh pair on
its first link and asks the next node to fuse it onward; every intermediate
node locks the designated upstream half, grabs the youngest valid pair on its
downstream link (waiting for one if necessary), fuses, and forwards the
request together with the accumulated correction bits. The destination applies
the corrections and reports completion straight back to the source. Any
failure is reported back too, after which the source frees its half and
retries with a fresh attempt id.

Cells referenced by in-flight requests are not pinned: a busy link can
overwrite the designated pair before the request lands, which surfaces as a
stale-cell failure at lock time. That race is the protocol's defining cost at
small memory sizes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

from ebitsim.core import PhysicalParams, ProtocolError, RandomStream, dephase
from ebitsim.engine import BSM_COMPLETE, MESSAGE_DELIVERY, SIM_END, XZ_COMPLETE, Engine
from ebitsim.network import Role, Topology, shortest_path
from ebitsim.physical import (
    AbsorbOutcome,
    AbsorbResult,
    CellState,
    LockResult,
    MemoryPool,
    PairGenerator,
    attempt_bsm,
    build_pools,
)
from ebitsim.runtime import Application, RunMetrics

STALE_CELL = "stale-cell"
BSM_FAIL = "bsm"
DRAIN = "drain"


@dataclass(frozen=True)
class FiveTuple:
    """Identity of one ebit creation attempt; attempt_id counts per source port."""

    src: int
    src_port: int
    dst: int
    dst_port: int
    attempt_id: int

    def __str__(self) -> str:
        return f"{self.src}:{self.src_port}>{self.dst}:{self.dst_port}#{self.attempt_id}"


@dataclass(frozen=True)
class EsReq:
    """Fuse-and-forward request for the node at path[hop]."""

    five_tuple: FiveTuple
    path: tuple[int, ...]
    hop: int
    upstream_cell_index: int      # receiver's slave cell holding the designated pair
    upstream_pair_seq: int
    corrections: tuple[int, ...]  # two bits per completed fusion, path order
    composite_f: float            # running fidelity fold of the upstream segment
    composite_since: float        # instant composite_f refers to
    composite_rate: float         # dephasing rate of the composite (plain gamma before any fusion)
    pair_births: tuple[float, ...]
    swap_times: tuple[float, ...]


@dataclass(frozen=True)
class EsRemComp:
    five_tuple: FiveTuple
    delivered_at: float
    fidelity: float


@dataclass(frozen=True)
class EsRemFail:
    five_tuple: FiveTuple
    cause: str
    origin: int


@dataclass(frozen=True)
class EsFree:
    """Release a slave half orphaned by a fusion failure on its link."""

    five_tuple: FiveTuple
    node: int
    link_id: int
    cell_index: int
    pair_seq: int


class AttemptState(Enum):
    WAITING_SOURCE = "waiting-source"
    IN_FLIGHT = "in-flight"
    ESTABLISHED = "established"
    FAILED = "failed"
    ABANDONED = "abandoned"


@dataclass
class EbitAttempt:
    five_tuple: FiveTuple
    app: Application
    path: tuple[int, ...]
    started_at: float
    state: AttemptState = AttemptState.WAITING_SOURCE
    source_cell: int | None = None
    resolved_at: float | None = None
    failure_cause: str | None = None
    delivered_fidelity: float | None = None
    delivered_at: float | None = None
    # for the straight-line fidelity recomputation in tests
    pair_births: tuple[float, ...] = ()
    swap_times: tuple[float, ...] = ()


@dataclass
class _Parked:
    """An attempt waiting for a valid pair in one master group."""

    attempt: EbitAttempt
    since: float
    # None at the source; at an intermediate node, the request being served
    # plus the already-locked upstream slave cell
    msg: EsReq | None = None
    slave_cell_index: int | None = None


class HopperReplication:
    """One seeded run of the asynchronous protocol on one chain."""

    def __init__(self, topo: Topology, apps: list[Application], duration_s: float,
                 seed: int, trace: Callable[[str], None] | None = None,
                 dump: Callable[[str], None] | None = None) -> None:
        self.topo = topo
        self.params: PhysicalParams = topo.params
        self.apps = apps
        self.duration_s = duration_s
        self.rng = RandomStream(seed)
        self.engine = Engine(trace=trace)
        self.dump = dump
        self.metrics = RunMetrics(duration_s=duration_s)

        self.pools = build_pools(topo)
        self.generators = [
            PairGenerator(
                link,
                self.pools[(link.upstream, link.link_id, Role.MASTER)],
                self.pools[(link.downstream, link.link_id, Role.SLAVE)],
                self.engine, self.rng, self.params,
                listener=self._on_pair_arrival,
            )
            for link in topo.links
        ]
        for gen in self.generators:
            gen.horizon = duration_s

        self.path = tuple(shortest_path(topo, topo.source, topo.destination))
        self.live: dict[FiveTuple, EbitAttempt] = {}
        self.resolved_ids: set[FiveTuple] = set()
        self.completed: list[EbitAttempt] = []
        self.wait_queues: dict[tuple[int, int], deque[_Parked]] = {
            (link.upstream, link.link_id): deque() for link in topo.links
        }
        self.next_attempt_id: dict[int, int] = {app.src_port: 0 for app in apps}
        # (link_id, pair_seq) -> five tuple that locked it; at-most-once audit
        self.claims: dict[tuple[int, int], FiveTuple] = {}
        self.draining = False

    # ---------------------------------------------------------------- wiring

    def _master_pool(self, node: int, link_id: int) -> MemoryPool:
        return self.pools[(node, link_id, Role.MASTER)]

    def _slave_pool(self, node: int, link_id: int) -> MemoryPool:
        return self.pools[(node, link_id, Role.SLAVE)]

    def _send(self, frm: int, to: int, msg, handler: Callable, note: str = "") -> None:
        latency = self.topo.path_latency(frm, to)
        name = type(msg).__name__
        if self.dump is not None:
            self.dump(f"{self.engine.now!r}\t{name}\t{msg.five_tuple}\t{frm}->{to}\t{note}")
        self.engine.schedule(
            latency, MESSAGE_DELIVERY, lambda: handler(msg),
            detail=f"{name} {msg.five_tuple} @{to}",
        )

    def _claim(self, link_id: int, pair_seq: int, owner: FiveTuple) -> None:
        key = (link_id, pair_seq)
        holder = self.claims.get(key)
        if holder is None:
            self.claims[key] = owner
        elif holder != owner:
            raise ProtocolError(
                f"pair {key} claimed by {holder} and again by {owner}"
            )

    # -------------------------------------------------------------- workload

    def run(self) -> RunMetrics:
        for gen in self.generators:
            gen.start()
        self.engine.schedule(self.duration_s, SIM_END, self._begin_drain)
        for app in self.apps:
            self.issue_request(app)
        self.engine.run_until(self.duration_s)
        # everything still pending resolves without new requests or new pairs
        rtt = 2.0 * self.topo.path_latency(self.topo.source, self.topo.destination)
        self.engine.run_to_exhaustion(hard_limit=self.duration_s + 10.0 + 10.0 * rtt)
        self._finalize()
        return self.metrics

    def issue_request(self, app: Application) -> EbitAttempt:
        attempt_id = self.next_attempt_id[app.src_port]
        self.next_attempt_id[app.src_port] = attempt_id + 1
        five = FiveTuple(self.topo.source, app.src_port,
                         self.topo.destination, app.dst_port, attempt_id)
        attempt = EbitAttempt(five, app, self.path, self.engine.now)
        self.live[five] = attempt
        self.metrics.attempts += 1
        self.start_attempt(attempt)
        return attempt

    def _reissue(self, app: Application, retry: bool) -> None:
        if self.draining or self.engine.now >= self.duration_s:
            return
        if retry:
            self.metrics.retries += 1
        if app.hold_time_s > 0.0:
            self.engine.schedule(app.hold_time_s, "app-hold",
                                 lambda: self._reissue_now(app))
        else:
            self.issue_request(app)

    def _reissue_now(self, app: Application) -> None:
        if not self.draining and self.engine.now < self.duration_s:
            self.issue_request(app)

    # -------------------------------------------------------------- protocol

    def start_attempt(self, attempt: EbitAttempt) -> None:
        """Source side: lock the youngest pair on the first link, or park."""
        first_link = self.topo.links[0].link_id
        pool = self._master_pool(self.topo.source, first_link)
        cell = pool.youngest_valid()
        if cell is None:
            if self.draining:
                self._resolve_abandoned(attempt)
                return
            self.wait_queues[(self.topo.source, first_link)].append(
                _Parked(attempt, since=self.engine.now))
            return
        self._lock_source_and_request(attempt, pool, cell.index)

    def _lock_source_and_request(self, attempt: EbitAttempt, pool: MemoryPool,
                                 cell_index: int) -> None:
        half = pool.cell(cell_index).half
        locked = pool.lock(cell_index, half.pair_seq)
        assert locked is LockResult.LOCKED
        self._claim(pool.link_id, half.pair_seq, attempt.five_tuple)
        attempt.source_cell = cell_index
        attempt.state = AttemptState.IN_FLIGHT
        mirror_node, mirror_cell = self.topo.mirror[(pool.node, cell_index)]
        msg = EsReq(
            five_tuple=attempt.five_tuple, path=self.path, hop=1,
            upstream_cell_index=mirror_cell, upstream_pair_seq=half.pair_seq,
            corrections=(),
            composite_f=half.f_init, composite_since=half.birth,
            composite_rate=self.params.gamma_hz,  # a lone pair, no fusion yet
            pair_births=(half.birth,), swap_times=(),
        )
        self._send(pool.node, mirror_node, msg, self.handle_es_req,
                   note=f"cell={mirror_cell} seq={half.pair_seq}")

    def handle_es_req(self, msg: EsReq) -> None:
        node = msg.path[msg.hop]
        up_link = self.topo.links[msg.hop - 1].link_id
        slave_pool = self._slave_pool(node, up_link)
        # the pair counter is the identity; the cell named in the message is
        # where the sender holds its own half, which may not match ours
        cell = slave_pool.find_valid_seq(msg.upstream_pair_seq)
        if cell is None:
            self._fail_attempt(msg.five_tuple, STALE_CELL, node)
            return
        locked = slave_pool.lock(cell.index, msg.upstream_pair_seq)
        assert locked is LockResult.LOCKED
        slave_cell_index = cell.index
        self._claim(up_link, msg.upstream_pair_seq, msg.five_tuple)
        if node == self.topo.destination:
            self._deliver_at_destination(msg, node, slave_pool, slave_cell_index)
            return
        down_link = self.topo.links[msg.hop].link_id
        master_pool = self._master_pool(node, down_link)
        master_cell = master_pool.youngest_valid()
        if master_cell is None:
            if self.draining:
                slave_pool.free(slave_cell_index)
                self._fail_attempt(msg.five_tuple, DRAIN, node)
                return
            self.wait_queues[(node, down_link)].append(
                _Parked(self.live[msg.five_tuple], since=self.engine.now,
                        msg=msg, slave_cell_index=slave_cell_index))
            return
        self._fuse_and_forward(node, msg, slave_cell_index, master_cell.index)

    def _fuse_and_forward(self, node: int, msg: EsReq, slave_cell_index: int,
                          master_cell_index: int) -> None:
        """Lock the downstream pair and run the fusion; both halves are freed
        at measurement completion whatever the outcome."""
        up_link = self.topo.links[msg.hop - 1].link_id
        down_link = self.topo.links[msg.hop].link_id
        master_pool = self._master_pool(node, down_link)
        slave_pool = self._slave_pool(node, up_link)
        half = master_pool.cell(master_cell_index).half
        locked = master_pool.lock(master_cell_index, half.pair_seq)
        assert locked is LockResult.LOCKED
        self._claim(down_link, half.pair_seq, msg.five_tuple)
        completion = self.engine.now + self.params.bsm_duration_s

        def complete() -> None:
            f_left = dephase(msg.composite_f, msg.composite_rate,
                             completion - msg.composite_since)
            f_right = dephase(half.f_init, self.params.gamma_hz, completion - half.birth)
            result = attempt_bsm(f_left, f_right, self.params, self.rng)
            slave_pool.free(slave_cell_index)
            master_pool.free(master_cell_index)
            if not result.success:
                mirror_node, mirror_cell = self.topo.mirror[(node, master_cell_index)]
                free_msg = EsFree(msg.five_tuple, mirror_node, down_link,
                                  mirror_cell, half.pair_seq)
                self._send(node, mirror_node, free_msg, self.handle_es_free,
                           note=f"cell={mirror_cell} seq={half.pair_seq}")
                self._fail_attempt(msg.five_tuple, BSM_FAIL, node)
                return
            mirror_node, mirror_cell = self.topo.mirror[(node, master_cell_index)]
            fwd = replace(
                msg, hop=msg.hop + 1,
                upstream_cell_index=mirror_cell, upstream_pair_seq=half.pair_seq,
                corrections=msg.corrections + (result.bits,),
                composite_f=result.f_out, composite_since=completion,
                composite_rate=self.params.gamma_hz * self.params.composite_decay_multiplier,
                pair_births=msg.pair_births + (half.birth,),
                swap_times=msg.swap_times + (completion,),
            )
            self._send(node, mirror_node, fwd, self.handle_es_req,
                       note=f"cell={mirror_cell} seq={half.pair_seq}")

        self.engine.schedule(self.params.bsm_duration_s, BSM_COMPLETE, complete,
                             detail=f"{msg.five_tuple} @{node}")

    def _deliver_at_destination(self, msg: EsReq, node: int,
                                slave_pool: MemoryPool,
                                slave_cell_index: int) -> None:
        if len(msg.corrections) != len(self.path) - 2:
            raise ProtocolError(
                f"{msg.five_tuple}: {len(msg.corrections)} corrections for "
                f"{len(self.path) - 2} fusions"
            )
        completion = self.engine.now + self.params.xz_duration_s

        def corrected() -> None:
            fidelity = dephase(msg.composite_f, msg.composite_rate,
                               completion - msg.composite_since)
            slave_pool.free(slave_cell_index)  # consumed by the application
            attempt = self.live[msg.five_tuple]
            attempt.delivered_at = completion
            attempt.delivered_fidelity = fidelity
            attempt.pair_births = msg.pair_births
            attempt.swap_times = msg.swap_times
            if completion <= self.duration_s:
                attempt.state = AttemptState.ESTABLISHED
                self.metrics.record_delivery(fidelity)
            else:
                attempt.state = AttemptState.ABANDONED
                self.metrics.abandoned += 1
            attempt.resolved_at = completion
            comp = EsRemComp(msg.five_tuple, completion, fidelity)
            self._send(node, self.topo.source, comp, self.handle_es_rem_comp)

        self.engine.schedule(self.params.xz_duration_s, XZ_COMPLETE, corrected,
                             detail=f"{msg.five_tuple} @{node}")

    def handle_es_rem_comp(self, msg: EsRemComp) -> None:
        attempt = self._take_live(msg.five_tuple)
        if attempt is None:
            return
        self.completed.append(attempt)
        if attempt.source_cell is not None:
            # the source half of the delivered ebit, consumed by the application
            self._master_pool(self.topo.source, self.topo.links[0].link_id).free(
                attempt.source_cell)
            attempt.source_cell = None
        self._reissue(attempt.app, retry=False)

    def handle_es_rem_fail(self, msg: EsRemFail) -> None:
        attempt = self._take_live(msg.five_tuple)
        if attempt is None:
            return
        if attempt.source_cell is not None:
            self._master_pool(self.topo.source, self.topo.links[0].link_id).free(
                attempt.source_cell)
            attempt.source_cell = None
        self._reissue(attempt.app, retry=True)

    def handle_es_free(self, msg: EsFree) -> None:
        """Idempotent release of a designated slave half that was never locked."""
        pool = self._slave_pool(msg.node, msg.link_id)
        cell = pool.find_valid_seq(msg.pair_seq)
        if cell is not None:
            pool.free(cell.index)
        # otherwise the pair was already overwritten by a newer one

    def _take_live(self, five: FiveTuple) -> EbitAttempt | None:
        attempt = self.live.pop(five, None)
        if attempt is None:
            if five in self.resolved_ids:
                raise ProtocolError(f"duplicate terminal message for {five}")
            self.metrics.unroutable_messages += 1
            return None
        self.resolved_ids.add(five)
        return attempt

    def _fail_attempt(self, five: FiveTuple, cause: str, origin: int) -> None:
        attempt = self.live.get(five)
        if attempt is None:
            raise ProtocolError(f"failure for unknown attempt {five}")
        now = self.engine.now
        if cause in (STALE_CELL, BSM_FAIL) and now <= self.duration_s:
            attempt.state = AttemptState.FAILED
            attempt.failure_cause = cause
            self.metrics.record_failure(cause)
        else:
            attempt.state = AttemptState.ABANDONED
            attempt.failure_cause = cause
            self.metrics.abandoned += 1
        attempt.resolved_at = now
        fail = EsRemFail(five, cause, origin)
        if origin == self.topo.source:
            # local decision (drained park at the source); close in place
            self.handle_es_rem_fail(fail)
        else:
            self._send(origin, self.topo.source, fail, self.handle_es_rem_fail,
                       note=cause)

    def _resolve_abandoned(self, attempt: EbitAttempt) -> None:
        attempt.state = AttemptState.ABANDONED
        attempt.resolved_at = self.engine.now
        self.metrics.abandoned += 1
        self.live.pop(attempt.five_tuple, None)
        self.resolved_ids.add(attempt.five_tuple)

    # ---------------------------------------------------------- pair arrival

    def _on_pair_arrival(self, link, seq: int, master_out: AbsorbOutcome,
                         slave_out: AbsorbOutcome) -> None:
        if master_out.result is AbsorbResult.DROPPED:
            return
        queue = self.wait_queues[(link.upstream, link.link_id)]
        if not queue:
            return
        parked = queue.popleft()
        self.metrics.record_wait(self.engine.now - parked.since)
        if parked.msg is None:
            pool = self._master_pool(link.upstream, link.link_id)
            self._lock_source_and_request(parked.attempt, pool, master_out.cell_index)
        else:
            node = parked.msg.path[parked.msg.hop]
            self._fuse_and_forward(node, parked.msg, parked.slave_cell_index,
                                   master_out.cell_index)

    # ------------------------------------------------------------------ drain

    def _begin_drain(self) -> None:
        """Horizon reached: no new requests, no retries, park queues emptied."""
        self.draining = True
        for (node, link_id), queue in self.wait_queues.items():
            while queue:
                parked = queue.popleft()
                if parked.msg is None:
                    self._resolve_abandoned(parked.attempt)
                else:
                    up_link = self.topo.links[parked.msg.hop - 1].link_id
                    self._slave_pool(node, up_link).free(parked.slave_cell_index)
                    self._fail_attempt(parked.msg.five_tuple, DRAIN, node)

    def _finalize(self) -> None:
        if self.live:
            raise ProtocolError(f"{len(self.live)} attempts still live after drain")
        for pool in self.pools.values():
            used = pool.count(CellState.USED)
            if used:
                raise ProtocolError(
                    f"{used} cells still locked at node {pool.node} "
                    f"(link {pool.link_id}, {pool.role.value}) after drain"
                )
        for link in self.topo.links:
            for role, side in ((Role.MASTER, "master"), (Role.SLAVE, "slave")):
                node = link.upstream if role is Role.MASTER else link.downstream
                pool = self.pools[(node, link.link_id, role)]
                if pool.arrivals != link.next_pair_seq:
                    raise ProtocolError(
                        f"link {link.link_id} {side} side absorbed {pool.arrivals} "
                        f"of {link.next_pair_seq} pairs"
                    )
                self.metrics.link_counters[(link.link_id, side)] = (
                    link.next_pair_seq, pool.stored, pool.overwritten, pool.dropped)
                self.metrics.pairs_stored += pool.stored
                self.metrics.pairs_overwritten += pool.overwritten
                self.metrics.pairs_dropped += pool.dropped
            self.metrics.pairs_generated += link.next_pair_seq
        self.metrics.check_conservation()


def run_hopper_replication(topo: Topology, apps: list[Application],
                           duration_s: float, seed: int,
                           trace: Callable[[str], None] | None = None,
                           dump: Callable[[str], None] | None = None) -> RunMetrics:
    return HopperReplication(topo, apps, duration_s, seed, trace, dump).run()
