"""Asynchronous protocol behaviour, from single deterministic attempts to
full seeded replications.

The single-attempt tests disable pair generation and inject pairs by hand so
every timestamp is a closed-form fold over link latencies and operation
durations; equality there is exact, not approximate.
"""

import math

import pytest

from ebitsim.core import PhysicalParams, ProtocolError, dephase, swap_fidelity
from ebitsim.engine import SIM_END
from ebitsim.hopper import (
    AttemptState,
    FiveTuple,
    HopperReplication,
    run_hopper_replication,
)
from ebitsim.network import Role, build_chain
from ebitsim.physical import CellState, StoredHalf
from ebitsim.runtime import Application, make_applications

LINK_M = 5e6
SPEED = 3e8
LATENCY = LINK_M / SPEED


def make_params(**overrides):
    base = dict(gamma_hz=1.0, f_init=0.95, epsg_rate_hz=100.0,
                bsm_success_prob=0.95, bsm_duration_s=1e-3, xz_duration_s=1e-3,
                signal_speed_m_s=SPEED)
    base.update(overrides)
    return PhysicalParams(**base)


def quiet_replication(n_repeaters, cells, duration_s, seed=7, apps=1, **params):
    """Replication whose generators never fire: pairs are injected by hand."""
    p = make_params(epsg_rate_hz=1e-12, **params)
    topo = build_chain(n_repeaters, LINK_M, cells, p)
    return HopperReplication(topo, make_applications(apps), duration_s, seed)


def inject_pair(rep, link_index):
    """Create one pair on a link right now, mirroring the generator's absorb."""
    link = rep.topo.links[link_index]
    seq = link.next_pair_seq
    link.next_pair_seq = seq + 1
    half = StoredHalf(link.link_id, seq, rep.engine.now, rep.params.f_init)
    master = rep.pools[(link.upstream, link.link_id, Role.MASTER)]
    slave = rep.pools[(link.downstream, link.link_id, Role.SLAVE)]
    m_out = master.absorb(half)
    s_out = slave.absorb(half)
    rep._on_pair_arrival(link, seq, m_out, s_out)
    return seq


def drive(rep):
    """Run a hand-fed replication through workload, drain, and audit."""
    rep.engine.schedule(rep.duration_s, SIM_END, rep._begin_drain)
    for app in rep.apps:
        rep.issue_request(app)
    rep.engine.run_until(rep.duration_s)
    rep.engine.run_to_exhaustion(hard_limit=rep.duration_s + 10.0)
    rep._finalize()
    return rep.metrics


def expected_delivery_time(rep):
    """Left fold of hop latency, fusion time, and correction time along the
    path, in the same arithmetic order the implementation uses."""
    t = 0.0
    path = rep.path
    for hop in range(1, len(path)):
        t += rep.topo.path_latency(path[hop - 1], path[hop])
        if path[hop] == rep.topo.destination:
            t += rep.params.xz_duration_s
        else:
            t += rep.params.bsm_duration_s
    return t


def refold_fidelity(rep, attempt):
    """Recompute the delivered fidelity from the attempt's recorded timeline."""
    p = rep.params
    comp_f = p.f_init
    comp_since = attempt.pair_births[0]
    comp_rate = p.gamma_hz
    for i, t_swap in enumerate(attempt.swap_times):
        f_left = dephase(comp_f, comp_rate, t_swap - comp_since)
        f_right = dephase(p.f_init, p.gamma_hz, t_swap - attempt.pair_births[i + 1])
        comp_f = swap_fidelity(f_left, f_right)
        comp_since = t_swap
        comp_rate = p.gamma_hz * p.composite_decay_multiplier
    return dephase(comp_f, comp_rate, attempt.delivered_at - comp_since)


class TestSingleAttempt:
    @pytest.mark.parametrize("n_repeaters", [0, 1, 3])
    def test_delivery_time_matches_closed_form(self, n_repeaters):
        rep = quiet_replication(n_repeaters, cells=10, duration_s=5.0,
                                bsm_success_prob=1.0)
        for i in range(len(rep.topo.links)):
            inject_pair(rep, i)
        drive(rep)
        assert len(rep.completed) == 1
        attempt = rep.completed[0]
        assert attempt.state is AttemptState.ESTABLISHED
        assert attempt.delivered_at == expected_delivery_time(rep)
        assert rep.metrics.successes == 1
        assert rep.metrics.failures == 0

    def test_completion_report_arrives_one_path_later(self):
        rep = quiet_replication(2, cells=10, duration_s=5.0, bsm_success_prob=1.0)
        lines = []
        rep.engine.trace = lines.append
        for i in range(3):
            inject_pair(rep, i)
        drive(rep)
        delivery = rep.completed[0].delivered_at
        back = rep.topo.path_latency(rep.topo.destination, rep.topo.source)
        comp_lines = [l for l in lines if "EsRemComp" in l]
        assert len(comp_lines) == 1
        assert float(comp_lines[0].split("\t")[0]) == delivery + back

    @pytest.mark.parametrize("n_repeaters", [0, 1, 3])
    def test_delivered_fidelity_matches_timeline_fold(self, n_repeaters):
        rep = quiet_replication(n_repeaters, cells=10, duration_s=5.0,
                                bsm_success_prob=1.0)
        for i in range(len(rep.topo.links)):
            inject_pair(rep, i)
        drive(rep)
        attempt = rep.completed[0]
        assert len(attempt.pair_births) == n_repeaters + 1
        assert len(attempt.swap_times) == n_repeaters
        assert attempt.delivered_fidelity == pytest.approx(
            refold_fidelity(rep, attempt), rel=1e-12)

    def test_fidelity_value_frozen_one_repeater(self):
        # both pairs born at 0; fusion at latency + 1 ms; delivery one hop
        # plus one correction later; every factor recomputed independently
        rep = quiet_replication(1, cells=10, duration_s=5.0, bsm_success_prob=1.0)
        inject_pair(rep, 0)
        inject_pair(rep, 1)
        drive(rep)
        attempt = rep.completed[0]
        t_swap = LATENCY + 1e-3
        f_at_swap = 0.25 + (0.95 - 0.25) * math.exp(-t_swap)
        fused = 0.25 + 0.75 * ((4.0 * f_at_swap - 1.0) / 3.0) ** 2
        t_rest = LATENCY + 1e-3
        expected = 0.25 + (fused - 0.25) * math.exp(-t_rest)
        assert attempt.delivered_fidelity == pytest.approx(expected, rel=1e-12)

    def test_source_reissues_after_completion(self):
        rep = quiet_replication(1, cells=10, duration_s=5.0, bsm_success_prob=1.0)
        inject_pair(rep, 0)
        inject_pair(rep, 1)
        drive(rep)
        # the follow-up request found no pair and was abandoned at the horizon
        assert rep.metrics.attempts == 2
        assert rep.metrics.successes == 1
        assert rep.metrics.abandoned == 1
        rep.metrics.check_conservation()


class TestFailurePaths:
    def test_fusion_failure_reported_and_cells_released(self):
        rep = quiet_replication(1, cells=10, duration_s=5.0, bsm_success_prob=0.0)
        inject_pair(rep, 0)
        inject_pair(rep, 1)
        drive(rep)
        assert rep.metrics.failures_bsm == 1
        assert rep.metrics.successes == 0
        assert rep.metrics.retries == 1
        # retry parked at the source and was abandoned at the horizon
        assert rep.metrics.attempts == 2
        assert rep.metrics.abandoned == 1
        rep.metrics.check_conservation()

    def test_orphaned_slave_half_freed_after_fusion_failure(self):
        rep = quiet_replication(1, cells=10, duration_s=5.0, bsm_success_prob=0.0)
        inject_pair(rep, 0)
        inject_pair(rep, 1)
        drive(rep)
        link1 = rep.topo.links[1]
        slave = rep.pools[(link1.downstream, link1.link_id, Role.SLAVE)]
        assert slave.count(CellState.VALID) == 0
        assert slave.count(CellState.USED) == 0

    def test_overwritten_pair_fails_stale(self):
        # single-cell groups: a second pair overwrites the slave half while
        # the request is in flight, and is dropped on the locked master side
        rep = quiet_replication(1, cells=2, duration_s=5.0, bsm_success_prob=1.0)
        inject_pair(rep, 0)
        inject_pair(rep, 1)
        rep.engine.schedule(0.5 * LATENCY, "inject", lambda: inject_pair(rep, 0))
        drive(rep)
        assert rep.metrics.failures_stale == 1
        assert rep.metrics.successes == 0
        link0 = rep.topo.links[0]
        master = rep.pools[(link0.upstream, link0.link_id, Role.MASTER)]
        assert master.dropped == 1
        slave = rep.pools[(link0.downstream, link0.link_id, Role.SLAVE)]
        assert slave.overwritten == 1

    def test_late_delivery_is_abandoned_not_counted(self):
        # the request is still in flight when the horizon passes
        rep = quiet_replication(0, cells=4, duration_s=0.5 * LATENCY)
        inject_pair(rep, 0)
        drive(rep)
        assert rep.metrics.attempts == 1
        assert rep.metrics.successes == 0
        assert rep.metrics.failures == 0
        assert rep.metrics.abandoned == 1
        assert rep.metrics.throughput == 0.0


class TestWaiting:
    def test_parked_requests_resume_in_arrival_order(self):
        rep = quiet_replication(1, cells=10, duration_s=5.0, apps=2,
                                bsm_success_prob=1.0)
        rep.engine.schedule(1.0, "inject", lambda: inject_pair(rep, 0))
        rep.engine.schedule(1.0, "inject", lambda: inject_pair(rep, 1))
        rep.engine.schedule(2.0, "inject", lambda: inject_pair(rep, 0))
        rep.engine.schedule(2.0, "inject", lambda: inject_pair(rep, 1))
        drive(rep)
        assert rep.metrics.successes == 2
        first, second = rep.completed
        assert first.five_tuple.src_port == 0
        assert second.five_tuple.src_port == 1
        assert rep.metrics.waits_count == 2
        assert rep.metrics.wait_total_s == pytest.approx(3.0)
        assert rep.metrics.wait_max_s == pytest.approx(2.0)

    def test_intermediate_parks_until_downstream_pair(self):
        rep = quiet_replication(1, cells=10, duration_s=5.0, bsm_success_prob=1.0)
        inject_pair(rep, 0)
        rep.engine.schedule(1.0, "inject", lambda: inject_pair(rep, 1))
        drive(rep)
        assert rep.metrics.successes == 1
        attempt = rep.completed[0]
        # fusion waited for the downstream pair born at t=1
        assert attempt.swap_times[0] == 1.0 + rep.params.bsm_duration_s
        assert rep.metrics.waits_count == 1


class TestDrain:
    def test_drained_intermediate_park_frees_slave_and_reports(self):
        # upstream pair exists, downstream never arrives: the node parks
        # holding the locked upstream half until the horizon flushes it
        rep = quiet_replication(1, cells=10, duration_s=1.0, bsm_success_prob=1.0)
        inject_pair(rep, 0)
        drive(rep)
        assert rep.metrics.abandoned == 1
        assert rep.metrics.failures == 0
        for pool in rep.pools.values():
            assert pool.count(CellState.USED) == 0
        rep.metrics.check_conservation()

    def test_no_live_attempts_after_drain(self):
        rep = quiet_replication(2, cells=6, duration_s=1.0, apps=3,
                                bsm_success_prob=1.0)
        inject_pair(rep, 0)
        inject_pair(rep, 1)
        drive(rep)
        assert not rep.live
        assert rep.metrics.attempts == (rep.metrics.successes
                                        + rep.metrics.failures
                                        + rep.metrics.abandoned)


class TestBookkeeping:
    def test_duplicate_pair_claim_rejected(self):
        rep = quiet_replication(1, cells=4, duration_s=1.0)
        a = FiveTuple(0, 0, 2, 0, 0)
        b = FiveTuple(0, 1, 2, 1, 0)
        rep._claim(0, 0, a)
        rep._claim(0, 0, a)  # same owner may re-claim its own pair
        with pytest.raises(ProtocolError):
            rep._claim(0, 0, b)

    def test_duplicate_terminal_message_rejected(self):
        rep = quiet_replication(1, cells=4, duration_s=1.0)
        five = FiveTuple(0, 0, 2, 0, 0)
        rep.resolved_ids.add(five)
        with pytest.raises(ProtocolError):
            rep._take_live(five)


class TestFullReplication:
    def make_topo(self, **overrides):
        return build_chain(2, LINK_M, 10, make_params(**overrides))

    def test_seeded_run_is_reproducible(self):
        apps = make_applications(2)
        m1 = run_hopper_replication(self.make_topo(), apps, 3.0, seed=42)
        m2 = run_hopper_replication(self.make_topo(), apps, 3.0, seed=42)
        assert m1.successes == m2.successes
        assert m1.failures == m2.failures
        assert m1.abandoned == m2.abandoned
        assert m1.fidelity_sum == m2.fidelity_sum
        assert m1.pairs_generated == m2.pairs_generated
        assert m1.link_counters == m2.link_counters

    def test_different_seed_different_run(self):
        apps = make_applications(2)
        m1 = run_hopper_replication(self.make_topo(), apps, 3.0, seed=1)
        m2 = run_hopper_replication(self.make_topo(), apps, 3.0, seed=2)
        assert (m1.pairs_generated, m1.fidelity_sum) != (m2.pairs_generated,
                                                         m2.fidelity_sum)

    def test_trace_is_deterministic(self):
        apps = make_applications(1)
        runs = []
        for _ in range(2):
            lines = []
            topo = self.make_topo()
            HopperReplication(topo, apps, 2.0, seed=9,
                              trace=lines.append).run()
            runs.append(lines)
        assert runs[0] == runs[1]
        assert len(runs[0]) > 100

    def test_certain_fusion_never_fails_fusion(self):
        m = run_hopper_replication(self.make_topo(bsm_success_prob=1.0),
                                   make_applications(2), 3.0, seed=5)
        assert m.failures_bsm == 0
        assert m.successes > 0
        m.check_conservation()

    def test_delivered_fidelities_match_timeline_folds(self):
        topo = self.make_topo()
        rep = HopperReplication(topo, make_applications(2), 3.0, seed=11)
        rep.run()
        established = [a for a in rep.completed
                       if a.state is AttemptState.ESTABLISHED]
        assert len(established) > 10
        for attempt in established:
            assert attempt.delivered_fidelity == pytest.approx(
                refold_fidelity(rep, attempt), rel=1e-12)

    def test_all_fidelities_above_floor(self):
        topo = self.make_topo()
        rep = HopperReplication(topo, make_applications(3), 3.0, seed=13)
        m = rep.run()
        assert m.successes > 0
        for attempt in rep.completed:
            if attempt.delivered_fidelity is not None:
                assert 0.25 < attempt.delivered_fidelity < 1.0

    def test_pair_accounting_consistent(self):
        m = run_hopper_replication(self.make_topo(), make_applications(2),
                                   3.0, seed=21)
        assert m.pairs_generated > 0
        # both sides of every link saw every pair
        assert m.pairs_stored + m.pairs_overwritten + m.pairs_dropped \
            == 2 * m.pairs_generated
        for (link_id, side), (generated, stored, over, dropped) in \
                m.link_counters.items():
            assert stored + over + dropped == generated

    def test_single_link_chain_runs(self):
        topo = build_chain(0, LINK_M, 10, make_params())
        m = run_hopper_replication(topo, make_applications(1), 3.0, seed=3)
        assert m.successes > 0
        assert m.failures_bsm == 0  # no fusions on a single link
        m.check_conservation()
