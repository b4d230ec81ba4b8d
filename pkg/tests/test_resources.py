from fractions import Fraction

import pytest

from gslsim.engine import Engine, EventKind
from gslsim.resources import (AllocClass, Channel, Denied, MemoryLedger,
                              mb_to_umb, round_up_umb, umb_to_mb)

from fluid_oracle import simulate_fluid_ps

MB = 1_000_000


def start_transfer(channel, done, size_mb, label=None):
    return channel.begin_transfer(
        mb_to_umb(size_mb),
        on_complete=lambda t, now: done.append((label or t.id, now)))


def test_two_symmetric_transfers_split_bandwidth_evenly():
    eng = Engine()
    ch = Channel(eng, "host", 1000)
    done = []
    start_transfer(ch, done, 1000, "a")
    start_transfer(ch, done, 1000, "b")
    eng.run()
    assert done == [("a", 2_000_000), ("b", 2_000_000)]


def test_late_joiner_fluid_closed_form():
    # 1000 MB at t=0, second 1000 MB joins at t=0.5 s on 1000 MB/s:
    # first completes at 1.5 s, second at 2.0 s
    eng = Engine()
    ch = Channel(eng, "host", 1000)
    done = []
    start_transfer(ch, done, 1000, "first")
    eng.schedule(500_000, EventKind.GENERATOR_TICK,
                 lambda p: start_transfer(ch, done, 1000, "second"))
    eng.run()
    assert done == [("first", 1_500_000), ("second", 2_000_000)]


def test_solo_pcie_load_matches_calibration():
    # 109.6 MB over the 5051 MB/s PCIe channel: 21.7 ms
    eng = Engine()
    ch = Channel(eng, "pcie", 5051)
    done = []
    start_transfer(ch, done, 109.6)
    eng.run()
    assert done[0][1] == 21_699  # us, ceil of the exact rational instant
    assert abs(done[0][1] / 1000 - 21.7) < 0.1


def test_solo_host_load_matches_calibration():
    eng = Engine()
    ch = Channel(eng, "host", 1631)
    done = []
    start_transfer(ch, done, 109.6)
    eng.run()
    assert abs(done[0][1] / 1000 - 67.2) < 0.1


def test_membership_increase_doubles_remaining_time():
    eng = Engine()
    ch = Channel(eng, "host", 1000)
    t1 = ch.begin_transfer(mb_to_umb(100))
    est_solo = ch.estimated_completion_us(t1)
    ch.begin_transfer(mb_to_umb(500))
    assert ch.estimated_completion_us(t1) == est_solo * 2


def test_membership_decrease_halves_remaining_time():
    eng = Engine()
    ch = Channel(eng, "host", 1000)
    done = []
    start_transfer(ch, done, 100, "short")
    t2 = ch.begin_transfer(mb_to_umb(1000))
    # under equal share the 100 MB transfer drains at t=200 ms
    eng.run(until=200_000)
    assert done and done[0] == ("short", 200_000)
    # t2 then holds 900 MB and the per-transfer rate doubles to full bandwidth
    assert ch.estimated_completion_us(t2) == Fraction(200_000 + 900_000)


def test_n_simultaneous_equal_transfers_take_n_times_solo():
    for n in (2, 3, 5):
        eng = Engine()
        ch = Channel(eng, "host", 1000)
        done = []
        for i in range(n):
            start_transfer(ch, done, 100, i)
        eng.run()
        assert [t for _, t in done] == [100_000 * n] * n


def test_zero_or_negative_transfer_size_rejected():
    eng = Engine()
    ch = Channel(eng, "host", 1000)
    with pytest.raises(ValueError):
        ch.begin_transfer(0)


def test_work_conservation_is_exact_over_random_scenarios():
    import numpy as np
    rng = np.random.default_rng(1234)
    for _ in range(50):
        eng = Engine()
        bw = int(rng.integers(100, 6000))
        ch = Channel(eng, "host", bw)
        n = int(rng.integers(1, 11))
        total = 0
        for _ in range(n):
            size = int(rng.integers(1, 200 * MB))
            total += size
            at = int(rng.integers(0, 300_000))
            eng.schedule(at, EventKind.GENERATOR_TICK,
                         lambda p, s=size: ch.begin_transfer(s))
        eng.run()
        # all bytes delivered, and bandwidth x busy-time of them to within
        # the 1e-6 MB fixed-point tolerance (completed sizes stay exact)
        assert ch.delivered_completed_umb == total
        assert abs(ch.delivered_total_umb - Fraction(bw) * ch.busy_time_us) <= 1


def test_event_times_match_time_stepped_oracle():
    import numpy as np
    rng = np.random.default_rng(99)
    for _ in range(60):
        bw = int(rng.integers(200, 4000))
        n = int(rng.integers(1, 11))
        transfers = [(int(rng.integers(0, 200)), float(rng.integers(1, 50)))
                     for _ in range(n)]
        oracle = simulate_fluid_ps(bw, transfers)
        eng = Engine()
        ch = Channel(eng, "host", bw)
        done = {}
        for i, (arr_ms, size_mb) in enumerate(transfers):
            eng.schedule(arr_ms * 1000, EventKind.GENERATOR_TICK,
                         lambda p, i=i, s=size_mb: done.__setitem__(
                             i, ch.begin_transfer(mb_to_umb(s),
                                                  on_complete=lambda t, now, i=i: done.__setitem__(i, now))))
        eng.run()
        for i in range(n):
            assert abs(done[i] / 1000 - oracle[i]) <= 2.0, (transfers, bw)


# -- memory ledger ----------------------------------------------------------


def test_rounding_rule_at_1gb_granularity():
    ledger = MemoryLedger("gpu0", 40960, granularity_mb=1024)
    assert ledger.effective_umb(mb_to_umb(523.6)) == mb_to_umb(1024)
    assert ledger.effective_umb(mb_to_umb(1756.6)) == mb_to_umb(2048)


def test_rounding_rule_at_1mb_granularity():
    ledger = MemoryLedger("gpu0", 40960, granularity_mb=1)
    assert ledger.effective_umb(mb_to_umb(523.6)) == mb_to_umb(524)


def test_exact_granularity_keeps_fractional_sizes():
    ledger = MemoryLedger("gpu0", 40960)
    a = ledger.try_alloc(mb_to_umb(523.6), AllocClass.CONTEXT)
    assert a.effective_umb == mb_to_umb(523.6)


def test_rounding_is_least_multiple_not_less_than_size():
    import numpy as np
    rng = np.random.default_rng(5)
    for _ in range(200):
        size = int(rng.integers(1, 10_000 * MB))
        gran = int(rng.integers(1, 3000)) * MB
        eff = round_up_umb(size, gran)
        assert eff >= size and eff % gran == 0 and eff - gran < size


def test_alloc_free_restores_usage():
    ledger = MemoryLedger("gpu0", 1000)
    before = ledger.usage_umb
    a = ledger.try_alloc(mb_to_umb(100), AllocClass.WRITABLE)
    assert ledger.usage_umb == before + mb_to_umb(100)
    ledger.free(a)
    assert ledger.usage_umb == before


def test_double_free_errors():
    from gslsim.engine import SimulationError
    ledger = MemoryLedger("gpu0", 1000)
    a = ledger.try_alloc(mb_to_umb(10), AllocClass.WRITABLE)
    ledger.free(a)
    with pytest.raises(SimulationError):
        ledger.free(a)


def test_denied_carries_shortfall_and_retry_succeeds_after_free():
    ledger = MemoryLedger("gpu0", 1000)
    a = ledger.try_alloc(mb_to_umb(900), AllocClass.WRITABLE)
    denied = ledger.try_alloc(mb_to_umb(200), AllocClass.WRITABLE)
    assert isinstance(denied, Denied)
    assert denied.shortfall_umb == mb_to_umb(100)
    ledger.free(a)
    assert not isinstance(ledger.try_alloc(mb_to_umb(200), AllocClass.WRITABLE), Denied)


def test_usage_never_exceeds_capacity_under_random_churn():
    import numpy as np
    rng = np.random.default_rng(77)
    ledger = MemoryLedger("gpu0", 4096, granularity_mb=64)
    live = []
    for _ in range(500):
        if live and rng.random() < 0.45:
            ledger.free(live.pop(int(rng.integers(0, len(live)))))
        else:
            got = ledger.try_alloc(int(rng.integers(1, 900 * MB)), AllocClass.WRITABLE)
            if not isinstance(got, Denied):
                live.append(got)
        assert ledger.usage_umb <= ledger.capacity_umb
    for a in live:
        ledger.free(a)
    assert ledger.usage_umb == 0


def test_unlimited_ledger_never_denies():
    ledger = MemoryLedger("cpu", None)
    for _ in range(10):
        assert not isinstance(ledger.try_alloc(mb_to_umb(100000), AllocClass.READ_ONLY), Denied)


def test_umb_mb_roundtrip():
    assert mb_to_umb(97.7) == 97_700_000
    assert umb_to_mb(97_700_000) == 97.7
