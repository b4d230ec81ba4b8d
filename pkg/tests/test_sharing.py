import pytest

from gslsim.engine import Engine, SimulationError, s_to_us
from gslsim.functions import WarmthClass, builtin_spec_table
from gslsim.resources import AllocClass, MemoryLedger, mb_to_umb
from gslsim.sharing import ResidentState, SharingManager

S = s_to_us(1.0)


def make_manager(eng, ro_sharing=True, ctx_sharing=True, multi_stage=True,
                 keep_alive_s=0.0, gpu_mem_mb=40960):
    gpu = MemoryLedger("gpu0", gpu_mem_mb)
    cpu = MemoryLedger("cpu", None)
    mgr = SharingManager(eng, [gpu], cpu, ro_sharing=ro_sharing,
                         ctx_sharing=ctx_sharing, multi_stage_exit=multi_stage,
                         keep_alive_s=keep_alive_s)
    return mgr, gpu, cpu


RESNET = builtin_spec_table()["resnet50"]
LBM = builtin_spec_table()["lbm"]


def test_concurrent_admission_grants_hot_sharing():
    eng = Engine()
    mgr, gpu, _ = make_manager(eng)
    g1 = mgr.admit(RESNET, 0)
    assert g1.warmth is WarmthClass.COLD and g1.leader_ro and g1.leader_ctx
    g2 = mgr.admit(RESNET, 0)
    assert g2.warmth is WarmthClass.STAGE1_HOT
    assert g2.shared_ro and g2.shared_ctx
    assert g2.wait_ro and g2.wait_ctx  # leader still loading
    g1.resident.ro_token.set_ready(0)
    g1.resident.ctx_token.set_ready(0)
    g3 = mgr.admit(RESNET, 0)
    assert g3.warmth is WarmthClass.STAGE1_HOT and not g3.wait_ro and not g3.wait_ctx


def test_window_classification_15s_and_125s():
    eng = Engine()
    mgr, _, _ = make_manager(eng)
    g = mgr.admit(RESNET, 0)
    g.resident.ro_token.set_ready(0)
    g.resident.ctx_token.set_ready(0)
    mgr.release("resnet50", 0)
    eng.run(until=15 * S)
    assert mgr.preview(RESNET, 0).warmth is WarmthClass.STAGE1_HOT
    g2 = mgr.admit(RESNET, 0)
    assert g2.warmth is WarmthClass.STAGE1_HOT
    mgr.release("resnet50", 0)
    eng.run(until=eng.now + 125 * S)
    assert mgr.preview(RESNET, 0).warmth is WarmthClass.COLD


def test_release_refcount_and_timer():
    eng = Engine()
    mgr, _, _ = make_manager(eng)
    for _ in range(3):
        mgr.admit(RESNET, 0)
    r = mgr.residents[("resnet50", 0)]
    mgr.release("resnet50", 0)
    assert r.state is ResidentState.ACTIVE and r.active_count == 2 and r.exit_timer is None
    mgr.release("resnet50", 0)
    mgr.release("resnet50", 0)
    assert r.state is ResidentState.STAGE1
    assert r.exit_timer is not None and r.exit_timer.time == 30 * S


def test_release_without_active_errors():
    eng = Engine()
    mgr, _, _ = make_manager(eng)
    with pytest.raises(SimulationError):
        mgr.release("resnet50", 0)
    mgr.admit(RESNET, 0)
    mgr.release("resnet50", 0)
    with pytest.raises(SimulationError):
        mgr.release("resnet50", 0)  # already decaying


def test_stage_transitions_free_expected_gpu_bytes():
    eng = Engine()
    mgr, gpu, cpu = make_manager(eng)
    mgr.admit(RESNET, 0)
    mgr.release("resnet50", 0)
    assert gpu.usage_umb == mb_to_umb(414) + mb_to_umb(97.7)
    eng.run(until=31 * S)  # Stage1 -> Stage2 frees the 97.7 MB RO block
    assert gpu.usage_umb == mb_to_umb(414)
    assert cpu.usage_umb == mb_to_umb(97.7)  # cached to host memory
    eng.run(until=61 * S)  # Stage2 -> Stage3 frees the 414 MB context
    assert gpu.usage_umb == 0
    eng.run(until=91 * S)  # Stage3 -> Stage4 drops the CPU cache
    assert cpu.usage_umb == 0
    r = mgr.residents[("resnet50", 0)]
    assert r.state is ResidentState.STAGE4 and r.container_held and not r.cpu_ctx_held
    eng.run(until=121 * S)
    assert ("resnet50", 0) not in mgr.residents


def test_lbm_stage1_to_stage2_frees_nothing_on_gpu():
    eng = Engine()
    mgr, gpu, cpu = make_manager(eng)
    mgr.admit(LBM, 0)
    mgr.release("lbm", 0)
    assert gpu.usage_umb == mb_to_umb(414)  # context only, no RO block
    eng.run(until=31 * S)
    assert gpu.usage_umb == mb_to_umb(414)
    assert cpu.usage_umb == 0  # nothing read-only to cache


def test_full_decay_timeline_is_120s():
    eng = Engine()
    mgr, _, _ = make_manager(eng)
    mgr.admit(RESNET, 0)
    mgr.release("resnet50", 0)
    eng.run()
    assert eng.now == 120 * S
    assert not mgr.residents


def test_admission_mid_decay_cancels_timer_and_reuses_state():
    eng = Engine()
    mgr, gpu, _ = make_manager(eng)
    mgr.admit(RESNET, 0)
    mgr.release("resnet50", 0)
    eng.run(until=45 * S)  # now in Stage2: ctx held, RO dropped
    p = mgr.preview(RESNET, 0)
    assert p.warmth is WarmthClass.STAGE2
    assert p.alloc_resident_ro_umb == RESNET.ro_umb and p.alloc_resident_ctx_umb == 0
    g = mgr.admit(RESNET, 0)
    r = g.resident
    assert g.leader_ro and not g.leader_ctx and g.shared_ctx
    assert r.state is ResidentState.ACTIVE and r.exit_timer is None
    assert gpu.usage_umb == mb_to_umb(414) + mb_to_umb(97.7)
    mgr.check_consistency()


def test_resident_memory_closed_forms():
    eng = Engine()
    mgr, gpu, _ = make_manager(eng)
    mgr.admit(RESNET, 0)
    by_class = mgr.resident_memory_umb(0)
    assert by_class[AllocClass.CONTEXT] == mb_to_umb(414)
    assert by_class[AllocClass.READ_ONLY] == mb_to_umb(97.7)
    # writable allocations belong to the invocations (policy side); with three
    # actives and full sharing the shared blocks are counted once
    mgr.admit(RESNET, 0)
    mgr.admit(RESNET, 0)
    by_class = mgr.resident_memory_umb(0)
    assert by_class[AllocClass.CONTEXT] + by_class[AllocClass.READ_ONLY] == mb_to_umb(511.7)


def test_stage3_resident_holds_no_gpu_memory():
    eng = Engine()
    mgr, gpu, _ = make_manager(eng)
    mgr.admit(RESNET, 0)
    mgr.release("resnet50", 0)
    eng.run(until=75 * S)
    assert mgr.residents[("resnet50", 0)].state is ResidentState.STAGE3
    assert gpu.usage_umb == 0


def test_ro_sharing_disabled_downgrades_to_stage2():
    eng = Engine()
    mgr, gpu, _ = make_manager(eng, ro_sharing=False)
    g1 = mgr.admit(RESNET, 0)
    assert g1.warmth is WarmthClass.COLD
    assert not g1.leader_ro  # no shared RO block is ever created
    assert gpu.usage_umb == mb_to_umb(414)  # context only
    g2 = mgr.admit(RESNET, 0)
    assert g2.warmth is WarmthClass.STAGE2  # ctx shared, RO re-transferred
    mgr.check_consistency()


def test_ctx_sharing_disabled_downgrades_to_stage3():
    eng = Engine()
    mgr, _, _ = make_manager(eng, ro_sharing=False, ctx_sharing=False)
    mgr.admit(RESNET, 0)
    g2 = mgr.admit(RESNET, 0)
    assert g2.warmth is WarmthClass.STAGE3  # only the CPU side is reusable
    mgr.check_consistency()


def test_no_retention_evicts_at_release():
    eng = Engine()
    mgr, gpu, _ = make_manager(eng, ro_sharing=False, ctx_sharing=False,
                               multi_stage=False)
    mgr.admit(RESNET, 0)
    mgr.release("resnet50", 0)
    assert not mgr.residents and gpu.usage_umb == 0
    assert mgr.preview(RESNET, 0).warmth is WarmthClass.COLD


def test_flat_keep_alive_holds_everything_then_evicts():
    eng = Engine()
    mgr, gpu, _ = make_manager(eng, multi_stage=False, keep_alive_s=10)
    mgr.admit(RESNET, 0)
    mgr.release("resnet50", 0)
    eng.run(until=9 * S)
    assert mgr.preview(RESNET, 0).warmth is WarmthClass.STAGE1_HOT
    eng.run()
    assert eng.now == 10 * S and not mgr.residents and gpu.usage_umb == 0


def test_force_demote_frees_staged_memory_most_decayed_first():
    eng = Engine()
    mgr, gpu, _ = make_manager(eng, gpu_mem_mb=2000)
    mgr.admit(RESNET, 0)
    mgr.release("resnet50", 0)
    bert = builtin_spec_table()["bert"]
    eng.run(until=1 * S)
    # bert needs 414 + 1282.5 + 60.1 = 1756.6 MB; only 1488.3 MB free
    need = bert.context_umb + bert.ro_umb + bert.writable_umb
    assert not gpu.fits(need)
    assert mgr.force_demote(0, need, exclude_fn="bert")
    assert gpu.fits(need)
    r = mgr.residents[("resnet50", 0)]
    assert r.state in (ResidentState.STAGE2, ResidentState.STAGE3)
    mgr.check_consistency()


def test_force_demote_gives_up_when_only_actives_hold_memory():
    eng = Engine()
    mgr, gpu, _ = make_manager(eng, gpu_mem_mb=1000)
    mgr.admit(RESNET, 0)  # active, must not be demoted
    assert not mgr.force_demote(0, mb_to_umb(900), exclude_fn="bert")


def test_per_stage_intervals_are_configurable():
    eng = Engine()
    gpu = MemoryLedger("gpu0", 40960)
    cpu = MemoryLedger("cpu", None)
    mgr = SharingManager(eng, [gpu], cpu, ro_sharing=True, ctx_sharing=True,
                         multi_stage_exit=True,
                         stage_intervals_s=(10, 20, 30, 40))
    mgr.admit(RESNET, 0)
    mgr.release("resnet50", 0)
    r = mgr.residents[("resnet50", 0)]
    for expect_state, fire_at in ((ResidentState.STAGE2, 10 * S),
                                  (ResidentState.STAGE3, 30 * S),
                                  (ResidentState.STAGE4, 60 * S)):
        eng.run(until=fire_at)
        assert r.state is expect_state, (r.state, fire_at)
    eng.run()
    assert eng.now == 100 * S and not mgr.residents


def test_warmth_window_classification_is_exact_for_random_gaps():
    import numpy as np
    rng = np.random.default_rng(2024)
    eng = Engine()
    mgr, _, _ = make_manager(eng)
    for _ in range(200):
        g = mgr.admit(RESNET, 0)
        if g.resident.ro_token and not g.resident.ro_token.ready:
            g.resident.ro_token.set_ready(eng.now)
        if g.resident.ctx_token and not g.resident.ctx_token.ready:
            g.resident.ctx_token.set_ready(eng.now)
        mgr.release("resnet50", 0)
        released_at = eng.now
        gap = int(rng.integers(0, 150 * S))
        eng.run(until=released_at + gap)
        got = mgr.preview(RESNET, 0).warmth
        window = gap // (30 * S)
        expected = {0: WarmthClass.STAGE1_HOT, 1: WarmthClass.STAGE2,
                    2: WarmthClass.STAGE3, 3: WarmthClass.STAGE4}.get(window, WarmthClass.COLD)
        assert got is expected, (gap, got, expected)
        # clean slate for the next draw
        g = mgr.admit(RESNET, 0)
        if g.resident.ro_token and not g.resident.ro_token.ready:
            g.resident.ro_token.set_ready(eng.now)
        if g.resident.ctx_token and not g.resident.ctx_token.ready:
            g.resident.ctx_token.set_ready(eng.now)
        mgr.release("resnet50", 0)
        eng.run(until=eng.now + 130 * S)
        assert not mgr.residents
