import pytest

from flowmob.pmip import (
    AlreadyAttached,
    LmaBindings,
    MagBindings,
    MessageKind,
    NoBinding,
    PmipError,
)


def attach(lma, mag, mn_id, iface=2, hints=(), now=0.0):
    pbu = mag.on_attach(mn_id, iface, now, hints)
    pba = lma.handle_pbu(pbu, now)
    mag.on_pba(pba)
    return pba


class TestAttach:
    def test_first_attach_emits_pbu(self):
        mag = MagBindings(1)
        pbu = mag.on_attach(7, 2, now=0.0)
        assert pbu.kind is MessageKind.PBU
        assert pbu.mn_id == 7
        assert pbu.seq is not None

    def test_duplicate_attach_raises(self):
        mag = MagBindings(1)
        mag.on_attach(7, 2, now=0.0)
        with pytest.raises(AlreadyAttached):
            mag.on_attach(7, 2, now=1.0)

    def test_attach_with_pending_flow_carries_hint(self):
        mag = MagBindings(1)
        pbu = mag.on_attach(7, 2, now=0.0, hint_flows=(1,))
        assert pbu.flow_ids == (1,)


class TestHnpAssignment:
    def test_new_binding_gets_fresh_hnp(self):
        lma = LmaBindings()
        mag = MagBindings(1)
        pba = attach(lma, mag, 7)
        assert pba.hnp_list == ["HNP1"]
        assert (7, 1) in lma.bces

    def test_established_flow_keeps_hnp_on_new_interface(self):
        lma = LmaBindings()
        mag1, mag2 = MagBindings(1), MagBindings(2)
        attach(lma, mag1, 7)
        lma.establish_flow(7, 1, 1)
        hnp = lma.flow_hnp[(7, 1)]
        pba = attach(lma, mag2, 7, iface=1, hints=(1,))
        assert hnp in pba.hnp_list
        assert lma.flow_hnp[(7, 1)] == hnp

    def test_reregistration_refreshes_lifetime_same_hnp(self):
        lma = LmaBindings(lifetime=100.0)
        mag = MagBindings(1)
        first = attach(lma, mag, 7, now=0.0)
        pbu = mag.refresh(7, now=50.0)
        pba = lma.handle_pbu(pbu, now=50.0)
        mag.on_pba(pba)
        assert pba.hnp_list == first.hnp_list
        assert lma.bces[(7, 1)].refreshed_at == 50.0

    def test_pba_answers_matching_pbu(self):
        lma = LmaBindings()
        mag = MagBindings(1)
        pbu = mag.on_attach(7, 2, now=0.0)
        pba = lma.handle_pbu(pbu, 0.0)
        assert pba.seq == pbu.seq
        mag.on_pba(pba)
        assert not mag.pending_pbus

    def test_unmatched_pba_rejected(self):
        mag = MagBindings(1)
        mag.on_attach(7, 2, now=0.0)
        lma = LmaBindings()
        pba = lma.handle_pbu(mag.pending_pbus[1], 0.0)
        pba.seq = 99
        with pytest.raises(PmipError):
            mag.on_pba(pba)


class TestDownlinkRouting:
    def test_single_holder(self):
        lma = LmaBindings()
        mag = MagBindings(1)
        attach(lma, mag, 7)
        hnp = lma.bces[(7, 1)].hnp_list[0]
        tunnel, mag_id = lma.route_downlink(hnp, 7)
        assert mag_id == 1
        assert tunnel == lma.bces[(7, 1)].tunnel_id

    def test_flow_preference_picks_among_holders(self):
        lma = LmaBindings()
        mag1, mag100 = MagBindings(1), MagBindings(100)
        attach(lma, mag1, 7)
        lma.establish_flow(7, 1, 1)
        attach(lma, mag100, 7, iface=1, hints=(1,))
        hnp = lma.flow_hnp[(7, 1)]
        # both bindings now hold the prefix; the flow's routing choice wins
        _, mag_id = lma.route_downlink(hnp, 7, flow_id=1)
        assert mag_id == 100
        lma.flow_bind[(7, 1)] = lma.bces[(7, 1)].bind_id
        _, mag_id = lma.route_downlink(hnp, 7, flow_id=1)
        assert mag_id == 1

    def test_unknown_hnp_is_no_binding(self):
        lma = LmaBindings()
        with pytest.raises(NoBinding):
            lma.route_downlink("HNP9", 7)


class TestExpiry:
    def test_nothing_expired(self):
        lma = LmaBindings(lifetime=100.0)
        mag = MagBindings(1)
        attach(lma, mag, 7, now=0.0)
        assert lma.expire(now=50.0) == []

    def test_expired_entry_removed_with_tunnel(self):
        lma = LmaBindings(lifetime=100.0)
        mag = MagBindings(1)
        attach(lma, mag, 7, now=0.0)
        tunnel = lma.bces[(7, 1)].tunnel_id
        removed = lma.expire(now=100.0)
        assert len(removed) == 1
        assert (7, 1) not in lma.bces
        assert tunnel not in lma.live_tunnels()

    def test_expiry_of_only_binding_breaks_downlink(self):
        lma = LmaBindings(lifetime=100.0)
        mag = MagBindings(1)
        attach(lma, mag, 7, now=0.0)
        lma.establish_flow(7, 2, 1)
        hnp = lma.flow_hnp[(7, 2)]
        lma.expire(now=200.0)
        with pytest.raises(NoBinding):
            lma.route_downlink(hnp, 7, flow_id=2)

    def test_expiry_falls_back_to_other_holder(self):
        lma = LmaBindings(lifetime=100.0)
        mag1, mag100 = MagBindings(1), MagBindings(100)
        attach(lma, mag1, 7, now=0.0)
        lma.establish_flow(7, 1, 1)
        attach(lma, mag100, 7, iface=1, hints=(1,), now=90.0)
        lma.flow_bind[(7, 1)] = lma.bces[(7, 1)].bind_id
        lma.expire(now=100.0)  # mag1's entry dies, mag100's lives
        assert (7, 1) not in lma.bces
        _, mag_id = lma.route_downlink(lma.flow_hnp[(7, 1)], 7, flow_id=1)
        assert mag_id == 100


class TestInvariants:
    def test_hnp_stable_across_rehoming(self):
        lma = LmaBindings()
        mag1, mag2 = MagBindings(1), MagBindings(2)
        attach(lma, mag1, 7)
        lma.establish_flow(7, 1, 1)
        hnp = lma.flow_hnp[(7, 1)]
        attach(lma, mag2, 7, hints=(1,))
        lma.rehome_flow(7, 1, 1)
        lma.rehome_flow(7, 1, 2)
        assert lma.flow_hnp[(7, 1)] == hnp
        assert hnp in lma.bces[(7, 1)].hnp_list
        assert hnp in lma.bces[(7, 2)].hnp_list

    def test_bce_keys_unique_per_mn_and_mag(self):
        lma = LmaBindings()
        mag = MagBindings(1)
        attach(lma, mag, 7)
        pbu = mag.refresh(7, now=1.0)
        lma.handle_pbu(pbu, 1.0)
        assert len([k for k in lma.bces if k == (7, 1)]) == 1

    def test_tunnel_iff_live_bce(self):
        lma = LmaBindings(lifetime=10.0)
        mag = MagBindings(1)
        attach(lma, mag, 7, now=0.0)
        assert lma.live_tunnels() == {lma.bces[(7, 1)].tunnel_id}
        lma.expire(now=20.0)
        assert lma.live_tunnels() == set()

    def test_dump_lines_format(self):
        lma = LmaBindings()
        mag = MagBindings(1)
        attach(lma, mag, 7)
        lines = lma.dump_lines(now=1.0)
        assert len(lines) == 1
        assert "mn=7" in lines[0] and "mag=1" in lines[0] and "HNP1" in lines[0]
