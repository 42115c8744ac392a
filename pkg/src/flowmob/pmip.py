"""Network-based mobility machinery: attachment signalling, prefix
assignment, binding cache, and gateway-anchor tunnels.

The anchor (LMA) assigns home network prefixes and keeps one binding cache
entry per attached interface of a terminal, keyed by (mn_id, serving
gateway).  A prefix assigned to a flow never changes afterwards; moving the
flow re-homes the prefix onto the target gateway's entry instead.  Prefixes
are opaque ``HNP<k>`` identifiers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum


class PmipError(Exception):
    pass


class AlreadyAttached(PmipError):
    pass


class NoBinding(PmipError):
    pass


class MessageKind(Enum):
    PBU = "pbu"
    PBA = "pba"
    FLOW_MOVE_REQUEST = "flow_move_request"
    FLOW_MOVE_CANDIDATES = "flow_move_candidates"
    FLOW_MOVE_COMMIT = "flow_move_commit"
    FLOW_MOVE_ACK = "flow_move_ack"
    MN_NOTIFY = "mn_notify"


@dataclass
class PmipMessage:
    kind: MessageKind
    src: str
    dst: str
    mn_id: int | None = None
    seq: int | None = None
    hnp_list: list[str] = field(default_factory=list)
    flow_ids: tuple[int, ...] = ()
    payload: dict = field(default_factory=dict)


@dataclass
class BindingCacheEntry:
    mn_id: int
    hnp_list: list[str]
    serving_mag: int
    tunnel_id: int
    lifetime: float
    bind_id: int
    refreshed_at: float = 0.0

    def expired(self, now: float) -> bool:
        return now - self.refreshed_at >= self.lifetime


class MagBindings:
    """Gateway-side attachment state: one record per attached terminal."""

    def __init__(self, mag_id: int):
        self.mag_id = mag_id
        self.attachments: dict[int, dict] = {}
        self._seq = itertools.count(1)
        self.pending_pbus: dict[int, PmipMessage] = {}

    def on_attach(
        self,
        mn_id: int,
        interface_id: int,
        now: float,
        hint_flows: tuple[int, ...] = (),
    ) -> PmipMessage:
        """Terminal attachment detected: emit the binding update.

        ``hint_flows`` lists flows expected to hand over onto this
        attachment, asking the anchor to re-home their existing prefixes.
        Raises :class:`AlreadyAttached` on duplicate attachment.
        """
        if mn_id in self.attachments:
            raise AlreadyAttached((mn_id, self.mag_id))
        self.attachments[mn_id] = {
            "interface_id": interface_id,
            "hnp_list": [],
            "bind_id": None,
            "tunnel_id": None,
            "attached_at": now,
        }
        seq = next(self._seq)
        pbu = PmipMessage(
            kind=MessageKind.PBU,
            src=f"mag{self.mag_id}",
            dst="lma",
            mn_id=mn_id,
            seq=seq,
            flow_ids=tuple(hint_flows),
            payload={"interface_id": interface_id, "mag_id": self.mag_id},
        )
        self.pending_pbus[seq] = pbu
        return pbu

    def refresh(self, mn_id: int, now: float) -> PmipMessage:
        """Re-registration for an existing attachment (lifetime refresh)."""
        if mn_id not in self.attachments:
            raise NoBinding((mn_id, self.mag_id))
        seq = next(self._seq)
        pbu = PmipMessage(
            kind=MessageKind.PBU,
            src=f"mag{self.mag_id}",
            dst="lma",
            mn_id=mn_id,
            seq=seq,
            payload={
                "interface_id": self.attachments[mn_id]["interface_id"],
                "mag_id": self.mag_id,
                "refresh": True,
            },
        )
        self.pending_pbus[seq] = pbu
        return pbu

    def on_pba(self, pba: PmipMessage) -> dict:
        """Apply the anchor's acknowledgement; returns the attachment record."""
        if pba.seq not in self.pending_pbus:
            raise PmipError(f"PBA with unknown seq {pba.seq}")
        del self.pending_pbus[pba.seq]
        record = self.attachments[pba.mn_id]
        record["hnp_list"] = list(pba.hnp_list)
        record["bind_id"] = pba.payload.get("bind_id")
        record["tunnel_id"] = pba.payload.get("tunnel_id")
        return record

    def detach(self, mn_id: int) -> None:
        self.attachments.pop(mn_id, None)


class LmaBindings:
    """Anchor-side binding cache and prefix registry."""

    def __init__(self, lifetime: float = 300.0):
        self.lifetime = lifetime
        self.bces: dict[tuple[int, int], BindingCacheEntry] = {}
        self.flow_hnp: dict[tuple[int, int], str] = {}
        # Routing choice per flow: the bind_id currently carrying it.
        self.flow_bind: dict[tuple[int, int], int] = {}
        self._hnp_counter = itertools.count(1)
        self._bind_counter = itertools.count(1)
        self._tunnel_counter = itertools.count(1)

    def _new_hnp(self) -> str:
        return f"HNP{next(self._hnp_counter)}"

    def handle_pbu(self, pbu: PmipMessage, now: float) -> PmipMessage:
        """Create or refresh the binding cache entry and answer with the
        prefix assignment.

        A hint for an established flow re-homes that flow's existing prefix
        onto this binding; otherwise a fresh prefix is allocated for a new
        binding.  Re-registration refreshes the lifetime and repeats the
        prefixes already assigned.
        """
        mag_id = pbu.payload["mag_id"]
        key = (pbu.mn_id, mag_id)
        bce = self.bces.get(key)
        if bce is None:
            bce = BindingCacheEntry(
                mn_id=pbu.mn_id,
                hnp_list=[self._new_hnp()],
                serving_mag=mag_id,
                tunnel_id=next(self._tunnel_counter),
                lifetime=self.lifetime,
                bind_id=next(self._bind_counter),
                refreshed_at=now,
            )
            self.bces[key] = bce
        else:
            bce.refreshed_at = now
        for flow_key in self._hinted_flows(pbu):
            hnp = self.flow_hnp.get(flow_key)
            if hnp is None:
                # Flow not established yet: its prefix is this binding's.
                self.flow_hnp[flow_key] = bce.hnp_list[0]
            elif hnp not in bce.hnp_list:
                bce.hnp_list.append(hnp)
            self.flow_bind[flow_key] = bce.bind_id
        return PmipMessage(
            kind=MessageKind.PBA,
            src="lma",
            dst=pbu.src,
            mn_id=pbu.mn_id,
            seq=pbu.seq,
            hnp_list=list(bce.hnp_list),
            flow_ids=pbu.flow_ids,
            payload={"bind_id": bce.bind_id, "tunnel_id": bce.tunnel_id},
        )

    @staticmethod
    def _hinted_flows(pbu: PmipMessage):
        return [(pbu.mn_id, fid) for fid in pbu.flow_ids]

    def establish_flow(self, mn_id: int, flow_id: int, mag_id: int) -> str:
        """Pin a flow's prefix to its first observed binding."""
        key = (mn_id, flow_id)
        if key not in self.flow_hnp:
            bce = self.bces.get((mn_id, mag_id))
            if bce is None:
                raise NoBinding((mn_id, mag_id))
            self.flow_hnp[key] = bce.hnp_list[0]
            self.flow_bind[key] = bce.bind_id
        return self.flow_hnp[key]

    def rehome_flow(self, mn_id: int, flow_id: int, target_mag: int) -> None:
        """Move a flow's prefix onto the target gateway's binding (the
        prefix itself never changes)."""
        key = (mn_id, flow_id)
        bce = self.bces.get((mn_id, target_mag))
        if bce is None:
            raise NoBinding((mn_id, target_mag))
        hnp = self.flow_hnp.get(key)
        if hnp is None:
            self.establish_flow(mn_id, flow_id, target_mag)
            return
        if hnp not in bce.hnp_list:
            bce.hnp_list.append(hnp)
        self.flow_bind[key] = bce.bind_id

    def bce_for_bind(self, bind_id: int) -> BindingCacheEntry | None:
        for bce in self.bces.values():
            if bce.bind_id == bind_id:
                return bce
        return None

    def route_downlink(self, hnp: str, mn_id: int, flow_id: int | None = None):
        """Pick the tunnel for a packet addressed to ``hnp``.

        When several bindings hold the prefix, the flow's current routing
        choice decides.  Raises :class:`NoBinding` when no live entry holds
        the prefix.
        """
        holders = [
            bce
            for (mn, _), bce in self.bces.items()
            if mn == mn_id and hnp in bce.hnp_list
        ]
        if not holders:
            raise NoBinding(hnp)
        if len(holders) == 1 or flow_id is None:
            chosen = holders[0]
        else:
            bind = self.flow_bind.get((mn_id, flow_id))
            chosen = next((b for b in holders if b.bind_id == bind), holders[0])
        return chosen.tunnel_id, chosen.serving_mag

    def expire(self, now: float) -> list[BindingCacheEntry]:
        """Drop entries whose lifetime elapsed; flows pointing at a dropped
        binding fall back to another live holder of their prefix, if any."""
        removed = [bce for bce in self.bces.values() if bce.expired(now)]
        for bce in removed:
            del self.bces[(bce.mn_id, bce.serving_mag)]
        removed_binds = {bce.bind_id for bce in removed}
        for flow_key, bind in list(self.flow_bind.items()):
            if bind in removed_binds:
                mn_id, flow_id = flow_key
                hnp = self.flow_hnp.get(flow_key)
                fallback = next(
                    (
                        b
                        for (mn, _), b in self.bces.items()
                        if mn == mn_id and hnp in b.hnp_list
                    ),
                    None,
                )
                if fallback is None:
                    del self.flow_bind[flow_key]
                else:
                    self.flow_bind[flow_key] = fallback.bind_id
        return removed

    def remove_binding(self, mn_id: int, mag_id: int) -> None:
        """Explicit teardown on detach (same fallback rules as expiry)."""
        bce = self.bces.pop((mn_id, mag_id), None)
        if bce is None:
            return
        for flow_key, bind in list(self.flow_bind.items()):
            if bind == bce.bind_id:
                hnp = self.flow_hnp.get(flow_key)
                fallback = next(
                    (
                        b
                        for (mn, _), b in self.bces.items()
                        if mn == flow_key[0] and hnp in b.hnp_list
                    ),
                    None,
                )
                if fallback is None:
                    del self.flow_bind[flow_key]
                else:
                    self.flow_bind[flow_key] = fallback.bind_id

    def live_tunnels(self) -> set[int]:
        return {bce.tunnel_id for bce in self.bces.values()}

    def dump_lines(self, now: float) -> list[str]:
        """Binding cache dump, one line per entry."""
        lines = []
        for bce in sorted(self.bces.values(), key=lambda b: (b.mn_id, b.bind_id)):
            hnps = ",".join(bce.hnp_list)
            lines.append(
                f"{now:.3f} mn={bce.mn_id} bind={bce.bind_id} hnps={hnps} "
                f"mag={bce.serving_mag} tunnel={bce.tunnel_id}"
            )
        return lines
