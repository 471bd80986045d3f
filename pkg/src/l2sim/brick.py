"""Payment channel with a warden committee (n = 3f+1, threshold 2f+1).

Two clients run a two-party channel; wardens countersign every state and act
as the settlement committee.  Communication is asynchronous: NET deliveries
are fully adversary-ordered and only the cross-round synchrony envelope of
the runtime bounds them.  A state {s, i} is accepted once both clients have
signed it and 2f+1 wardens have countersigned; wardens store only their
latest accepted state and refuse stale sequence numbers.

Settlement is either collaborative (both clients co-sign a close, which may
deliberately be an old state) or unilateral (the settling client instructs
the wardens, waits for 2f+1 on-chain publications, and the highest published
sequence number wins).

The ideal bundle mirrors these rules as subroutine checks over the shared
internal state: client signatures are verified against the registry (they
carry the agreement), warden multisets are counted structurally, and every
on-chain condition is delegated to the ledger, whose kind checks validate
embedded channel signatures.
"""

from __future__ import annotations

from .runtime import Machine, EntityId
from .base import make_tx, tx_signable
from .core import SubroutineBundle, OPEN, UPDATE, SETTLEMENT, CLIENT

WARDEN = "warden"


def initial_state(collateral: dict) -> dict:
    return {"bal": dict(sorted(collateral.items())), "seq": 0}


def transfer(state: dict, payer: str, payee: str, amt: int) -> dict | None:
    bal = dict(state["bal"])
    if payer not in bal or payee not in bal or amt <= 0 or bal[payer] < amt:
        return None
    bal[payer] -= amt
    bal[payee] += amt
    return {"bal": bal, "seq": state["seq"] + 1}


def conserves(prev: dict, new: dict) -> bool:
    if set(new["bal"]) != set(prev["bal"]):
        return False
    if any(v < 0 for v in new["bal"].values()):
        return False
    return sum(new["bal"].values()) == sum(prev["bal"].values())


def state_msg(sid, state, seq):
    return ["chan-state", sid, state, seq]


def open_msg(sid, state):
    return ["chan-open", sid, state]


def close_msg(sid, state, seq):
    return ["chan-close", sid, state, seq]


def warden_msg(sid, state, seq):
    return ["warden-state", sid, state, seq]


# -- real machines ---------------------------------------------------------


class BrickClient(Machine):
    def __init__(self, me, peer_pid, wardens, collateral, f):
        super().__init__(me)
        self.peer = peer_pid
        self.wardens = list(wardens)
        self.f = f
        self.collateral = dict(collateral)
        self.phase = "idle"
        self.s0 = None
        self.my_open_sig = None
        self.peer_open_sig = None
        self.open_acks = {}
        self.open_submitted = False
        self.chain = []          # accepted: {"kind","seq","state","csigs","wacks"}
        self.pending_pay = []
        self.proposal = None     # outstanding outgoing {state, seq, sig}
        self.acks = {}           # seq -> {warden_short: {"ref","state","csigs"}}
        self.close_pending = None
        self.uni_pending = False
        self.close_submitted = False
        self.settled_entry = None

    # helpers

    def _peer_entity(self, ctx):
        return EntityId(self.peer, self.me.sid, CLIENT)

    def latest(self):
        return self.chain[-1] if self.chain else None

    def executed_summary(self):
        out = [{"kind": e["kind"], "seq": e["seq"], "state": e["state"]}
               for e in self.chain]
        if self.settled_entry is not None:
            out.append(self.settled_entry)
        return out

    def participants(self):
        return [f"{CLIENT}:{self.me.pid}", f"{CLIENT}:{self.peer}"] + \
               [w.short() for w in self.wardens]

    # environment requests

    def on_message(self, ctx, env):
        kind = env.payload.get("kind")
        if env.src.role == "env":
            self._from_env(ctx, kind, env.payload)
        else:
            self._from_net(ctx, kind, env.payload, env.src)

    def _from_env(self, ctx, kind, p):
        if kind == "open":
            self._start_open(ctx)
        elif kind == "pay":
            self._start_pay(ctx, p["to"], p["amt"])
        elif kind == "settle":
            self._start_settle(ctx, p.get("type", "collab"), p.get("seq"))
        elif kind == "read":
            self._serve_read(ctx)

    def _start_open(self, ctx):
        if self.phase != "idle":
            ctx.note("request-refused", why="phase", req="open")
            return
        self.s0 = initial_state(self.collateral)
        self.my_open_sig = ctx.certs.sign(self.me.short(), open_msg(self.me.sid, self.s0))
        msg = {"kind": "chan-open", "state": self.s0, "sig": self.my_open_sig}
        ctx.send_net(self._peer_entity(ctx), msg)
        for w in self.wardens:
            ctx.send_net(w, msg)
        self.phase = "opening"

    def _start_pay(self, ctx, to, amt):
        if self.phase != "open":
            ctx.note("request-refused", why="phase", req="pay")
            return
        self.pending_pay.append({"to": to, "amt": amt})
        self._try_propose(ctx)

    def _try_propose(self, ctx):
        if self.proposal is not None or not self.pending_pay or self.phase != "open":
            return
        pay = self.pending_pay.pop(0)
        new = transfer(self.latest()["state"], self.me.pid, pay["to"], pay["amt"])
        if new is None:
            ctx.note("request-refused", why="invalid-transfer", req="pay")
            self._try_propose(ctx)
            return
        seq = new["seq"]
        ctx.note("request-queued", req="pay", seq=seq)
        sig = ctx.certs.sign(self.me.short(), state_msg(self.me.sid, new, seq))
        self.proposal = {"state": new, "seq": seq, "sig": sig}
        ctx.send_net(self._peer_entity(ctx),
                     {"kind": "pay", "state": new, "seq": seq, "sig": sig})

    def _start_settle(self, ctx, stype, seq):
        if self.phase != "open":
            ctx.note("request-refused", why="phase", req="settle")
            return
        if stype == "unilateral":
            self.uni_pending = True
            for w in self.wardens:
                ctx.send_net(w, {"kind": "close-uni"})
            return
        target = self.latest()
        if seq is not None:
            hits = [e for e in self.chain if e["seq"] == seq]
            if not hits:
                ctx.note("request-refused", why="unknown-seq", req="settle")
                return
            target = hits[0]
        sig = ctx.certs.sign(self.me.short(),
                             close_msg(self.me.sid, target["state"], target["seq"]))
        self.close_pending = {"state": target["state"], "seq": target["seq"], "sig": sig}
        ctx.send_net(self._peer_entity(ctx),
                     {"kind": "close-req", "state": target["state"],
                      "seq": target["seq"], "sig": sig})

    def _serve_read(self, ctx):
        if not self.chain:
            ctx.note("read-empty")
            return
        latest = self.latest()
        ctx.output({"kind": "read-result", "state": latest["state"],
                    "executed": self.executed_summary(),
                    "pointer": len(self.chain) - 1})

    # protocol messages

    def _from_net(self, ctx, kind, p, src):
        if kind == "chan-open":
            if ctx.certs.verify(p["sig"], open_msg(self.me.sid, p["state"]),
                                f"{CLIENT}:{self.peer}"):
                self.peer_open_sig = p["sig"]
        elif kind == "chan-open-ack":
            self._on_open_ack(ctx, p, src)
        elif kind == "pay":
            self._on_pay(ctx, p)
        elif kind == "pay-ack":
            self._on_pay_ack(ctx, p, src)
        elif kind == "close-req":
            self._on_close_req(ctx, p)
        elif kind == "close-ack":
            self._on_close_ack(ctx, p)

    def _on_open_ack(self, ctx, p, src):
        if self.phase != "opening" or p["state"] != self.s0:
            return
        if not ctx.certs.verify(p["wsig"], warden_msg(self.me.sid, self.s0, 0), src.short()):
            return
        self.open_acks[src.short()] = p["wsig"]
        if len(self.open_acks) >= 2 * self.f + 1 and not self.open_submitted:
            tx = make_tx("open-commit",
                         {"channel": self.me.sid, "state": self.s0,
                          "conflict": f"open/{self.me.sid}/{self.me.short()}"},
                         self.me.short())
            tx["sigs"] = [ctx.certs.sign(self.me.short(), tx_signable(tx))]
            ctx.ledger.submit(tx)
            self.open_submitted = True

    def _on_pay(self, ctx, p):
        if self.phase != "open":
            return
        state, seq = p["state"], p["seq"]
        mine = self.latest()
        if seq != mine["seq"] + 1 or state.get("seq") != seq:
            return
        if not conserves(mine["state"], state):
            return
        if state["bal"].get(self.me.pid, 0) < mine["state"]["bal"].get(self.me.pid, 0):
            return                       # the proposer pays out of their own share
        if not ctx.certs.verify(p["sig"], state_msg(self.me.sid, state, seq),
                                f"{CLIENT}:{self.peer}"):
            return
        sig2 = ctx.certs.sign(self.me.short(), state_msg(self.me.sid, state, seq))
        for w in self.wardens:
            ctx.send_net(w, {"kind": "pay2", "state": state, "seq": seq,
                             "csigs": [p["sig"], sig2]})

    def _on_pay_ack(self, ctx, p, src):
        if self.phase != "open":
            return
        seq, state = p["seq"], p["state"]
        mine = self.latest()
        if mine is None or seq != mine["seq"] + 1:
            return
        if not ctx.certs.verify(p["wsig"], warden_msg(self.me.sid, state, seq), src.short()):
            return
        slot = self.acks.setdefault(seq, {})
        slot[src.short()] = {"ref": p["wsig"], "state": state, "csigs": p["csigs"]}
        matching = {w: a for w, a in slot.items() if a["state"] == state}
        if len(matching) >= 2 * self.f + 1:
            self.chain.append({"kind": UPDATE, "seq": seq, "state": state,
                               "csigs": p["csigs"],
                               "wacks": {w: a["ref"] for w, a in matching.items()}})
            ctx.note("state-accept", seq=seq, state=state)
            if self.proposal is not None and self.proposal["seq"] == seq:
                self.proposal = None
            self._try_propose(ctx)

    def _on_close_req(self, ctx, p):
        if self.phase != "open":
            return
        state, seq = p["state"], p["seq"]
        known = [e for e in self.chain if e["seq"] == seq and e["state"] == state]
        if not known:
            return
        if not ctx.certs.verify(p["sig"], close_msg(self.me.sid, state, seq),
                                f"{CLIENT}:{self.peer}"):
            return
        sig2 = ctx.certs.sign(self.me.short(), close_msg(self.me.sid, state, seq))
        ctx.send_net(self._peer_entity(ctx), {"kind": "close-ack", "seq": seq, "sig": sig2})

    def _on_close_ack(self, ctx, p):
        if self.close_pending is None or p["seq"] != self.close_pending["seq"]:
            return
        cp = self.close_pending
        if not ctx.certs.verify(p["sig"], close_msg(self.me.sid, cp["state"], cp["seq"]),
                                f"{CLIENT}:{self.peer}"):
            return
        self._submit_close(ctx, cp["state"], cp["seq"], [cp["sig"], p["sig"]], "collab")

    def _submit_close(self, ctx, state, seq, csigs, mode):
        if self.close_submitted:
            return
        tx = make_tx("settle",
                     {"channel": self.me.sid, "state": state, "seq": seq,
                      "csigs": csigs, "mode": mode,
                      "conflict": f"close/{self.me.sid}"},
                     self.me.short())
        tx["sigs"] = [ctx.certs.sign(self.me.short(), tx_signable(tx))]
        ctx.ledger.submit(tx)
        self.close_submitted = True

    # polling

    def on_round(self, ctx):
        self._recheck(ctx)

    def on_ledger_block(self, ctx, height):
        self._recheck(ctx)

    def _recheck(self, ctx):
        if self.phase == "opening" and self.open_submitted:
            opens = ctx.ledger.find(
                lambda t: t["kind"] == "open-commit"
                and t["body"].get("channel") == self.me.sid)
            if {t["author"] for t in opens} >= set(self.participants()):
                self.phase = "open"
                self.chain.append({"kind": OPEN, "seq": 0, "state": self.s0,
                                   "csigs": [self.my_open_sig, self.peer_open_sig],
                                   "wacks": dict(self.open_acks)})
                ctx.note("open-done", state=self.s0)
                ctx.output({"kind": "open-ok", "state": self.s0})
                self._try_propose(ctx)
        if self.uni_pending and not self.close_submitted:
            pubs = ctx.ledger.find(
                lambda t: t["kind"] == "warden-publish"
                and t["body"].get("channel") == self.me.sid)
            if len({t["author"] for t in pubs}) >= 2 * self.f + 1:
                best = max(pubs, key=lambda t: t["body"]["seq"])
                self._submit_close(ctx, best["body"]["state"], best["body"]["seq"],
                                   best["body"]["csigs"], "unilateral")
        if self.phase in ("opening", "open"):
            closes = ctx.ledger.find(
                lambda t: t["kind"] == "settle"
                and t["body"].get("channel") == self.me.sid)
            if closes:
                body = closes[0]["body"]
                self.phase = "closed"
                stype = body.get("mode", "collab")
                self.settled_entry = {"kind": SETTLEMENT, "seq": None,
                                      "state": body["state"]}
                ctx.note("settle-done", state=body["state"], seq=body["seq"], type=stype)
                ctx.output({"kind": "settle-ok", "success": True, "state": body["state"]})


class BrickWarden(Machine):
    def __init__(self, me, clients, f):
        super().__init__(me)
        self.clients = list(clients)     # two client shorts
        self.f = f
        self.open_sigs = {}
        self.s0 = None
        self.countersigned_open = False
        self.stored = None               # {"state","seq","csigs"}
        self.published = False

    def on_message(self, ctx, env):
        kind = env.payload.get("kind")
        p = env.payload
        if kind == "chan-open":
            self._on_open(ctx, p, env.src)
        elif kind == "pay2":
            self._on_update(ctx, p)
        elif kind == "close-uni":
            self._publish(ctx)

    def _client_entities(self, ctx):
        return [EntityId(c.split(":", 1)[1], self.me.sid, CLIENT) for c in self.clients]

    def _on_open(self, ctx, p, src):
        if self.countersigned_open:
            return
        if src.short() not in self.clients:
            return
        if not ctx.certs.verify(p["sig"], open_msg(self.me.sid, p["state"]), src.short()):
            return
        self.open_sigs[src.short()] = p["sig"]
        self.s0 = p["state"]
        if set(self.open_sigs) == set(self.clients):
            self.countersigned_open = True
            self.stored = {"state": self.s0, "seq": 0,
                           "csigs": [self.open_sigs[c] for c in self.clients]}
            wsig = ctx.certs.sign(self.me.short(), warden_msg(self.me.sid, self.s0, 0))
            for c in self._client_entities(ctx):
                ctx.send_net(c, {"kind": "chan-open-ack", "state": self.s0, "wsig": wsig})
            tx = make_tx("open-commit",
                         {"channel": self.me.sid, "state": self.s0,
                          "conflict": f"open/{self.me.sid}/{self.me.short()}"},
                         self.me.short())
            tx["sigs"] = [ctx.certs.sign(self.me.short(), tx_signable(tx))]
            ctx.ledger.submit(tx)
            ctx.note("warden-open")

    def _on_update(self, ctx, p):
        if self.stored is None:
            return
        state, seq, csigs = p["state"], p["seq"], p["csigs"]
        if seq <= self.stored["seq"]:
            ctx.note("stale-refused", seq=seq)
            return
        msg = state_msg(self.me.sid, state, seq)
        if len(csigs) != 2:
            return
        signers = {ctx.certs.verify_any(ref, msg) for ref in csigs}
        if signers != set(self.clients):
            return
        self.stored = {"state": state, "seq": seq, "csigs": csigs}
        ctx.note("warden-accept", seq=seq, state=state)
        wsig = ctx.certs.sign(self.me.short(), warden_msg(self.me.sid, state, seq))
        for c in self._client_entities(ctx):
            ctx.send_net(c, {"kind": "pay-ack", "state": state, "seq": seq,
                             "wsig": wsig, "csigs": csigs})

    def _publish(self, ctx):
        if self.published or self.stored is None:
            return
        tx = make_tx("warden-publish",
                     {"channel": self.me.sid, "state": self.stored["state"],
                      "seq": self.stored["seq"], "csigs": self.stored["csigs"],
                      "conflict": f"wpub/{self.me.sid}/{self.me.short()}"},
                     self.me.short())
        tx["sigs"] = [ctx.certs.sign(self.me.short(), tx_signable(tx))]
        ctx.ledger.submit(tx)
        self.published = True
        ctx.note("warden-publish", seq=self.stored["seq"])


# -- ledger kind checks ----------------------------------------------------


def install_ledger_checks(world, sid, clients, f):
    """On-chain validation of embedded channel signatures."""
    shorts = [f"{CLIENT}:{c}" for c in clients]

    def check_close(tx, ledger):
        body = tx["body"]
        state, seq = body.get("state"), body.get("seq")
        csigs = body.get("csigs") or []
        if len(csigs) != 2:
            return False, "need-both-client-sigs"
        forms = (close_msg(sid, state, seq), state_msg(sid, state, seq),
                 open_msg(sid, state))
        for want in forms:
            signers = {world.certs.verify_any(ref, want) for ref in csigs}
            if signers == set(shorts):
                return True, None
        return False, "bad-channel-sigs"

    def check_wpub(tx, ledger):
        body = tx["body"]
        state, seq = body.get("state"), body.get("seq")
        csigs = body.get("csigs") or []
        if len(csigs) != 2:
            return False, "need-both-client-sigs"
        want = open_msg(sid, state) if seq == 0 else state_msg(sid, state, seq)
        signers = {world.certs.verify_any(ref, want) for ref in csigs}
        if signers != set(shorts):
            return False, "bad-channel-sigs"
        return True, None

    world.ledger.kind_checks["settle"] = check_close
    world.ledger.kind_checks["warden-publish"] = check_wpub


# -- ideal bundle ----------------------------------------------------------


class BrickBundle(SubroutineBundle):
    name = "brick"

    def __init__(self, sid, clients, wardens, f, collateral):
        self.sid = sid
        self.clients = list(clients)
        self.wardens = list(wardens)          # shorts
        self.f = f
        self.collateral = dict(collateral)

    def _has_settle(self, ist, pid):
        queued = any(r["kind"] == SETTLEMENT and r["by"] == pid for r in ist.queue)
        done = any(e["kind"] == SETTLEMENT for e in ist.executed)
        return queued or done

    def submit(self, ist, req, env):
        kind, body, by = req["kind"], req["body"], req["by"]
        if ist.phase() == "settled":
            return False, "settled"
        if self._has_settle(ist, by):
            return False, "settle-pending"
        if kind == OPEN:
            if ist.phase() != "init":
                return False, "phase"
            if body.get("state") != initial_state(self.collateral):
                return False, "bad-state"
            return True, None
        if ist.phase() != "open":
            return False, "phase"
        if kind == UPDATE:
            state = body.get("state")
            if not isinstance(state, dict) or state.get("seq") != body.get("seq"):
                return False, "malformed"
            if body["seq"] <= ist.latest()["seq"]:
                return False, "stale"
            if not conserves(ist.latest(), state):
                return False, "not-conserving"
            return True, None
        if kind == SETTLEMENT:
            if body.get("type") not in ("collab", "unilateral"):
                return False, "malformed"
            return True, None
        return False, "unknown-kind"

    def check_open(self, ist, body, attachment, env):
        s0 = initial_state(self.collateral)
        if body.get("state") != s0:
            return False, "bad-state"
        honest = env.honest(ist, CLIENT)
        queued = {r["by"] for r in ist.queue if r["kind"] == OPEN}
        if not set(honest) <= queued:
            return False, "missing-open-requests"
        wardens = self._warden_entries(attachment)
        if len(wardens) < 2 * self.f + 1:
            return False, "thin-warden-multiset"
        opens = env.ledger.find(
            lambda t: t["kind"] == "open-commit" and t["body"].get("channel") == self.sid)
        authors = {t["author"] for t in opens}
        participants = {f"{CLIENT}:{c}" for c in self.clients} | set(self.wardens)
        if not participants <= authors:
            return False, "collateral-missing"
        return True, None

    def _warden_entries(self, attachment):
        entries = (attachment or {}).get("wardens", [])
        return {e.get("by") for e in entries if e.get("by") in self.wardens}

    def check_update(self, ist, new_state, attachment, env):
        if not isinstance(new_state, dict):
            return False, "malformed"
        seq = new_state.get("seq")
        if seq is None or seq <= ist.latest()["seq"]:
            return False, "stale"
        if not conserves(ist.latest(), new_state):
            return False, "not-conserving"
        att = attachment or {}
        csigs = att.get("clients", [])
        msg = state_msg(self.sid, new_state, seq)
        signers = {env.certs.verify_any(ref, msg) for ref in csigs}
        if signers != {f"{CLIENT}:{c}" for c in self.clients}:
            return False, "missing-agreement"
        if len(self._warden_entries(att)) < 2 * self.f + 1:
            return False, "thin-warden-multiset"
        return True, None

    def executed_by_update(self, ist, new_state, attachment, env):
        rids = [r["rid"] for r in ist.queue
                if r["kind"] == UPDATE and r["body"].get("state") == new_state]
        return [{"kind": UPDATE, "seq": new_state["seq"], "state": new_state,
                 "evidence": attachment, "rids": rids, "round": env.round}]

    def read(self, ist, pid, env):
        if not ist.states:
            return None
        top = len(ist.states) - 1
        delay = env.hint("read-delay", pid=pid)
        idx = top if delay is None else max(0, min(top, delay))
        idx = max(idx, ist.read_ptr.get(pid, 0))
        state = ist.states[idx]
        executed = [
            {"kind": e["kind"], "seq": e.get("seq"), "state": e["state"]}
            for e in ist.executed
            if e["kind"] in (OPEN, UPDATE) and e.get("seq", 0) <= state["seq"]
        ]
        if ist.settled is not None:
            executed.append({"kind": SETTLEMENT, "seq": None,
                             "state": ist.settled["state"]})
        if not self._reconstructs(ist, idx):
            return None
        return {"state": state, "executed": executed, "pointer": idx}

    def _reconstructs(self, ist, idx) -> bool:
        # fold the off-chain evidence above the anchor; after settlement the
        # anchor may already sit at (or past) the wanted sequence number
        want = ist.states[idx]
        cur = ist.onchain
        if cur is None:
            return False
        if cur["seq"] >= want["seq"]:
            return cur == want
        for e in ist.executed:
            if e["kind"] != UPDATE or e["seq"] > want["seq"] or e["seq"] <= cur["seq"]:
                continue
            if e["seq"] != cur["seq"] + 1 or not conserves(cur, e["state"]):
                return False
            cur = e["state"]
        return cur == want

    def check_settlement(self, ist, body, attachment, env):
        stype = body.get("type")
        if stype == "collab":
            want_state, want_seq = body.get("state"), body.get("seq")
            asked = [r for r in ist.queue if r["kind"] == SETTLEMENT
                     and r["body"].get("type") == "collab"]
            if not asked:
                return False, "no-settle-request", None
            csigs = (attachment or {}).get("clients", [])
            msg = close_msg(self.sid, want_state, want_seq)
            signers = {env.certs.verify_any(ref, msg) for ref in csigs}
            if signers != {f"{CLIENT}:{c}" for c in self.clients}:
                return False, "missing-agreement", None
            closes = env.ledger.find(
                lambda t: t["kind"] == "settle" and t["body"].get("channel") == self.sid
                and t["body"].get("state") == want_state)
            if not closes:
                return False, "not-committed", None
            return True, None, want_state
        if stype == "unilateral":
            pubs = env.ledger.find(
                lambda t: t["kind"] == "warden-publish"
                and t["body"].get("channel") == self.sid)
            if len({t["author"] for t in pubs}) < 2 * self.f + 1:
                return False, "thin-publication", None
            latest = ist.latest()
            best = max(pubs, key=lambda t: t["body"]["seq"])
            if best["body"]["seq"] != latest["seq"]:
                return False, "not-latest", None
            return True, None, latest
        return False, "malformed", None


# -- protocol descriptor ---------------------------------------------------


def canonical_scenario(n_wardens=4, f=1, collateral=10):
    return {
        "protocol": "brick",
        "clients": ["c1", "c2"],
        "wardens": [f"w{i+1}" for i in range(n_wardens)],
        "f": f,
        "collateral": {"c1": collateral, "c2": collateral},
    }


def liveness_params(scn):
    f = scn["f"]
    return {
        OPEN: {"f": {CLIENT: 0, WARDEN: 0}, "t_l2": 8, "t_l1": 6},
        UPDATE: {"f": {CLIENT: 0, WARDEN: f}, "t_l2": 8, "t_l1": 0},
        SETTLEMENT + "-collab": {"f": {CLIENT: 0, WARDEN: f}, "t_l2": 8, "t_l1": 6},
        # the unilateral path is pure chain work: warden publications and the
        # close transaction, with the one broadcast folded into the allowance
        SETTLEMENT + "-unilateral": {"f": {CLIENT: 1, WARDEN: f}, "t_l2": 0, "t_l1": 8},
    }


def build_real(world, scn):
    sid = world.sid
    world.declare_role(CLIENT, budget=1)
    world.declare_role(WARDEN, budget=scn["f"])
    wardens = [world.entity(WARDEN, w) for w in scn["wardens"]]
    c1, c2 = scn["clients"]
    for me, peer in ((c1, c2), (c2, c1)):
        world.register(BrickClient(world.entity(CLIENT, me), peer, wardens,
                                   scn["collateral"], scn["f"]))
    shorts = [f"{CLIENT}:{c}" for c in scn["clients"]]
    for w in wardens:
        world.register(BrickWarden(w, shorts, scn["f"]))
    install_ledger_checks(world, sid, scn["clients"], scn["f"])
    world.timing["sync"] = False


def make_bundle(world, scn):
    return BrickBundle(world.sid, scn["clients"],
                       [f"{WARDEN}:{w}" for w in scn["wardens"]],
                       scn["f"], scn["collateral"])


def env_payload_real(entry):
    return dict(entry)


def party_roles(scn):
    """(role, pids, corruption budget) rows for mirroring the cast."""
    return [(CLIENT, list(scn["clients"]), 1),
            (WARDEN, list(scn["wardens"]), scn["f"])]


class EnvTracker:
    """Environment-side channel arithmetic for building ideal submissions."""

    def __init__(self, scn):
        self.scn = scn
        self.state = initial_state(scn["collateral"])

    def ideal_request(self, pid, entry):
        kind = entry["kind"]
        if kind == "open":
            return {"kind": OPEN, "body": {"state": initial_state(self.scn["collateral"])}}
        if kind == "pay":
            new = transfer(self.state, pid, entry["to"], entry["amt"])
            if new is None:
                new = {"bal": dict(self.state["bal"]), "seq": self.state["seq"] + 1,
                       "invalid": True}
            else:
                self.state = new
            return {"kind": UPDATE, "body": {"state": new, "seq": new["seq"]}}
        if kind == "settle":
            body = {"type": entry.get("type", "collab")}
            if entry.get("seq") is not None:
                body["seq"] = entry["seq"]
            return {"kind": SETTLEMENT, "body": body}
        return None


# -- simulator hooks -------------------------------------------------------


class Hooks:
    """Turns internal-simulation progress into interface triggers."""

    name = "brick"

    def __init__(self, scn):
        self.scn = scn
        self.done = set()

    def triggers_for(self, inner, ev):
        if ev.get("t") != "note":
            return []
        kind = ev.get("kind")
        out = []
        if kind == "open-done" and "open" not in self.done:
            self.done.add("open")
            pid = ev["party"].split(":", 1)[1]
            m = self._client(inner, pid)
            out.append({"kind": OPEN, "body": {"state": ev["state"]},
                        "attachment": {"wardens": [
                            {"by": w, "ref": r}
                            for w, r in sorted(m.open_acks.items())]}})
        elif kind == "state-accept":
            key = ("u", ev["seq"])
            if key not in self.done:
                self.done.add(key)
                pid = ev["party"].split(":", 1)[1]
                m = self._client(inner, pid)
                entry = next(e for e in m.chain if e["seq"] == ev["seq"])
                out.append({"kind": UPDATE, "state": ev["state"],
                            "attachment": {
                                "clients": entry["csigs"],
                                "wardens": [{"by": w, "ref": r}
                                            for w, r in sorted(entry["wacks"].items())]}})
        elif kind == "settle-done" and "settle" not in self.done:
            self.done.add("settle")
            body = {"type": ev["type"]}
            att = {}
            if ev["type"] == "collab":
                body["state"], body["seq"] = ev["state"], ev["seq"]
                closes = inner.ledger.find(
                    lambda t: t["kind"] == "settle"
                    and t["body"].get("channel") == inner.sid)
                if closes:
                    att["clients"] = closes[0]["body"]["csigs"]
            out.append({"kind": SETTLEMENT, "body": body, "attachment": att})
        return out

    def _client(self, inner, pid):
        return inner.machines[EntityId(pid, inner.sid, CLIENT)]

    def read_delay(self, inner, pid):
        m = self._client(inner, pid)
        return max(0, len(m.chain) - 1)


# -- corrupted-party menu --------------------------------------------------


def menu(world, entity, knowledge):
    """Adversary moves available in the corrupted party's name.

    Each action returns (real_sends_applied, ideal_submission_or_None); the
    driver mirrors the submission into the ideal queue on differential runs.
    """
    m = world.machines.get(entity)
    sid = world.sid
    actions = {}
    if entity.role == WARDEN:
        def publish_stale(args=None):
            if m is None or m.stored is None:
                return None
            body = {"channel": sid, "state": m.s0 or m.stored["state"], "seq": 0,
                    "csigs": m.stored["csigs"] if m.stored["seq"] == 0 else
                    [m.open_sigs[c] for c in m.clients],
                    "conflict": f"wpub/{sid}/{entity.short()}"}
            tx = make_tx("warden-publish", body, entity.short())
            tx["sigs"] = [world.certs.sign(entity.short(), tx_signable(tx))]
            world.ledger.submit(tx)
            return None

        def ack_garbage(args=None):
            bogus = {"bal": {"c1": 1, "c2": 1}, "seq": 99}
            wsig = world.certs.sign(entity.short(), warden_msg(sid, bogus, 99))
            for ent in world.roles.get(CLIENT, []):
                world.queue_net(entity, ent,
                                {"kind": "pay-ack", "state": bogus, "seq": 99,
                                 "wsig": wsig, "csigs": [None, None]})
            return None

        actions["publish-stale"] = publish_stale
        actions["ack-garbage"] = ack_garbage
    if entity.role == CLIENT:
        def stale_settle(args=None):
            if m is None or not m.chain:
                return None
            target = m.chain[0]
            sig = world.certs.sign(entity.short(),
                                   close_msg(sid, target["state"], target["seq"]))
            peer = EntityId(m.peer, sid, CLIENT)
            world.queue_net(entity, peer,
                            {"kind": "close-req", "state": target["state"],
                             "seq": target["seq"], "sig": sig})
            return {"kind": SETTLEMENT,
                    "body": {"type": "collab", "seq": target["seq"]}}
        actions["stale-settle"] = stale_settle
    return actions
