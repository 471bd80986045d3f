"""Federated sidechain with a rotating-leader BFT committee (n = 3f+1).

Operators keep an account ledger and finalize one block per committee round
trip: the round's leader proposes, operators precommit, then final-sign, and
a block carrying both quorum certificates is appended and pushed to clients.
Honest operators vote at most once per (height, round) slot and lock on the
first digest they see a precommit quorum for, so with the default quorum of
2f+1 two conflicting blocks can never both gather certificates.  The quorum
is a constructor argument precisely so that the bounded search can probe
what happens below the intersection threshold.

Value enters by peg-in (an L1 deposit that leaders mint once it is buried
confirm_depth blocks deep) and leaves by peg-out (an L2 burn followed by a
federation-multisigned L1 payout, which is the settlement event).

Clients replicate the chain from block pushes, verify certificates
themselves, and serve reads from their local copy.
"""

from __future__ import annotations

from .runtime import Machine, EntityId
from .base import make_tx, tx_signable, attach_leader_clock
from .core import SubroutineBundle, OPEN, UPDATE, SETTLEMENT, CLIENT
from .trace import digest
from .accounts import genesis_state, l2_txid, apply_tx, apply_txs, ripe_deposits

OPERATOR = "operator"


# round allowances before a queued request counts as overdue; update work
# settles inside the federation, settlement additionally crosses the chain
UPDATE_ALLOWANCE = 10
SETTLE_ALLOWANCE = 18


def genesis_block():
    return {"height": 0, "prev": None, "txs": [], "round": 0, "proposer": None}


def pre_msg(sid, h, rnd, bdig):
    return ["pre", sid, h, rnd, bdig]


def fin_msg(sid, h, rnd, bdig):
    return ["fin", sid, h, rnd, bdig]


def pegout_msg(sid, l2txid, height):
    return ["pegout", sid, l2txid, height]


def content_digest(block):
    """Round- and proposer-independent block identity, used for locks."""
    return digest([block["height"], block["prev"], block["txs"]])


def apply_block(state, block, ledger, confirm_depth):
    if block["height"] != state["height"] + 1:
        return None
    return apply_txs(state, block["txs"], ledger, confirm_depth, block["height"])


def cert_valid(certs, sid, block, cert, quorum, operators):
    if not isinstance(cert, dict):
        return False
    bdig = digest(block)
    h, rnd = block["height"], cert.get("round")
    ok_sets = []
    for phase, msg in (("pre", pre_msg(sid, h, rnd, bdig)),
                       ("fin", fin_msg(sid, h, rnd, bdig))):
        good = set()
        for entry in cert.get(phase, []):
            by = entry.get("by")
            if by in operators and certs.verify(entry.get("ref"), msg, by):
                good.add(by)
        ok_sets.append(good)
    return all(len(g) >= quorum for g in ok_sets)


# -- real machines ---------------------------------------------------------


class LiquidOperator(Machine):
    def __init__(self, me, operators, clients, f, quorum, initial):
        super().__init__(me)
        self.operators = list(operators)
        self.clients = list(clients)
        self.f = f
        self.quorum = quorum
        self.chain = [{"block": genesis_block(), "cert": None}]
        self.states = [genesis_state(initial)]
        self.mempool = {}
        self.voted = set()        # (height, round) precommit slots
        self.finvoted = set()
        self.locks = {}           # height -> {"cdig", "block"}
        self.pre_store = {}       # (h, rnd, bdig) -> {op: ref}
        self.fin_store = {}
        self.blocks_seen = {}     # bdig -> block
        self.pegout_sigs = {}     # l2txid -> {op: ref}
        self.pegout_done = set()

    def on_start(self, ctx):
        tx = make_tx("open-commit",
                     {"chain": self.me.sid,
                      "conflict": f"reg/{self.me.sid}/{self.me.short()}"},
                     self.me.short())
        tx["sigs"] = [ctx.certs.sign(self.me.short(), tx_signable(tx))]
        ctx.ledger.submit(tx)

    # helpers

    def tip(self):
        return self.chain[-1]["block"]

    def _leader_for(self, rnd):
        return self.operators[rnd % len(self.operators)]

    def _broadcast_ops(self, ctx, payload):
        for op in self.operators:
            if op == self.me:
                self._handle(ctx, payload, self.me)
            else:
                ctx.send_net(op, payload)

    def _ripe_mints(self, ctx, state):
        return ripe_deposits(ctx.ledger, self.me.sid, state,
                             ctx.timing["confirm_depth"])

    # dispatch

    def on_message(self, ctx, env):
        self._handle(ctx, env.payload, env.src)

    def _handle(self, ctx, p, src):
        kind = p.get("kind")
        if kind == "update-leader":
            self._maybe_propose(ctx, p["round"])
        elif kind == "tx":
            tx = p["tx"]
            self.mempool[l2_txid(tx)] = tx
        elif kind == "propose":
            self._on_propose(ctx, p["block"], src)
        elif kind == "precommit":
            self._on_precommit(ctx, p, src)
        elif kind == "final":
            self._on_final(ctx, p, src)
        elif kind == "block-push":
            self._on_push(ctx, p["entry"])
        elif kind == "pegout-sig":
            self._on_pegout_sig(ctx, p, src)

    def _maybe_propose(self, ctx, rnd):
        if self._leader_for(rnd) != self.me:
            return
        h = self.tip()["height"] + 1
        lock = self.locks.get(h)
        if lock is not None:
            block = dict(lock["block"], round=rnd, proposer=self.me.short())
        else:
            state = self.states[-1]
            txs = self._ripe_mints(ctx, state)
            probe = dict(state)
            for tx in txs:
                probe = apply_tx(probe, tx, ctx.ledger, ctx.timing["confirm_depth"])
            for txid in sorted(self.mempool,
                               key=lambda i: (self.mempool[i].get("nonce", 0), i)):
                tx = self.mempool[txid]
                trial = apply_tx(probe, tx, ctx.ledger, ctx.timing["confirm_depth"])
                if trial is not None:
                    txs.append(tx)
                    probe = trial
            if not txs:
                return
            block = {"height": h, "prev": digest(self.tip()), "txs": txs,
                     "round": rnd, "proposer": self.me.short()}
        self._broadcast_ops(ctx, {"kind": "propose", "block": block})

    def _on_propose(self, ctx, block, src):
        h = block["height"]
        if h != self.tip()["height"] + 1:
            return
        if block.get("proposer") != self._leader_for(block["round"]).short():
            return
        if src != self.me and src.short() != block.get("proposer"):
            return
        if block.get("prev") != digest(self.tip()):
            return
        bdig = digest(block)
        lock = self.locks.get(h)
        if lock is not None and lock["cdig"] != content_digest(block):
            return
        slot = (h, block["round"])
        if slot in self.voted:
            return
        if apply_block(self.states[-1], block, ctx.ledger,
                       ctx.timing["confirm_depth"]) is None:
            return
        self.voted.add(slot)
        self.blocks_seen[bdig] = block
        ref = ctx.certs.sign(self.me.short(), pre_msg(self.me.sid, h, block["round"], bdig))
        self._broadcast_ops(ctx, {"kind": "precommit", "height": h,
                                  "round": block["round"], "bdig": bdig,
                                  "ref": ref, "block": block})

    def _on_precommit(self, ctx, p, src):
        h, rnd, bdig = p["height"], p["round"], p["bdig"]
        if src != self.me and not ctx.certs.verify(
                p["ref"], pre_msg(self.me.sid, h, rnd, bdig), src.short()):
            return
        self.blocks_seen.setdefault(bdig, p.get("block"))
        store = self.pre_store.setdefault((h, rnd, bdig), {})
        store[src.short()] = p["ref"]
        slot = (h, rnd)
        if (len(store) >= self.quorum and slot not in self.finvoted
                and h == self.tip()["height"] + 1
                and self.blocks_seen.get(bdig) is not None):
            self.finvoted.add(slot)
            block = self.blocks_seen[bdig]
            self.locks[h] = {"cdig": content_digest(block), "block": block}
            ref = ctx.certs.sign(self.me.short(), fin_msg(self.me.sid, h, rnd, bdig))
            self._broadcast_ops(ctx, {"kind": "final", "height": h, "round": rnd,
                                      "bdig": bdig, "ref": ref,
                                      "block": self.blocks_seen[bdig]})

    def _on_final(self, ctx, p, src):
        h, rnd, bdig = p["height"], p["round"], p["bdig"]
        if src != self.me and not ctx.certs.verify(
                p["ref"], fin_msg(self.me.sid, h, rnd, bdig), src.short()):
            return
        self.blocks_seen.setdefault(bdig, p.get("block"))
        store = self.fin_store.setdefault((h, rnd, bdig), {})
        store[src.short()] = p["ref"]
        pres = self.pre_store.get((h, rnd, bdig), {})
        block = self.blocks_seen.get(bdig)
        if (len(store) >= self.quorum and len(pres) >= self.quorum
                and h == self.tip()["height"] + 1 and block is not None):
            cert = {"round": rnd,
                    "pre": [{"by": o, "ref": r} for o, r in sorted(pres.items())],
                    "fin": [{"by": o, "ref": r} for o, r in sorted(store.items())]}
            self._append(ctx, {"block": block, "cert": cert}, via="vote")

    def _append(self, ctx, entry, via):
        block = entry["block"]
        new_state = apply_block(self.states[-1], block, ctx.ledger,
                                ctx.timing["confirm_depth"])
        if new_state is None:
            return
        self.chain.append(entry)
        self.states.append(new_state)
        for tx in block["txs"]:
            self.mempool.pop(l2_txid(tx), None)
        ctx.note("block-final", height=block["height"], bdig=digest(block),
                 via=via, ntx=len(block["txs"]))
        push = {"kind": "block-push", "entry": entry}
        for c in self.clients:
            ctx.send_net(c, push)
        for op in self.operators:
            if op != self.me:
                ctx.send_net(op, push)
        for tx in block["txs"]:
            if tx.get("op") == "peg-out":
                txid = l2_txid(tx)
                ref = ctx.certs.sign(self.me.short(),
                                     pegout_msg(self.me.sid, txid, block["height"]))
                self._broadcast_ops(ctx, {"kind": "pegout-sig", "l2txid": txid,
                                          "height": block["height"], "ref": ref,
                                          "tx": tx})

    def _on_push(self, ctx, entry):
        block = entry["block"]
        if block["height"] != self.tip()["height"] + 1:
            return
        if block.get("prev") != digest(self.tip()):
            return
        if not cert_valid(ctx.certs, self.me.sid, block, entry["cert"],
                          self.quorum, [o.short() for o in self.operators]):
            return
        self._append(ctx, entry, via="adopt")

    def _on_pegout_sig(self, ctx, p, src):
        txid, h = p["l2txid"], p["height"]
        if src != self.me and not ctx.certs.verify(
                p["ref"], pegout_msg(self.me.sid, txid, h), src.short()):
            return
        store = self.pegout_sigs.setdefault(txid, {})
        store[src.short()] = p["ref"]
        if txid in self.pegout_done or len(store) < self.quorum:
            return
        if h >= len(self.states):
            return
        tx = p["tx"]
        body = {"chain": self.me.sid, "to": tx["from"], "amt": tx["amt"],
                "height": h, "l2txid": txid, "state": self.states[h],
                "opsigs": [{"by": o, "ref": r} for o, r in sorted(store.items())],
                "conflict": f"pegout/{self.me.sid}/{txid}"}
        ltx = make_tx("peg-out", body, self.me.short())
        ltx["sigs"] = [ctx.certs.sign(self.me.short(), tx_signable(ltx))]
        ctx.ledger.submit(ltx)
        self.pegout_done.add(txid)


class LiquidClient(Machine):
    def __init__(self, me, operators, f, quorum, initial):
        super().__init__(me)
        self.operators = list(operators)
        self.f = f
        self.quorum = quorum
        self.chain = [{"block": genesis_block(), "cert": None}]
        self.states = [genesis_state(initial)]
        self.buffer = {}
        self.watching = False
        self.opened = False
        self.closed = False
        self.pending = []         # env requests not yet sent as L2 txs
        self.outstanding = None   # {"txid", "tx"}
        self.dep_counter = 0
        self.settles_seen = set()
        self.settled_state = None

    def height(self):
        return self.chain[-1]["block"]["height"]

    def on_start(self, ctx):
        tx = make_tx("open-commit",
                     {"chain": self.me.sid,
                      "conflict": f"reg/{self.me.sid}/{self.me.short()}"},
                     self.me.short())
        tx["sigs"] = [ctx.certs.sign(self.me.short(), tx_signable(tx))]
        ctx.ledger.submit(tx)

    def on_message(self, ctx, env):
        kind = env.payload.get("kind")
        p = env.payload
        if env.src.role == "env":
            self._from_env(ctx, kind, p)
        elif kind == "block-push":
            self._on_push(ctx, p["entry"])

    def _from_env(self, ctx, kind, p):
        if kind == "open":
            self.watching = True
            self._recheck(ctx)
        elif kind == "pay":
            self._queue_tx(ctx, {"op": "pay", "to": p["to"], "amt": p["amt"]})
        elif kind == "deposit":
            self._deposit(ctx, p["amt"])
        elif kind == "settle":
            self._queue_tx(ctx, {"op": "peg-out", "amt": p["amt"]})
        elif kind == "read":
            self._serve_read(ctx)

    def _queue_tx(self, ctx, body):
        if self.closed or not self.opened:
            ctx.note("request-refused", why="phase", req=body["op"])
            return
        self.pending.append(body)
        self._try_send(ctx)

    def _try_send(self, ctx):
        if self.outstanding is not None or not self.pending or self.closed:
            return
        body = self.pending.pop(0)
        state = self.states[-1]
        nonce = state["nonce"].get(self.me.pid, 0) + 1
        tx = {**body, "from": self.me.pid, "nonce": nonce}
        if apply_tx(state, tx, ctx.ledger, ctx.timing["confirm_depth"]) is None:
            ctx.note("request-refused", why="invalid-transfer", req=body["op"])
            self._try_send(ctx)
            return
        ctx.note("request-queued", req=tx["op"], nonce=nonce)
        self.outstanding = {"txid": l2_txid(tx), "tx": tx}
        for op in self.operators:
            ctx.send_net(op, {"kind": "tx", "tx": tx})

    def _deposit(self, ctx, amt):
        self.dep_counter += 1
        tx = make_tx("deposit",
                     {"chain": self.me.sid, "to": self.me.pid, "amt": amt,
                      "conflict": f"dep/{self.me.sid}/{self.me.pid}/{self.dep_counter}"},
                     self.me.short())
        tx["sigs"] = [ctx.certs.sign(self.me.short(), tx_signable(tx))]
        ctx.ledger.submit(tx)
        ctx.note("deposit-sent", amt=amt)

    def _on_push(self, ctx, entry):
        block = entry["block"]
        self.buffer.setdefault(block["height"], entry)
        self._absorb(ctx)

    def _absorb(self, ctx):
        while True:
            entry = self.buffer.get(self.height() + 1)
            if entry is None:
                return
            block = entry["block"]
            if block.get("prev") != digest(self.chain[-1]["block"]):
                del self.buffer[block["height"]]
                return
            if not cert_valid(ctx.certs, self.me.sid, block, entry["cert"],
                              self.quorum, [o.short() for o in self.operators]):
                del self.buffer[block["height"]]
                return
            new_state = apply_block(self.states[-1], block, ctx.ledger,
                                    ctx.timing["confirm_depth"])
            if new_state is None:
                del self.buffer[block["height"]]
                return
            self.chain.append(entry)
            self.states.append(new_state)
            del self.buffer[block["height"]]
            ctx.note("chain-extend", height=block["height"])
            if (self.outstanding is not None
                    and any(l2_txid(t) == self.outstanding["txid"]
                            for t in block["txs"])):
                self.outstanding = None
            self._try_send(ctx)

    def executed_summary(self):
        out = []
        for i, entry in enumerate(self.chain):
            if i == 0:
                out.append({"kind": OPEN, "seq": 0, "state": self.states[0]})
            else:
                out.append({"kind": UPDATE, "seq": entry["block"]["height"],
                            "state": self.states[i], "txs": entry["block"]["txs"]})
        return out

    def _serve_read(self, ctx):
        if not self.opened:
            ctx.note("read-empty")
            return
        executed = self.executed_summary()
        if self.closed and self.settled_state is not None:
            executed.append({"kind": SETTLEMENT, "seq": None,
                             "state": self.settled_state})
        ctx.output({"kind": "read-result", "state": self.states[-1],
                    "executed": executed, "pointer": self.height()})

    def on_round(self, ctx):
        self._recheck(ctx)

    def on_ledger_block(self, ctx, height):
        self._recheck(ctx)

    def _recheck(self, ctx):
        if self.watching and not self.opened:
            regs = ctx.ledger.find(
                lambda t: t["kind"] == "open-commit"
                and t["body"].get("chain") == self.me.sid)
            have = {t["author"] for t in regs}
            if have >= {o.short() for o in self.operators}:
                self.opened = True
                ctx.note("open-done", state=self.states[0])
                ctx.output({"kind": "open-ok", "state": self.states[0]})
                self._try_send(ctx)
        pegouts = ctx.ledger.find(
            lambda t: t["kind"] == "peg-out" and t["body"].get("chain") == self.me.sid)
        for t in pegouts:
            txid = t["body"]["l2txid"]
            if txid in self.settles_seen:
                continue
            self.settles_seen.add(txid)
            self.closed = True
            self.settled_state = t["body"]["state"]
            ctx.note("settle-done", state=t["body"]["state"],
                     l2txid=txid, frm=t["body"]["to"], amt=t["body"]["amt"],
                     height=t["body"]["height"])
            ctx.output({"kind": "settle-ok", "success": True,
                        "state": t["body"]["state"]})


# -- ledger kind check -----------------------------------------------------


def install_ledger_checks(world, sid, operators, quorum):
    ops = set(operators)

    def check_pegout(tx, ledger):
        body = tx["body"]
        entries = body.get("opsigs") or []
        msg = pegout_msg(sid, body.get("l2txid"), body.get("height"))
        good = {e.get("by") for e in entries
                if e.get("by") in ops and world.certs.verify(e.get("ref"), msg, e["by"])}
        if len(good) < quorum:
            return False, "thin-federation-multisig"
        return True, None

    world.ledger.kind_checks["peg-out"] = check_pegout


# -- ideal bundle ----------------------------------------------------------


class LiquidBundle(SubroutineBundle):
    name = "liquid"

    def __init__(self, sid, clients, operators, f, quorum, initial):
        self.sid = sid
        self.clients = list(clients)
        self.operators = list(operators)  # shorts
        self.f = f
        self.quorum = quorum
        self.initial = dict(initial)

    def _pending_spend(self, ist, pid):
        out = 0
        for r in ist.queue:
            if r["by"] != pid:
                continue
            body = r["body"]
            if r["kind"] == UPDATE and body.get("op") == "pay":
                out += body.get("amt", 0)
            if r["kind"] == SETTLEMENT and body.get("op") == "peg-out":
                out += body.get("amt", 0)
        return out

    def submit(self, ist, req, env):
        kind, body, by = req["kind"], req["body"], req["by"]
        if ist.phase() == "settled":
            return False, "settled"
        if kind == OPEN:
            if ist.phase() != "init":
                return False, "phase"
            if body.get("state") != genesis_state(self.initial):
                return False, "bad-state"
            return True, None
        if ist.phase() != "open":
            return False, "phase"
        op = body.get("op")
        if kind == UPDATE and op == "pay":
            if body.get("to") not in self.clients or body.get("amt", 0) <= 0:
                return False, "malformed"
            free = ist.latest()["bal"].get(by, 0) - self._pending_spend(ist, by)
            if body["amt"] > free:
                return False, "insufficient"
            return True, None
        if kind == UPDATE and op == "peg-in":
            if body.get("amt", 0) <= 0:
                return False, "malformed"
            return True, None
        if kind == SETTLEMENT and op == "peg-out":
            if body.get("amt", 0) <= 0:
                return False, "malformed"
            free = ist.latest()["bal"].get(by, 0) - self._pending_spend(ist, by)
            if body["amt"] > free:
                return False, "insufficient"
            return True, None
        return False, "unknown-kind"

    def check_open(self, ist, body, attachment, env):
        if body.get("state") != genesis_state(self.initial):
            return False, "bad-state"
        honest = env.honest(ist, CLIENT)
        queued = {r["by"] for r in ist.queue if r["kind"] == OPEN}
        if not set(honest) <= queued:
            return False, "missing-open-requests"
        regs = env.ledger.find(
            lambda t: t["kind"] == "open-commit" and t["body"].get("chain") == self.sid)
        if not set(self.operators) <= {t["author"] for t in regs}:
            return False, "registration-missing"
        return True, None

    def apply_open(self, ist, body, attachment, env):
        s0 = genesis_state(self.initial)
        ist.states.append(s0)
        ist.onchain = s0
        ist.executed.append({"kind": OPEN, "state": s0, "seq": 0,
                             "block": genesis_block(), "evidence": attachment,
                             "round": env.round})

    def _last_block(self, ist):
        for e in reversed(ist.executed):
            if e["kind"] in (OPEN, UPDATE) and e.get("block") is not None:
                return e["block"]
        return None

    def check_update(self, ist, block, attachment, env):
        if not isinstance(block, dict) or "txs" not in block:
            return False, "malformed"
        if block.get("height") != ist.latest()["height"] + 1:
            return False, "stale"
        prev = self._last_block(ist)
        if prev is not None and block.get("prev") != digest(prev):
            return False, "wrong-parent"
        if not cert_valid(env.certs, self.sid, block, attachment,
                          self.quorum, self.operators):
            return False, "thin-certificate"
        if apply_block(ist.latest(), block, env.ledger,
                       env.timing["confirm_depth"]) is None:
            return False, "invalid-transition"
        return True, None

    def state_from_update(self, ist, block, attachment, env):
        return apply_block(ist.latest(), block, env.ledger,
                           env.timing["confirm_depth"])

    def executed_by_update(self, ist, block, attachment, env):
        post = self.state_from_update(ist, block, attachment, env)
        rids = []
        matched = set()
        for tx in block["txs"]:
            for r in ist.queue:
                if r["rid"] in matched or r["kind"] != UPDATE:
                    continue
                body = r["body"]
                if (tx.get("op") == "pay" and body.get("op") == "pay"
                        and r["by"] == tx.get("from") and body.get("to") == tx.get("to")
                        and body.get("amt") == tx.get("amt")):
                    matched.add(r["rid"])
                    rids.append(r["rid"])
                    break
                if (tx.get("op") == "mint" and body.get("op") == "peg-in"
                        and r["by"] == tx.get("to")
                        and body.get("amt") == tx.get("amt")):
                    matched.add(r["rid"])
                    rids.append(r["rid"])
                    break
        return [{"kind": UPDATE, "seq": block["height"], "state": post,
                 "txs": block["txs"], "block": block, "evidence": attachment,
                 "rids": rids, "round": env.round}]

    def read(self, ist, pid, env):
        if not ist.states:
            return None
        top = len(ist.states) - 1
        delay = env.hint("read-delay", pid=pid)
        idx = top if delay is None else max(0, min(top, delay))
        idx = max(idx, ist.read_ptr.get(pid, 0))
        state = ist.states[idx]
        executed = []
        for e in ist.executed:
            if e["kind"] == OPEN:
                executed.append({"kind": OPEN, "seq": 0, "state": e["state"]})
            elif e["kind"] == UPDATE and e["seq"] <= state["height"]:
                executed.append({"kind": UPDATE, "seq": e["seq"],
                                 "state": e["state"], "txs": e["txs"]})
        if ist.settled is not None:
            executed.append({"kind": SETTLEMENT, "seq": None,
                             "state": ist.settled["state"]})
        if not self._reconstructs(ist, idx):
            return None
        return {"state": state, "executed": executed, "pointer": idx}

    def _reconstructs(self, ist, idx):
        want = ist.states[idx]
        cur = ist.states[0]
        for e in ist.executed:
            if e["kind"] != UPDATE or e["seq"] > want["height"]:
                continue
            if e["seq"] != cur["height"] + 1:
                return False
            cur = e["state"]
        return cur == want

    def check_settlement(self, ist, body, attachment, env):
        if body.get("op") != "peg-out":
            return False, "malformed", None
        asked = [r for r in ist.queue if r["kind"] == SETTLEMENT]
        if not asked:
            return False, "no-settle-request", None
        burn = None
        for e in ist.executed:
            if e["kind"] != UPDATE:
                continue
            for tx in e["txs"]:
                if (tx.get("op") == "peg-out" and tx.get("from") == body.get("from")
                        and tx.get("amt") == body.get("amt")):
                    burn = (e, tx)
        if burn is None:
            return False, "no-burn", None
        entry, tx = burn
        committed = env.ledger.find(
            lambda t: t["kind"] == "peg-out" and t["body"].get("chain") == self.sid
            and t["body"].get("l2txid") == l2_txid(tx))
        if not committed:
            return False, "not-committed", None
        return True, None, entry["state"]

    def upd_rnd(self, ist, env):
        if ist.phase() != "open":
            return True, None
        for r in ist.queue:
            if r["kind"] not in (UPDATE, SETTLEMENT):
                continue
            allowance = (UPDATE_ALLOWANCE if r["kind"] == UPDATE
                         else SETTLE_ALLOWANCE)
            if env.round - r["round"] < allowance:
                continue
            if r["kind"] == UPDATE and r["body"].get("op") == "peg-in":
                if not self._ripe_deposit(ist, r, env):
                    continue
            return False, "pending-l2-work"
        return True, None

    def _ripe_deposit(self, ist, req, env):
        cd = env.timing["confirm_depth"]
        deps = env.ledger.find(
            lambda t: t["kind"] == "deposit" and t["body"].get("chain") == self.sid
            and t["body"].get("to") == req["by"]
            and t["body"].get("amt") == req["body"].get("amt")
            and t["txid"] not in ist.latest()["minted"])
        return any(env.ledger.depth(d) >= cd for d in deps)


# -- protocol descriptor ---------------------------------------------------


def canonical_scenario(n_ops=4, f=1, quorum=None, balance=10):
    return {
        "protocol": "liquid",
        "clients": ["c1", "c2"],
        "operators": [f"op{i+1}" for i in range(n_ops)],
        "f": f,
        "quorum": quorum if quorum is not None else 2 * f + 1,
        "initial": {"c1": balance, "c2": balance},
    }


def liveness_params(scn):
    f = scn["f"]
    return {
        OPEN: {"f": {CLIENT: 1, OPERATOR: 0}, "t_l2": 8, "t_l1": 6},
        # updates settle entirely inside the federation; the allowance is
        # sized so that deposit burial and leader rotation both fit
        UPDATE: {"f": {CLIENT: 1, OPERATOR: f}, "t_l2": UPDATE_ALLOWANCE,
                 "t_l1": 0},
        SETTLEMENT: {"f": {CLIENT: 1, OPERATOR: f}, "t_l2": 10,
                     "t_l1": SETTLE_ALLOWANCE - 10},
    }


def build_real(world, scn):
    world.declare_role(CLIENT, budget=1)
    world.declare_role(OPERATOR, budget=scn["f"])
    world.declare_role("clock")
    world.wire("clock", OPERATOR)
    ops = [world.entity(OPERATOR, o) for o in scn["operators"]]
    clients = [world.entity(CLIENT, c) for c in scn["clients"]]
    for c in clients:
        world.register(LiquidClient(c, ops, scn["f"], scn["quorum"], scn["initial"]))
    for o in ops:
        world.register(LiquidOperator(o, ops, clients, scn["f"], scn["quorum"],
                                      scn["initial"]))
    install_ledger_checks(world, world.sid, [o.short() for o in ops], scn["quorum"])
    attach_leader_clock(world, ops)
    world.timing["sync"] = True


def make_bundle(world, scn):
    return LiquidBundle(world.sid, scn["clients"],
                        [f"{OPERATOR}:{o}" for o in scn["operators"]],
                        scn["f"], scn["quorum"], scn["initial"])


def env_payload_real(entry):
    return dict(entry)


def party_roles(scn):
    """(role, pids, corruption budget) rows for mirroring the cast."""
    return [(CLIENT, list(scn["clients"]), 1),
            (OPERATOR, list(scn["operators"]), scn["f"])]


class EnvTracker:
    """Environment-side account arithmetic for valid submissions."""

    def __init__(self, scn):
        self.scn = scn
        self.state = genesis_state(scn["initial"])

    def ideal_request(self, pid, entry):
        kind = entry["kind"]
        if kind == "open":
            return {"kind": OPEN, "body": {"state": genesis_state(self.scn["initial"])}}
        if kind == "pay":
            bal = self.state["bal"]
            if bal.get(pid, 0) >= entry["amt"]:
                bal[pid] -= entry["amt"]
                bal[entry["to"]] = bal.get(entry["to"], 0) + entry["amt"]
            return {"kind": UPDATE,
                    "body": {"op": "pay", "to": entry["to"], "amt": entry["amt"]}}
        if kind == "deposit":
            self.state["bal"][pid] = self.state["bal"].get(pid, 0) + entry["amt"]
            return {"kind": UPDATE, "body": {"op": "peg-in", "amt": entry["amt"]}}
        if kind == "settle":
            return {"kind": SETTLEMENT,
                    "body": {"op": "peg-out", "from": pid, "amt": entry["amt"]}}
        return None


class Hooks:
    name = "liquid"

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
            out.append({"kind": OPEN,
                        "body": {"state": genesis_state(self.scn["initial"])}})
        elif kind == "block-final":
            key = ("b", ev["height"])
            if key not in self.done:
                self.done.add(key)
                src = inner.machines[EntityId(ev["party"].split(":", 1)[1],
                                              inner.sid, OPERATOR)]
                entry = src.chain[ev["height"]]
                out.append({"kind": UPDATE, "state": entry["block"],
                            "attachment": entry["cert"]})
        elif kind == "settle-done":
            key = ("s", ev["l2txid"])
            if key not in self.done:
                self.done.add(key)
                out.append({"kind": SETTLEMENT,
                            "body": {"op": "peg-out", "from": ev["frm"],
                                     "amt": ev["amt"]},
                            "attachment": None})
        return out

    def read_delay(self, inner, pid):
        return inner.machines[EntityId(pid, inner.sid, CLIENT)].height()


# -- adversary helpers -----------------------------------------------------


def forge_block(world, proposer_short, height, prev, txs, rnd):
    return {"height": height, "prev": prev, "txs": txs, "round": rnd,
            "proposer": proposer_short}


def sign_branch(world, op_entity, block):
    """Corrupt operator's precommit and final for an arbitrary block."""
    sid = world.sid
    bdig = digest(block)
    h, rnd = block["height"], block["round"]
    pre = world.certs.sign(op_entity.short(), pre_msg(sid, h, rnd, bdig))
    fin = world.certs.sign(op_entity.short(), fin_msg(sid, h, rnd, bdig))
    return {"pre": {"kind": "precommit", "height": h, "round": rnd, "bdig": bdig,
                    "ref": pre, "block": block},
            "fin": {"kind": "final", "height": h, "round": rnd, "bdig": bdig,
                    "ref": fin, "block": block}}


def equivocate(world, op_entity, targets_a, targets_b, txs_a, rnd):
    """Two conflicting proposals for the same height, one per recipient set.

    Branch A carries txs_a; branch B is the empty block.  The corrupt
    proposer double-votes on both, which only pays off below the 2f+1
    quorum.  Returns the two blocks for the caller's bookkeeping.
    """
    some_op = world.machines[targets_a[0]] if targets_a else None
    tip = some_op.tip() if some_op else genesis_block()
    h, prev = tip["height"] + 1, digest(tip)
    block_a = forge_block(world, op_entity.short(), h, prev, txs_a, rnd)
    block_b = forge_block(world, op_entity.short(), h, prev, [], rnd)
    for block, targets in ((block_a, targets_a), (block_b, targets_b)):
        sigs = sign_branch(world, op_entity, block)
        for t in targets:
            world.queue_net(op_entity, t, {"kind": "propose", "block": block})
            world.queue_net(op_entity, t, sigs["pre"])
            world.queue_net(op_entity, t, sigs["fin"])
    return block_a, block_b


def menu(world, entity, knowledge):
    """Benign-noise adversary moves for random suites: none of these can
    break the default-quorum guarantees, they only exercise rejection paths."""
    m = world.machines.get(entity)
    actions = {}
    if entity.role == OPERATOR:
        def stale_push(args=None):
            if m is None or len(m.chain) < 2:
                return None
            push = {"kind": "block-push", "entry": m.chain[1]}
            for c in world.roles.get(CLIENT, []):
                world.queue_net(entity, c, push)
            return None

        def garbage_propose(args=None):
            if m is None:
                return None
            bogus = forge_block(world, entity.short(), m.tip()["height"] + 1,
                                digest(m.tip()),
                                [{"op": "pay", "from": "c1", "to": "c2",
                                  "amt": 999, "nonce": 1}],
                                world.round_no)
            for op in world.roles.get(OPERATOR, []):
                if op != entity:
                    world.queue_net(entity, op, {"kind": "propose", "block": bogus})
            return None

        actions["stale-push"] = stale_push
        actions["garbage-propose"] = garbage_propose
    if entity.role == CLIENT:
        def spam_overdraft(args=None):
            tx = {"op": "pay", "from": entity.pid, "to": "c1", "amt": 999,
                  "nonce": 1}
            for op in world.roles.get(OPERATOR, []):
                world.queue_net(entity, op, {"kind": "tx", "tx": tx})
            return None
        actions["spam-overdraft"] = spam_overdraft
    return actions
