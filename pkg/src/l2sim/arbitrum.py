"""Optimistic rollup: batches live on L1, fraud proofs police them.

Operators collect client transactions and, on every publication period,
post a batch (transaction list plus claimed post-state) straight to the
base ledger.  Validators re-execute every committed batch and, on a
mismatch, submit a fraud proof whose acceptance the ledger itself decides
by deterministic re-execution, standing in for the interactive challenge
game.  A batch becomes final once its challenge window has passed with no
accepted proof; reads serve the final prefix only.  The window is judged
at proof inclusion, so finality is monotone provided the publication
period exceeds the worst-case inclusion delay (t_period > liveness_bound).

The canonical chain is a pure function of the ledger: walk committed
batches in order, accept each whose sequence number and parent digest
extend the chain and which no accepted proof struck down.  An invalidated
batch orphans its descendants and the next publisher simply rebuilds.

Clients can rescue a censored transaction by publishing it themselves as a
one-transaction batch after a patience window; a scenario flag turns that
escape hatch off so censorship experiments have something to find.

The security assumptions are one honest operator (liveness, unless
self-publication is on, in which case none) and one honest validator
(safety).  A wrong batch that outlives its window unchallenged voids the
guarantees: the ideal-side update check answers with a halt instead of a
verdict.
"""

from __future__ import annotations

from .runtime import Machine, EntityId
from .base import make_tx, tx_signable, attach_periodic_clock
from .core import SubroutineBundle, OPEN, UPDATE, SETTLEMENT, CLIENT
from .trace import digest
from .accounts import genesis_state, l2_txid, apply_tx, apply_txs, ripe_deposits

OPERATOR = "operator"
VALIDATOR = "validator"


def genesis_anchor(sid):
    return f"genesis/{sid}"


def batch_digest(batch):
    return digest(["batch", batch])


def plausible_state(s) -> bool:
    """Shape check for claimed post-states, so folds over them stay total."""
    if not isinstance(s, dict):
        return False
    if not isinstance(s.get("bal"), dict) or not isinstance(s.get("nonce"), dict):
        return False
    vals = list(s["bal"].values()) + list(s["nonce"].values())
    if not all(isinstance(v, int) for v in vals):
        return False
    return isinstance(s.get("minted"), list) and isinstance(s.get("height"), int)


def chain_view(ledger, sid, initial, confirm_depth, round_no, t_period):
    """Canonical rollup chain derived from the ledger.

    Returns {"entries": [...], "final": k} where entries are accepted
    batches in order and the first k of them are final at round_no.  The
    base layer never re-executes, so the fold treats each batch's claimed
    post-state as authoritative; "post" is the re-execution result kept
    alongside for fraud detection (fraudulent iff post != claimed).
    """
    published = ledger.find(
        lambda t: t["kind"] == "batch-publish" and t["body"].get("chain") == sid)
    proofs = ledger.find(
        lambda t: t["kind"] == "fraud-proof" and t["body"].get("chain") == sid)
    struck = {p["body"].get("target") for p in proofs}
    entries = []
    state = genesis_state(initial)
    prev = genesis_anchor(sid)
    for tx in published:
        if tx["txid"] in struck:
            continue
        batch = tx["body"].get("batch") or {}
        if batch.get("seq") != len(entries) + 1 or batch.get("prev") != prev:
            continue
        post = apply_txs(state, batch.get("txs", []), ledger, confirm_depth,
                         batch["seq"])
        entries.append({"batch": batch, "txid": tx["txid"],
                        "commit_round": tx.get("commit_round", 0),
                        "post": post, "claimed": batch["post"]})
        state = batch["post"]
        prev = batch_digest(batch)
    final = 0
    for e in entries:
        if round_no > e["commit_round"] + t_period:
            final += 1
        else:
            break
    return {"entries": entries, "final": final}


def view_state(view, upto=None):
    """Authoritative state after the first `upto` accepted batches."""
    n = len(view["entries"]) if upto is None else upto
    if n == 0:
        return None
    return view["entries"][n - 1]["claimed"]


# -- ledger kind checks ----------------------------------------------------


def install_ledger_checks(world, sid, initial, publishers):
    """Batches are shape-checked; fraud proofs are settled by re-execution."""

    def check_batch(tx, ledger):
        body = tx["body"]
        batch = body.get("batch")
        if not isinstance(batch, dict):
            return False, "malformed"
        if not isinstance(batch.get("seq"), int) or not isinstance(batch.get("prev"), str):
            return False, "malformed"
        if not isinstance(batch.get("txs"), list) or not plausible_state(batch.get("post")):
            return False, "malformed"
        if tx["author"] not in publishers:
            return False, "unknown-publisher"
        return True, None

    def check_proof(tx, ledger):
        # validated again at inclusion time, so the window check below also
        # guards against proofs the adversary held back: once a batch turns
        # final nothing can strike it any more.  The round comes from the
        # world that ticks the ledger, which may sit above the building one.
        w = ledger.world
        view = chain_view(ledger, sid, initial, w.timing["confirm_depth"],
                          w.round_no, w.timing["t_period"])
        entry = None
        for e in view["entries"]:
            if e["txid"] == tx["body"].get("target"):
                entry = e
                break
        if entry is None:
            return False, "unknown-target"
        if w.round_no > entry["commit_round"] + w.timing["t_period"]:
            return False, "window-closed"
        if entry["post"] is not None and entry["post"] == entry["claimed"]:
            return False, "batch-correct"
        return True, None

    def check_settle(tx, ledger):
        body = tx["body"]
        w = ledger.world
        view = chain_view(ledger, sid, initial, w.timing["confirm_depth"],
                          w.round_no, w.timing["t_period"])
        entry = None
        for e in view["entries"][:view["final"]]:
            if e["txid"] == body.get("batch"):
                entry = e
                break
        if entry is None:
            return False, "batch-not-final"
        if body.get("state") != entry["claimed"]:
            return False, "state-mismatch"
        for btx in entry["batch"]["txs"]:
            if (l2_txid(btx) == body.get("l2txid")
                    and btx.get("op") == "peg-out"
                    and btx.get("from") == body.get("to")
                    and btx.get("amt") == body.get("amt")):
                return True, None
        return False, "no-such-burn"

    world.ledger.kind_checks["batch-publish"] = check_batch
    world.ledger.kind_checks["fraud-proof"] = check_proof
    world.ledger.kind_checks["settle"] = check_settle


# -- real machines ---------------------------------------------------------


class RollupParty(Machine):
    """Shared L1 plumbing: registration and chain derivation."""

    def __init__(self, me, initial):
        super().__init__(me)
        self.initial = dict(initial)

    def register_onchain(self, ctx):
        tx = make_tx("open-commit",
                     {"chain": self.me.sid,
                      "conflict": f"reg/{self.me.sid}/{self.me.short()}"},
                     self.me.short())
        tx["sigs"] = [ctx.certs.sign(self.me.short(), tx_signable(tx))]
        ctx.ledger.submit(tx)

    def view(self, ctx):
        return chain_view(ctx.ledger, self.me.sid, self.initial,
                          ctx.timing["confirm_depth"], ctx.world.round_no,
                          ctx.timing["t_period"])

    def optimistic_state(self, ctx, view=None):
        v = view or self.view(ctx)
        s = view_state(v)
        return s if s is not None else genesis_state(self.initial)


class ArbitrumOperator(RollupParty):
    def __init__(self, me, initial):
        super().__init__(me, initial)
        self.mempool = {}

    def on_start(self, ctx):
        self.register_onchain(ctx)

    def on_message(self, ctx, env):
        p = env.payload
        if p.get("kind") == "tx":
            self.mempool[l2_txid(p["tx"])] = p["tx"]
        elif p.get("kind") == "update-request":
            self._publish(ctx)

    def _publish(self, ctx):
        view = self.view(ctx)
        state = self.optimistic_state(ctx, view)
        txs = ripe_deposits(ctx.ledger, self.me.sid, state,
                            ctx.timing["confirm_depth"])
        probe = state
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
        seq = len(view["entries"]) + 1
        prev = (genesis_anchor(self.me.sid) if seq == 1
                else batch_digest(view["entries"][-1]["batch"]))
        post = dict(probe, height=seq)
        batch = {"seq": seq, "prev": prev, "txs": txs, "post": post,
                 "by": self.me.short()}
        ltx = make_tx("batch-publish", {"chain": self.me.sid, "batch": batch},
                      self.me.short())
        ltx["sigs"] = [ctx.certs.sign(self.me.short(), tx_signable(ltx))]
        ctx.ledger.submit(ltx)
        ctx.note("batch-publish", seq=seq, ntx=len(txs))

    def on_ledger_block(self, ctx, height):
        # drop mempool entries that landed in an accepted batch
        view = self.view(ctx)
        for e in view["entries"]:
            for tx in e["batch"]["txs"]:
                self.mempool.pop(l2_txid(tx), None)


class ArbitrumValidator(RollupParty):
    def __init__(self, me, initial):
        super().__init__(me, initial)
        self.checked = set()

    def on_start(self, ctx):
        self.register_onchain(ctx)

    def on_message(self, ctx, env):
        if env.payload.get("kind") == "update-check":
            self._audit(ctx)

    def on_ledger_block(self, ctx, height):
        self._audit(ctx)

    def _audit(self, ctx):
        published = ctx.ledger.find(
            lambda t: t["kind"] == "batch-publish"
            and t["body"].get("chain") == self.me.sid)
        view = self.view(ctx)
        accepted = {e["txid"]: e for e in view["entries"]}
        for tx in published:
            if tx["txid"] in self.checked:
                continue
            entry = accepted.get(tx["txid"])
            if entry is None:
                continue            # orphaned or already struck down
            self.checked.add(tx["txid"])
            if entry["post"] is None or entry["post"] != entry["claimed"]:
                proof = make_tx("fraud-proof",
                                {"chain": self.me.sid, "target": tx["txid"],
                                 "seq": entry["batch"]["seq"],
                                 "conflict": f"fraud/{tx['txid']}/{self.me.short()}"},
                                self.me.short())
                proof["sigs"] = [ctx.certs.sign(self.me.short(),
                                                tx_signable(proof))]
                res = ctx.ledger.submit(proof)
                ctx.note("fraud-found", seq=entry["batch"]["seq"],
                         target=tx["txid"], accepted=res["accepted"])


class ArbitrumClient(RollupParty):
    def __init__(self, me, operators, initial, self_publish=True, patience=None):
        super().__init__(me, initial)
        self.operators = list(operators)
        self.self_publish = self_publish
        self.patience = patience
        self.watching = False
        self.opened = False
        self.closed = False
        self.pending = []
        self.outstanding = None    # {"txid","tx","since"}
        self.inflight = []         # sent but not yet final: {"txid","body"}
        self.dep_counter = 0
        self.final_len = 0
        self.settles_seen = set()
        self.settled_state = None
        self.exit_submitted = False

    def on_start(self, ctx):
        self.register_onchain(ctx)

    def on_message(self, ctx, env):
        kind = env.payload.get("kind")
        p = env.payload
        if env.src.role != "env":
            return
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
        state = self.optimistic_state(ctx)
        nonce = state["nonce"].get(self.me.pid, 0) + 1
        tx = {**body, "from": self.me.pid, "nonce": nonce}
        if apply_tx(state, tx, ctx.ledger, ctx.timing["confirm_depth"]) is None:
            ctx.note("request-refused", why="invalid-transfer", req=body["op"])
            self._try_send(ctx)
            return
        ctx.note("request-queued", req=tx["op"], nonce=nonce)
        self.outstanding = {"txid": l2_txid(tx), "tx": tx,
                            "since": ctx.world.round_no}
        self.inflight.append({"txid": l2_txid(tx), "body": body})
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

    def _included(self, view, txid):
        return any(l2_txid(t) == txid
                   for e in view["entries"] for t in e["batch"]["txs"])

    def _overdue_mints(self, ctx, view, wait):
        """Our own buried deposits that the operators have failed to mint."""
        state = self.optimistic_state(ctx, view)
        cd = ctx.timing["confirm_depth"]
        out = []
        for m in ripe_deposits(ctx.ledger, self.me.sid, state, cd):
            if m["to"] != self.me.pid:
                continue
            dep = ctx.ledger.find(lambda t, r=m["ref"]: t["txid"] == r)[0]
            if ctx.world.round_no - (dep["commit_round"] + cd) >= wait:
                out.append(m)
        return out

    def _maybe_self_publish(self, ctx, view):
        wait = self.patience or ctx.timing["t_period"]
        now = ctx.world.round_no
        cd = ctx.timing["confirm_depth"]
        state = self.optimistic_state(ctx, view)
        seq = len(view["entries"]) + 1
        txs = self._overdue_mints(ctx, view, wait)
        if self.outstanding is not None and now - self.outstanding["since"] >= wait:
            tx = self.outstanding["tx"]
            if apply_txs(state, txs + [tx], ctx.ledger, cd, seq) is not None:
                txs.append(tx)
            else:
                # stale against the settled chain; drop it rather than
                # poison our own batch
                gone = self.outstanding["txid"]
                self.inflight = [i for i in self.inflight if i["txid"] != gone]
                self.outstanding = None
                self._try_send(ctx)
        if not txs:
            return
        prev = (genesis_anchor(self.me.sid) if seq == 1
                else batch_digest(view["entries"][-1]["batch"]))
        post = apply_txs(state, txs, ctx.ledger, cd, seq)
        batch = {"seq": seq, "prev": prev, "txs": txs, "post": post,
                 "by": self.me.short()}
        ltx = make_tx("batch-publish", {"chain": self.me.sid, "batch": batch},
                      self.me.short())
        ltx["sigs"] = [ctx.certs.sign(self.me.short(), tx_signable(ltx))]
        ctx.ledger.submit(ltx)
        ctx.note("self-publish", seq=seq)
        if self.outstanding is not None:
            self.outstanding["since"] = now

    def _serve_read(self, ctx):
        if not self.opened:
            ctx.note("read-empty")
            return
        view = self.view(ctx)
        final = view["entries"][:view["final"]]
        state = genesis_state(self.initial)
        executed = [{"kind": OPEN, "seq": 0, "state": state}]
        for e in final:
            state = e["claimed"]
            executed.append({"kind": UPDATE, "seq": e["batch"]["seq"],
                             "state": state, "txs": e["batch"]["txs"]})
        if self.closed and self.settled_state is not None:
            executed.append({"kind": SETTLEMENT, "seq": None,
                             "state": self.settled_state})
        ctx.output({"kind": "read-result", "state": state,
                    "executed": executed, "pointer": view["final"]})

    def on_round(self, ctx):
        self._recheck(ctx)

    def on_ledger_block(self, ctx, height):
        self._recheck(ctx)

    def _recheck(self, ctx):
        if self.watching and not self.opened:
            regs = ctx.ledger.find(
                lambda t: t["kind"] == "open-commit"
                and t["body"].get("chain") == self.me.sid
                and t["author"].startswith(OPERATOR + ":"))
            ops = {o.short() for o in self.operators}
            if ops <= {t["author"] for t in regs}:
                self.opened = True
                ctx.note("open-done", state=genesis_state(self.initial))
                ctx.output({"kind": "open-ok",
                            "state": genesis_state(self.initial)})
                self._try_send(ctx)
        if not self.opened:
            return
        view = self.view(ctx)
        self._reclaim_orphans(ctx, view)
        if self.outstanding is not None and self._included(view, self.outstanding["txid"]):
            self.outstanding = None
            self._try_send(ctx)
        if self.self_publish:
            self._maybe_self_publish(ctx, view)
        if view["final"] > self.final_len:
            for e in view["entries"][self.final_len:view["final"]]:
                ctx.note("batch-final", seq=e["batch"]["seq"], txid=e["txid"],
                         commit_round=e["commit_round"])
            self.final_len = view["final"]
        self._watch_exits(ctx, view)

    def _reclaim_orphans(self, ctx, view):
        # a struck batch takes its transactions off the chain; re-queue ours
        # (an identical resend is idempotent thanks to the nonce check)
        final_ids = {l2_txid(t) for e in view["entries"][:view["final"]]
                     for t in e["batch"]["txs"]}
        accepted_ids = {l2_txid(t) for e in view["entries"]
                        for t in e["batch"]["txs"]}
        keep, requeue = [], []
        for item in self.inflight:
            if item["txid"] in final_ids:
                continue
            if item["txid"] in accepted_ids or \
                    (self.outstanding and item["txid"] == self.outstanding["txid"]):
                keep.append(item)
            else:
                requeue.append(item["body"])
                ctx.note("tx-reorged", txid=item["txid"])
        self.inflight = keep
        if requeue:
            self.pending = requeue + self.pending
            self._try_send(ctx)

    def _watch_exits(self, ctx, view):
        # a finalized burn of ours gets claimed on L1; any client observing a
        # committed claim reports the settlement
        for e in view["entries"][:view["final"]]:
            for tx in e["batch"]["txs"]:
                if tx.get("op") == "peg-out" and tx.get("from") == self.me.pid \
                        and not self.exit_submitted:
                    post = e["claimed"]
                    claim = make_tx(
                        "settle",
                        {"chain": self.me.sid, "to": self.me.pid,
                         "amt": tx["amt"], "l2txid": l2_txid(tx),
                         "batch": e["txid"], "state": post,
                         "conflict": f"exit/{self.me.sid}/{l2_txid(tx)}"},
                        self.me.short())
                    claim["sigs"] = [ctx.certs.sign(self.me.short(),
                                                    tx_signable(claim))]
                    ctx.ledger.submit(claim)
                    self.exit_submitted = True
        exits = ctx.ledger.find(
            lambda t: t["kind"] == "settle" and t["body"].get("chain") == self.me.sid)
        for t in exits:
            txid = t["body"]["l2txid"]
            if txid in self.settles_seen:
                continue
            self.settles_seen.add(txid)
            self.closed = True
            self.settled_state = t["body"]["state"]
            ctx.note("settle-done", state=t["body"]["state"], l2txid=txid,
                     frm=t["body"]["to"], amt=t["body"]["amt"])
            ctx.output({"kind": "settle-ok", "success": True,
                        "state": t["body"]["state"]})


# -- ideal bundle ----------------------------------------------------------


class ArbitrumBundle(SubroutineBundle):
    name = "arbitrum"

    def __init__(self, sid, clients, operators, validators, initial):
        self.sid = sid
        self.clients = list(clients)
        self.operators = list(operators)    # shorts
        self.validators = list(validators)  # shorts
        self.initial = dict(initial)

    def _pending_spend(self, ist, pid):
        out = 0
        for r in ist.queue:
            body = r["body"]
            if r["by"] == pid and body.get("op") in ("pay", "peg-out"):
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
                             "evidence": attachment, "round": env.round})

    def _chain(self, env):
        return chain_view(env.ledger, self.sid, self.initial,
                          env.timing["confirm_depth"], env.round,
                          env.timing["t_period"])

    def check_update(self, ist, batch, attachment, env):
        if not isinstance(batch, dict) or "txs" not in batch:
            return False, "malformed"
        seq = batch.get("seq")
        if seq != ist.latest()["height"] + 1:
            return False, "stale"
        view = self._chain(env)
        entry = None
        for e in view["entries"]:
            if e["batch"] == batch:
                entry = e
                break
        if entry is None:
            return False, "not-on-ledger"
        if env.round <= entry["commit_round"] + env.timing["t_period"]:
            return False, "window-open"
        if entry["post"] is None or entry["post"] != entry["claimed"]:
            return False, "halt:unchallenged-fraud"
        return True, None

    def state_from_update(self, ist, batch, attachment, env):
        return apply_txs(ist.latest(), batch["txs"], env.ledger,
                         env.timing["confirm_depth"], batch["seq"])

    def executed_by_update(self, ist, batch, attachment, env):
        post = self.state_from_update(ist, batch, attachment, env)
        rids = []
        matched = set()
        for tx in batch["txs"]:
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
        return [{"kind": UPDATE, "seq": batch["seq"], "state": post,
                 "txs": batch["txs"], "batch": batch, "evidence": attachment,
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
            lambda t: t["kind"] == "settle" and t["body"].get("chain") == self.sid
            and t["body"].get("l2txid") == l2_txid(tx))
        if not committed:
            return False, "not-committed", None
        return True, None, entry["state"]

    def upd_rnd(self, ist, env):
        # progress is driven by L1 rounds; a censored queue must be able to
        # reach its deadline, so rounds are never refused here
        return True, None


# -- protocol descriptor ---------------------------------------------------


def canonical_scenario(n_ops=2, n_vals=1, balance=10, self_publish=True):
    return {
        "protocol": "arbitrum",
        "clients": ["c1", "c2"],
        "operators": [f"p{i+1}" for i in range(n_ops)],
        "validators": [f"v{i+1}" for i in range(n_vals)],
        "initial": {"c1": balance, "c2": balance},
        "self_publish": self_publish,
    }


def op_budget(scn):
    n = len(scn["operators"])
    return n if scn.get("self_publish", True) else max(1, n - 1)


def liveness_params(scn):
    n_ops = len(scn["operators"])
    n_vals = len(scn["validators"])
    # with the self-publication escape hatch even all operators failing
    # cannot censor; without it one honest operator is required
    op_f = n_ops if scn.get("self_publish", True) else n_ops - 1
    return {
        OPEN: {"f": {CLIENT: 1, OPERATOR: 0, VALIDATOR: n_vals}, "t_l2": 8,
               "t_l1": 6},
        UPDATE: {"f": {CLIENT: 1, OPERATOR: op_f, VALIDATOR: n_vals},
                 "t_l2": 8, "t_l1": 18},
        SETTLEMENT: {"f": {CLIENT: 1, OPERATOR: op_f, VALIDATOR: n_vals},
                     "t_l2": 8, "t_l1": 26},
    }


def build_real(world, scn):
    world.declare_role(CLIENT, budget=1)
    world.declare_role(OPERATOR, budget=op_budget(scn))
    # safety rests on one honest watcher, so the budget stops short of the
    # last validator; corrupting it is an explicit assumption break
    world.declare_role(VALIDATOR, budget=len(scn["validators"]) - 1)
    world.declare_role("clock")
    world.wire("clock", OPERATOR)
    world.wire("clock", VALIDATOR)
    ops = [world.entity(OPERATOR, o) for o in scn["operators"]]
    vals = [world.entity(VALIDATOR, v) for v in scn["validators"]]
    clients = [world.entity(CLIENT, c) for c in scn["clients"]]
    publishers = {o.short() for o in ops} | {c.short() for c in clients}
    install_ledger_checks(world, world.sid, scn["initial"], publishers)
    for c in clients:
        world.register(ArbitrumClient(c, ops, scn["initial"],
                                      self_publish=scn.get("self_publish", True),
                                      patience=scn.get("patience")))
    for o in ops:
        world.register(ArbitrumOperator(o, scn["initial"]))
    for v in vals:
        world.register(ArbitrumValidator(v, scn["initial"]))
    attach_periodic_clock(world, world.timing["t_period"], ops, vals)
    world.timing["sync"] = False


def make_bundle(world, scn):
    return ArbitrumBundle(world.sid, scn["clients"],
                          [f"{OPERATOR}:{o}" for o in scn["operators"]],
                          [f"{VALIDATOR}:{v}" for v in scn["validators"]],
                          scn["initial"])


def env_payload_real(entry):
    return dict(entry)


def party_roles(scn):
    """(role, pids, corruption budget) rows for mirroring the cast."""
    return [(CLIENT, list(scn["clients"]), 1),
            (OPERATOR, list(scn["operators"]), op_budget(scn)),
            (VALIDATOR, list(scn["validators"]), len(scn["validators"]) - 1)]


class EnvTracker:
    """Environment-side account arithmetic for valid submissions."""

    def __init__(self, scn):
        self.scn = scn
        self.state = genesis_state(scn["initial"])

    def ideal_request(self, pid, entry):
        kind = entry["kind"]
        if kind == "open":
            return {"kind": OPEN,
                    "body": {"state": genesis_state(self.scn["initial"])}}
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
    name = "arbitrum"

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
        elif kind == "batch-final":
            key = ("b", ev["seq"])
            if key not in self.done:
                self.done.add(key)
                target = inner.ledger.find(lambda t: t["txid"] == ev["txid"])
                if target:
                    out.append({"kind": UPDATE,
                                "state": target[0]["body"]["batch"],
                                "attachment": {"l1": ev["txid"]}})
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
        return inner.machines[EntityId(pid, inner.sid, CLIENT)].final_len


# -- adversary helpers -----------------------------------------------------


def publish_wrong_batch(world, op_entity, skim=1):
    """Corrupt operator posts a batch whose claimed state inflates its own
    favorite balance; only an honest validator stands in the way."""
    scn_initial = world.machines[op_entity].initial
    view = chain_view(world.ledger, world.sid, scn_initial,
                      world.timing["confirm_depth"], world.round_no,
                      world.timing["t_period"])
    state = view_state(view) or genesis_state(scn_initial)
    seq = len(view["entries"]) + 1
    prev = (genesis_anchor(world.sid) if seq == 1
            else batch_digest(view["entries"][-1]["batch"]))
    wrong = dict(state, height=seq)
    bal = dict(wrong["bal"])
    fav = sorted(bal)[0]
    bal[fav] = bal.get(fav, 0) + skim
    wrong = dict(wrong, bal=bal)
    batch = {"seq": seq, "prev": prev, "txs": [], "post": wrong,
             "by": op_entity.short()}
    ltx = make_tx("batch-publish", {"chain": world.sid, "batch": batch},
                  op_entity.short())
    ltx["sigs"] = [world.certs.sign(op_entity.short(), tx_signable(ltx))]
    world.ledger.submit(ltx)
    return ltx["txid"]


def menu(world, entity, knowledge):
    actions = {}
    if entity.role == OPERATOR:
        actions["publish-wrong"] = lambda args=None: (
            publish_wrong_batch(world, entity) and None)
    if entity.role == VALIDATOR:
        def false_accuse(args=None):
            initial = world.machines[entity].initial
            view = chain_view(world.ledger, world.sid, initial,
                              world.timing["confirm_depth"], world.round_no,
                              world.timing["t_period"])
            if not view["entries"]:
                return None
            target = view["entries"][-1]["txid"]
            proof = make_tx("fraud-proof",
                            {"chain": world.sid, "target": target, "seq": 0,
                             "conflict": f"fraud/{target}/{entity.short()}"},
                            entity.short())
            proof["sigs"] = [world.certs.sign(entity.short(), tx_signable(proof))]
            world.ledger.submit(proof)
            return None
        actions["false-accuse"] = false_accuse
    if entity.role == CLIENT:
        def spam_overdraft(args=None):
            tx = {"op": "pay", "from": entity.pid, "to": "c1", "amt": 999,
                  "nonce": 1}
            for op in world.roles.get(OPERATOR, []):
                world.queue_net(entity, op, {"kind": "tx", "tx": tx})
            return None
        actions["spam-overdraft"] = spam_overdraft
    return actions
