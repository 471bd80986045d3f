"""Trace predicates: initialization, safety, liveness, settlement, storage.

Every check consumes a finished run's trace (any object with an `.events`
list) and returns a Verdict.  The checks work on both stackings: real runs
are interpreted through client inputs, refusal/queue notes, and read
outputs; interface runs through submit leaks, exec records, and the same
outputs.  Nothing here mutates a world; the storage-ablation helpers that
do need live machines take a run and work on clones.

A Verdict's witness is a minimal list of events: feeding it back to the
same check (wrapped in any `.events` holder) reproduces the failure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

from .accounts import apply_tx, genesis_state
from .brick import conserves
from .core import CLIENT, OPEN, SETTLEMENT, UPDATE
from .trace import canon

SETTLE_TX_KINDS = ("settle", "peg-out")


@dataclass
class ReadView:
    party: str
    pid: str
    round: int
    step: int
    pointer: int | None
    state: dict | None
    executed: list


@dataclass
class LivenessParams:
    f: dict
    t_l2: int
    t_l1: int

    @classmethod
    def of(cls, params):
        if isinstance(params, cls):
            return params
        return cls(f=dict(params.get("f", {})),
                   t_l2=params["t_l2"], t_l1=params["t_l1"])


@dataclass
class DAReport:
    g_l2: int
    g_l1: int
    reconstruction_ok: bool
    detail: dict = field(default_factory=dict)

    def to_record(self):
        return {"record": "da", "g_l2": self.g_l2, "g_l1": self.g_l1,
                "reconstruction_ok": self.reconstruction_ok,
                "detail": self.detail}


@dataclass
class Verdict:
    name: str
    passed: bool
    witness: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    vacuous: bool = False

    def to_record(self):
        return {"record": "verdict", "property": self.name,
                "pass": self.passed, "vacuous": self.vacuous,
                "params": {k: v for k, v in self.params.items()
                           if k != "witness"},
                "witness_len": len(self.witness)}


def as_trace(events):
    """Wrap a bare event list so a witness can be re-checked."""
    return SimpleNamespace(events=list(events))


# -- trace digestion --------------------------------------------------------


def _pid(party):
    return party.split(":", 1)[1] if ":" in str(party) else str(party)


def corrupted_parties(trace) -> dict:
    """party short name -> round of corruption (first if repeated)."""
    out = {}
    for ev in trace.events:
        if ev.get("t") == "corrupt" and ev.get("party") not in out:
            out[ev["party"]] = ev.get("round", 0)
    return out


def corruption_counts(trace) -> dict:
    out = {}
    for party in corrupted_parties(trace):
        role = str(party).split(":", 1)[0]
        out[role] = out.get(role, 0) + 1
    return out


def last_round(trace) -> int:
    rounds = [ev.get("round", 0) for ev in trace.events]
    return max(rounds) if rounds else 0


def read_views(trace, honest_only=True) -> list[ReadView]:
    bad = set(corrupted_parties(trace)) if honest_only else set()
    views = []
    for ev in trace.events:
        if ev.get("t") != "output":
            continue
        p = ev.get("payload", {})
        if p.get("kind") != "read-result" or ev.get("party") in bad:
            continue
        views.append(ReadView(party=ev["party"], pid=_pid(ev["party"]),
                              round=ev.get("round", 0), step=ev.get("step", 0),
                              pointer=p.get("pointer"), state=p.get("state"),
                              executed=list(p.get("executed", ()))))
    return views


def evidence_key(entry):
    return (entry.get("kind"), entry.get("seq"), canon(entry.get("state")))


def is_prefix(shorter, longer) -> bool:
    keys_a = [evidence_key(e) for e in shorter]
    keys_b = [evidence_key(e) for e in longer]
    return keys_b[:len(keys_a)] == keys_a


def committed_txs(trace) -> list[dict]:
    """Committed transactions reassembled from submit and commit events."""
    bodies = {}
    for ev in trace.events:
        if ev.get("t") == "ledger-submit" and ev.get("accepted"):
            bodies[ev["txid"]] = {"txid": ev["txid"], "kind": ev.get("kind"),
                                  "author": ev.get("author"),
                                  "body": ev.get("body", {})}
    out = []
    for ev in trace.events:
        if ev.get("t") != "ledger-commit":
            continue
        for txid in ev.get("txids", ()):
            tx = bodies.get(txid)
            if tx is not None:
                out.append(dict(tx, height=ev.get("height"),
                                round=ev.get("round")))
    return out


class _TraceLedger:
    """Just enough ledger surface for replaying account evidence."""

    def __init__(self, commits):
        self.commits = commits

    def find(self, pred):
        return [t for t in self.commits if pred(t)]

    def depth(self, tx):
        return 10 ** 9       # everything in the committed past is buried


def outputs_to(trace, pid, kind) -> list[dict]:
    out = []
    for ev in trace.events:
        if ev.get("t") == "output" and _pid(ev.get("party", "")) == pid \
                and ev.get("payload", {}).get("kind") == kind:
            out.append(ev)
    return out


# -- request extraction -----------------------------------------------------

_ENTRY_CLASS = {"open": OPEN, "pay": UPDATE, "deposit": UPDATE,
                "settle": SETTLEMENT}
_NOTE_REQ = {"open": "open", "pay": "pay", "settle": "settle",
             "peg-out": "settle"}


def requests(trace) -> list[dict]:
    """Client requests with outcome annotations, in submission order.

    A request dict has: pid, party, round, step, cls (open/update/
    settlement), entry, refused (bool), queued (note fields or None),
    rid (interface runs only).  Notes pair with inputs first-in first-out
    per party and request word, which mirrors how the clients drain their
    queues.  Corrupted submitters are skipped; their inputs are absorbed
    or adversary-forged, and no guarantee covers them.
    """
    bad = set(corrupted_parties(trace))
    reqs = []
    pending = {}         # (pid, input word) -> indexes awaiting an outcome
    for ev in trace.events:
        t = ev.get("t")
        if t == "input":
            p = ev.get("payload", {})
            if ev.get("party") in bad or ev.get("forced"):
                continue
            if p.get("kind") == "submit":      # interface-run submission
                continue                       # tracked via leak events
            cls = _ENTRY_CLASS.get(p.get("kind"))
            if cls is None:
                continue
            reqs.append({"pid": _pid(ev["party"]), "party": ev["party"],
                         "round": ev.get("round", 0), "step": ev.get("step", 0),
                         "cls": cls, "entry": dict(p), "refused": False,
                         "queued": None, "rid": None, "event": ev})
            key = (reqs[-1]["pid"], p["kind"])
            pending.setdefault(key, []).append(len(reqs) - 1)
        elif t == "note" and ev.get("kind") in ("request-refused",
                                                "request-queued"):
            word = _NOTE_REQ.get(ev.get("req"))
            waiting = pending.get((_pid(ev.get("party", "")), word))
            if not waiting:
                continue
            i = waiting.pop(0)
            if ev["kind"] == "request-refused":
                reqs[i]["refused"] = True
            else:
                reqs[i]["queued"] = {k: ev[k] for k in ("seq", "nonce")
                                     if k in ev}
        elif t == "leak" and isinstance(ev.get("data"), dict) \
                and ev["data"].get("kind") == "submit":
            req = ev["data"]["req"]
            party = f"{CLIENT}:{req['by']}"
            if party in bad:
                continue
            cls = req.get("kind")
            if cls not in (OPEN, UPDATE, SETTLEMENT):
                continue
            reqs.append({"pid": req["by"], "party": party,
                         "round": req.get("round", ev.get("round", 0)),
                         "step": ev.get("step", 0), "cls": cls,
                         "entry": dict(req.get("body", {})),
                         "refused": False, "queued": {},
                         "rid": req.get("rid"), "event": ev})
    return reqs


# -- Definition checks ------------------------------------------------------


def check_correct_initialization(trace) -> Verdict:
    """Every open confirmation is requested beforehand and anchored on chain.

    The chain anchor is either a committed transaction embedding the
    initial state or a committed joining record from every account named
    in it (registration-style bootstraps never put balances on chain).
    """
    name = "correct-initialization"
    bad = set(corrupted_parties(trace))
    commits = committed_txs(trace)
    open_inputs = []
    for ev in trace.events:
        if ev.get("t") != "input" or ev.get("party") in bad:
            continue
        p = ev.get("payload", {})
        if p.get("kind") == "open" or (p.get("kind") == "submit"
                                       and p.get("req", {}).get("kind") == OPEN):
            open_inputs.append(ev)

    def anchored(s_int):
        for tx in commits:
            if _embeds(tx.get("body"), s_int):
                return True
        accounts = set((s_int or {}).get("bal", ()))
        if not accounts:
            return False
        joined = {_pid(t.get("author", "")) for t in commits
                  if t.get("kind") == "open-commit"}
        return accounts <= joined

    for ev in trace.events:
        if ev.get("t") != "output" or ev.get("party") in bad:
            continue
        p = ev.get("payload", {})
        if p.get("kind") != "open-ok":
            continue
        prior = [i for i in open_inputs if i.get("step", 0) <= ev.get("step", 0)]
        if not prior:
            return Verdict(name, False, witness=[ev],
                           params={"reason": "no-honest-open-request"})
        if not anchored(p.get("state")):
            return Verdict(name, False, witness=[ev],
                           params={"reason": "initial-state-not-on-chain"})
    n = sum(1 for ev in trace.events
            if ev.get("t") == "output"
            and ev.get("payload", {}).get("kind") == "open-ok")
    return Verdict(name, True, params={"open_outputs": n}, vacuous=n == 0)


def _embeds(container, target):
    if container == target:
        return target is not None
    if isinstance(container, dict):
        return any(_embeds(v, target) for v in container.values())
    if isinstance(container, list):
        return any(_embeds(v, target) for v in container)
    return False


def _within(f, counts):
    if isinstance(f, int):
        return sum(counts.values()) <= f
    return all(counts.get(role, 0) <= limit for role, limit in f.items()) \
        and all(role in f for role in counts)


def check_safety(trace, f) -> Verdict:
    """Per-party view monotonicity plus pairwise view comparability."""
    name = "safety"
    counts = corruption_counts(trace)
    if not _within(f, counts):
        return Verdict(name, True, vacuous=True,
                       params={"f": f, "corrupted": counts,
                               "reason": "corruptions-exceed-f"})
    views = read_views(trace)
    by_party = {}
    for v in views:
        by_party.setdefault(v.party, []).append(v)
    for party, vs in by_party.items():
        vs.sort(key=lambda v: (v.round, v.step))
        for a, b in zip(vs, vs[1:]):
            if not is_prefix(a.executed, b.executed):
                return Verdict(name, False,
                               witness=[_view_event(a), _view_event(b)],
                               params={"clause": "self-consistency",
                                       "party": party, "f": f})
    flat = sorted(views, key=lambda v: (v.round, v.step))
    for i, a in enumerate(flat):
        for b in flat[i + 1:]:
            if a.party == b.party:
                continue
            if not (is_prefix(a.executed, b.executed)
                    or is_prefix(b.executed, a.executed)):
                return Verdict(name, False,
                               witness=[_view_event(a), _view_event(b)],
                               params={"clause": "view-consistency",
                                       "parties": [a.party, b.party], "f": f})
    return Verdict(name, True, params={"f": f, "views": len(views)},
                   vacuous=not views)


def _view_event(v: ReadView):
    return {"t": "output", "party": v.party, "round": v.round, "step": v.step,
            "payload": {"kind": "read-result", "state": v.state,
                        "pointer": v.pointer, "executed": v.executed}}


def check_liveness(trace, kind, params) -> Verdict:
    """Every valid request of the kind is served inside its latency budget.

    Serving means: a confirmation output for opens and settlements, and for
    updates either an exec record clearing the request (interface runs) or
    evidence of the transfer inside some honest read view (real runs).
    Requests whose deadline lies past the recorded horizon are not judged.
    """
    name = f"liveness-{kind}"
    lp = LivenessParams.of(params)
    counts = corruption_counts(trace)
    if not _within(lp.f, counts):
        return Verdict(name, True, vacuous=True,
                       params={"kind": kind, "f": lp.f, "corrupted": counts,
                               "reason": "corruptions-exceed-f"})
    horizon = last_round(trace)
    bound = lp.t_l2 + lp.t_l1
    views = read_views(trace)
    execs = [ev for ev in trace.events if ev.get("t") == "exec"]
    reqs = [r for r in requests(trace) if r["cls"] == kind]
    judged = unresolved = 0
    seen_pay = 0
    marker = {"t": "horizon", "round": horizon}
    for r in reqs:
        if r["refused"]:
            continue
        if r["cls"] == UPDATE and r["entry"].get("kind") == "pay" \
                and r["rid"] is None:
            seen_pay += 1
            r["pay_index"] = seen_pay
        deadline = r["round"] + bound
        if deadline > horizon:
            unresolved += 1
            continue
        judged += 1
        if not _served(r, deadline, trace, views, execs):
            witness = [r["event"]] + [_view_event(v) for v in views
                                      if v.round <= deadline] + [marker]
            return Verdict(name, False, witness=witness,
                           params={"kind": kind, "pid": r["pid"],
                                   "submit_round": r["round"],
                                   "deadline": deadline,
                                   "t_l2": lp.t_l2, "t_l1": lp.t_l1})
    return Verdict(name, True, vacuous=judged == 0,
                   params={"kind": kind, "judged": judged,
                           "beyond_horizon": unresolved, "f": lp.f})


def _served(r, deadline, trace, views, execs) -> bool:
    pid, cls = r["pid"], r["cls"]
    if cls == OPEN:
        return any(ev.get("round", 0) <= deadline
                   for ev in outputs_to(trace, pid, "open-ok"))
    if cls == SETTLEMENT:
        return any(r["round"] <= ev.get("round", 0) <= deadline
                   for ev in outputs_to(trace, pid, "settle-ok"))
    if r["rid"] is not None:                       # interface run: exact rid
        return any(ev.get("round", 0) <= deadline
                   and r["rid"] in ev.get("rids", ())
                   for ev in execs)
    entry = r["entry"]
    windowed = [v for v in views if v.round <= deadline]
    if entry.get("kind") == "deposit":
        want = sum(1 for q in _earlier_deposits(trace, r))
        return any(_mint_count(v, pid) >= want for v in windowed)
    queued = r.get("queued")
    if queued is None:
        return False                               # accepted but never sent
    if "nonce" in queued:
        return any(_has_tx(v, pid, queued["nonce"]) for v in windowed)
    k = r.get("pay_index", 1)
    return any(_update_count(v) >= k for v in windowed)


def _earlier_deposits(trace, r):
    return [q for q in requests(trace)
            if q["pid"] == r["pid"] and q["entry"].get("kind") == "deposit"
            and q["step"] <= r["step"]]


def _mint_count(view, pid) -> int:
    n = 0
    for e in view.executed:
        for tx in e.get("txs", ()):
            if tx.get("op") == "mint" and tx.get("to") == pid:
                n += 1
    return n


def _has_tx(view, pid, nonce) -> bool:
    for e in view.executed:
        for tx in e.get("txs", ()):
            if tx.get("from") == pid and tx.get("nonce") == nonce:
                return True
    return False


def _update_count(view) -> int:
    return sum(1 for e in view.executed if e.get("kind") == UPDATE)


def check_correct_settlement(trace) -> Verdict:
    """Honest settlement confirmations carry the freshest state on record.

    The settled state must reach the highest sequence any honest view (or
    the settlement itself) attests, unless the settling party explicitly
    asked for an older anchor; and a close or payout record must have
    committed on the chain.
    """
    name = "correct-settlement"
    bad = set(corrupted_parties(trace))
    views = read_views(trace)
    commits = committed_txs(trace)
    settles = [ev for ev in trace.events
               if ev.get("t") == "output" and ev.get("party") not in bad
               and ev.get("payload", {}).get("kind") == "settle-ok"]
    explicit = set()
    for r in requests(trace):
        if r["cls"] == SETTLEMENT and r["entry"].get("seq") is not None:
            explicit.add((r["pid"], r["entry"]["seq"]))
    for ev in settles:
        state = ev["payload"].get("state") or {}
        got = _state_height(state)
        best = got
        for v in views:
            if v.round <= ev.get("round", 0):
                for e in v.executed:
                    best = max(best, _state_height(e.get("state") or {}))
        pid = _pid(ev.get("party", ""))
        if got < best and (pid, got) not in explicit:
            witness = [ev] + [_view_event(v) for v in views
                              if v.round <= ev.get("round", 0)]
            return Verdict(name, False, witness=witness,
                           params={"settled_at": got, "latest_known": best})
        if not any(t.get("kind") in SETTLE_TX_KINDS for t in commits):
            return Verdict(name, False, witness=[ev],
                           params={"reason": "no-close-record-on-chain"})
    return Verdict(name, True, params={"settlements": len(settles)},
                   vacuous=not settles)


def _state_height(state) -> int:
    if "seq" in state:
        return state["seq"]
    return state.get("height", -1)


# -- storage accounting -----------------------------------------------------


def measure_data_availability(trace) -> DAReport:
    """Record counts behind each honest party's latest reconstruction.

    Off-chain records are the evidence entries a view folds over; on-chain
    records are joining commitments, bridge transfers, and (for chains that
    publish their history) the update-bearing commitments themselves.  The
    replay bit re-derives every folded state with the shared transition
    function.
    """
    views = read_views(trace)
    commits = committed_txs(trace)
    ledger = _TraceLedger(commits)
    batches_onchain = any(t.get("kind") == "batch-publish" for t in commits)
    g_l1 = len([t for t in commits
                if t.get("kind") in ("open-commit", "deposit", "batch-publish")
                + SETTLE_TX_KINDS])
    latest = {}
    for v in views:
        cur = latest.get(v.pid)
        if cur is None or (v.round, v.step) >= (cur.round, cur.step):
            latest[v.pid] = v
    per_party = {}
    ok = bool(latest)
    for pid, v in latest.items():
        updates = [e for e in v.executed if e.get("kind") == UPDATE]
        g_l2 = 1 if batches_onchain else len(updates)
        per_party[pid] = g_l2
        ok = ok and _replay(v.executed, ledger)
    g_l2 = min(per_party.values()) if per_party else 0
    if batches_onchain:
        g_l2 = max(per_party.values()) if per_party else 1
    return DAReport(g_l2=g_l2, g_l1=g_l1, reconstruction_ok=ok,
                    detail={"per_party_l2": per_party,
                            "onchain_records": g_l1,
                            "history_on_chain": batches_onchain})


def _replay(executed, ledger) -> bool:
    cur = None
    for e in executed:
        kind, state = e.get("kind"), e.get("state")
        if kind == OPEN:
            cur = state
            continue
        if kind == SETTLEMENT:
            continue           # judged by the settlement check, not replay
        if cur is None:
            return False
        if "txs" in e:
            nxt = cur
            for tx in e["txs"]:
                nxt = apply_tx(nxt, tx, ledger, 0)
                if nxt is None:
                    return False
            nxt = dict(nxt, height=e.get("seq"))
            if nxt != state:
                return False
        else:
            if e.get("seq") != cur.get("seq", 0) + 1 \
                    or not conserves(cur, state):
                return False
        cur = state
    return True


# -- storage ablation (live worlds) ----------------------------------------


def reconstruct(name, world, scn, pid):
    """Pure storage fold: rebuild the party's latest state or return None."""
    if name == "brick":
        return _recon_brick(world, pid)
    if name == "liquid":
        return _recon_liquid(world, scn, pid)
    if name == "arbitrum":
        return _recon_arbitrum(world, scn, pid)
    raise ValueError(f"unknown protocol {name!r}")


def _client_machine(world, pid):
    for ent, m in world.machines.items():
        if ent.role == CLIENT and ent.pid == pid:
            return m
    raise ValueError(f"no client machine {pid!r}")


def _recon_brick(world, pid):
    m = _client_machine(world, pid)
    anchors = world.ledger.find(
        lambda t: t["kind"] == "open-commit" and "state" in t["body"])
    if not anchors:
        return None
    cur = anchors[0]["body"]["state"]
    for e in sorted(m.chain, key=lambda e: e["seq"]):
        if e["seq"] <= cur["seq"]:
            continue
        if e["seq"] != cur["seq"] + 1 or not conserves(cur, e["state"]):
            return None
        cur = e["state"]
    if cur != m.latest()["state"]:
        return None
    return cur


def _recon_liquid(world, scn, pid):
    m = _client_machine(world, pid)
    cur = genesis_state(scn["initial"])
    cd = world.timing["confirm_depth"]
    for entry in m.chain[1:]:
        block = entry["block"]
        if block["height"] != cur["height"] + 1:
            return None
        nxt = cur
        for tx in block["txs"]:
            nxt = apply_tx(nxt, tx, world.ledger, cd)
            if nxt is None:
                return None
        cur = dict(nxt, height=block["height"])
    if cur != m.states[-1]:
        return None
    return cur


def _recon_arbitrum(world, scn, pid):
    from .arbitrum import canonical_view
    m = _client_machine(world, pid)
    view = canonical_view(world.ledger, world.certs, m.me.sid,
                          world.timing["confirm_depth"],
                          world.round_no, world.timing["t_period"])
    want = m.view_pointer if hasattr(m, "view_pointer") else None
    entries = view["entries"][:view["final"]]
    cur = genesis_state(scn["initial"])
    for e in entries:
        cur = e["claimed"]
    if want is not None and len(entries) < want:
        return None
    return cur


def ablation_targets(name, world, pid):
    """Labels plus deleters for every stored update record, one at a time.

    Each deleter mutates the world it is given (use a clone); channel and
    sidechain records live in the client's local chain, rollup records in
    the ledger's committed batch list.
    """
    out = []
    if name in ("brick", "liquid"):
        m = _client_machine(world, pid)
        count = len(m.chain)

        def deleter(idx):
            def run(w):
                _client_machine(w, pid).chain.pop(idx)
            return run

        for idx in range(1, count):
            label = m.chain[idx].get("seq",
                                     m.chain[idx].get("block", {}).get("height"))
            out.append((f"l2-update-{label}", deleter(idx)))
        return out
    batches = [t for t in world.ledger.committed
               if t["kind"] == "batch-publish"]

    def l1_deleter(txid):
        def run(w):
            w.ledger.committed = [t for t in w.ledger.committed
                                  if t["txid"] != txid]
        return run

    for t in batches:
        out.append((f"l1-batch-{t['body']['batch']['seq']}",
                    l1_deleter(t["txid"])))
    return out


# -- arithmetic sanity ------------------------------------------------------


def floor_identity_check(lo: int, hi: int) -> bool:
    """Halves of consecutive integers always rejoin one short of the whole."""
    return all(x // 2 + (x - 1) // 2 == x - 1 for x in range(lo, hi + 1))
