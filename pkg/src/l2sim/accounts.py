"""Shared account-model arithmetic for the committee and rollup protocols.

States map party ids to balances and per-sender nonces, plus the set of L1
deposit txids already minted and the current chain height.  Transactions are
plain dicts; application is pure except for the deposit-depth lookup, which
consults the ledger so mints can only reference sufficiently buried deposits.
"""

from __future__ import annotations

from .trace import digest


def genesis_state(initial: dict) -> dict:
    return {"bal": dict(sorted(initial.items())),
            "nonce": {p: 0 for p in sorted(initial)},
            "minted": [], "height": 0}


def l2_txid(tx) -> str:
    return digest(["l2tx", tx])


def apply_tx(state, tx, ledger, confirm_depth):
    bal = dict(state["bal"])
    nonce = dict(state["nonce"])
    minted = list(state["minted"])
    op = tx.get("op")
    if op == "mint":
        ref = tx.get("ref")
        if ref in minted:
            return None
        dep = ledger.find(lambda t: t["txid"] == ref and t["kind"] == "deposit")
        if not dep or ledger.depth(dep[0]) < confirm_depth:
            return None
        body = dep[0]["body"]
        if body.get("to") != tx.get("to") or body.get("amt") != tx.get("amt"):
            return None
        bal[tx["to"]] = bal.get(tx["to"], 0) + tx["amt"]
        minted.append(ref)
    elif op in ("pay", "peg-out"):
        frm, amt = tx.get("from"), tx.get("amt", 0)
        if frm not in bal or amt <= 0 or bal[frm] < amt:
            return None
        if tx.get("nonce") != nonce.get(frm, 0) + 1:
            return None
        bal[frm] -= amt
        nonce[frm] = tx["nonce"]
        if op == "pay":
            to = tx.get("to")
            if to not in bal:
                return None
            bal[to] += amt
    else:
        return None
    return {"bal": bal, "nonce": nonce, "minted": sorted(minted),
            "height": state["height"]}


def apply_txs(state, txs, ledger, confirm_depth, height):
    """Folds a whole transaction list; None if any step is invalid."""
    cur = state
    for tx in txs:
        cur = apply_tx(cur, tx, ledger, confirm_depth)
        if cur is None:
            return None
    return dict(cur, height=height)


def ripe_deposits(ledger, sid, state, confirm_depth):
    """Mint transactions for every buried, not-yet-minted bridge deposit."""
    deps = ledger.find(
        lambda t: t["kind"] == "deposit" and t["body"].get("chain") == sid)
    out = []
    for d in deps:
        if d["txid"] in state["minted"]:
            continue
        if ledger.depth(d) >= confirm_depth:
            out.append({"op": "mint", "to": d["body"]["to"],
                        "amt": d["body"]["amt"], "ref": d["txid"]})
    return sorted(out, key=lambda t: t["ref"])
