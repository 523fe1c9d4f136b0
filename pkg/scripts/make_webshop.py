"""Regenerate the bundled webshop program model.

    python scripts/make_webshop.py > src/afetm/data/webshop.json

Function bodies are written as step lists: a list of callees is one straight
block, a tuple of lists is a branch whose arms rejoin afterwards.  Hot helper
calls are sprinkled into straight blocks from a fixed seed so that helpers
dominate the execution frequencies.
"""

import json
import sys

import numpy as np

HOT = ["mem_alloc", "str_copy", "hash_key", "lock_acquire"]

BODIES = {
    "serve": "entry",
    "accept_conn": [["read_header"], ["decode_url"]],
    "parse_request": [["sanitize"], ["auth_check"], (["cache_get"], [])],
    "read_header": [[], ([], ["log_error"])],
    "decode_url": [],
    "h_browse": [["list_products"], (["fetch_product"], ["recommend"]), ["render_item"]],
    "h_search": [["tokenize"], (["spell_fix", "query_index"], ["query_index"]), ["rank_results"]],
    "h_cart": [["load_session"], (["add_item"], ["remove_item"], ["log_error"]), ["update_totals"]],
    "h_buy": [["validate_cart"], (["apply_coupon"], ["price_lookup"]), ["fraud_check"],
              (["charge_card"], ["log_error"]), (["reserve_stock", "ship_order"], ["reserve_stock"]),
              ["send_receipt"]],
    "list_products": [["db_query"], (["cache_put"], [])],
    "fetch_product": [["cache_get"], (["db_query"], [])],
    "render_item": [(["render_item"], []), ["str_copy"]],
    "recommend": [(["db_query"], ["cache_get"])],
    "tokenize": [],
    "query_index": [["db_query"], (["cache_put"], ["log_error"])],
    "rank_results": [(["sanitize"], [])],
    "spell_fix": [],
    "load_session": [["auth_check"], (["cache_get"], ["db_query"])],
    "add_item": [["db_query"]],
    "remove_item": [["db_query"]],
    "update_totals": [(["price_lookup"], [])],
    "validate_cart": [["load_session"], (["sanitize"], ["log_error"])],
    "apply_coupon": [["db_query"]],
    "price_lookup": [(["cache_get"], ["db_query"])],
    "fraud_check": [(["db_query"], []), (["log_error"], [])],
    "charge_card": [["auth_check"], (["db_query"], ["log_error"])],
    "reserve_stock": [["db_query"]],
    "ship_order": [(["db_query"], ["cache_put"])],
    "send_receipt": [["render_html"]],
    "db_query": [(["cache_put"], [])],
    "cache_get": [],
    "cache_put": [],
    "auth_check": [(["log_error"], [])],
    "sanitize": [],
    "render_html": [],
    "render_json": [],
    "render_cached": [["cache_get"]],
    "compress_gzip": [],
    "compress_none": [],
    "compress_br": [],
    "set_cookie": [],
    "audit_record": [["db_query"]],
    "metrics_push": [],
    "send_response": [["write_socket"]],
    "write_socket": [],
    "log_error": [],
}

REQUESTS = {"browse": "h_browse", "search": "h_search", "cart": "h_cart", "buy": "h_buy"}
EPILOGUE = [("render_html", "render_json", "render_cached"),
            ("compress_gzip", "compress_none", "compress_br"),
            ("set_cookie", "audit_record", "metrics_push")]
RECURSIVE = {"render_item": 2}
# Executed before the first helper call, so they stay helper-free.  Each hot
# helper is first called right after a repeat call of one of these markers,
# which keeps a crash in a helper distinguishable from a crash in the marker.
COLD = {"accept_conn", "read_header", "decode_url", "parse_request", "sanitize", "auth_check", "cache_get",
        "log_error"}
PROLOGUE = ["decode_url", "mem_alloc", "read_header", "str_copy", "sanitize", "hash_key", "auth_check",
            "lock_acquire"]


def hot_calls(rng):
    k = int(rng.integers(10, 16))
    return [str(h) for h in rng.choice(HOT, size=k)]


def chain(blocks, calls, hot):
    """Straight-line run of blocks, one callee per block; returns (first, last)."""
    first = last = None
    for c in calls or [None]:
        b = {"label": len(blocks), "succ": [], "calls": ([c] if c else []) + hot()}
        blocks.append(b)
        if last is not None:
            last["succ"].append(b["label"])
        first = first or b
        last = b
    return first, last


def body_blocks(steps, rng, cold=False):
    blocks = []
    hot = (lambda: []) if cold else (lambda: hot_calls(rng))
    open_ends = [chain(blocks, [], lambda: [])[1]]
    for step in steps:
        arms = [chain(blocks, step, hot)] if isinstance(step, list) else [chain(blocks, arm, lambda: []) for arm in step]
        for e in open_ends:
            e["succ"].extend(a[0]["label"] for a in arms)
        open_ends = [a[1] for a in arms]
    _, tail = chain(blocks, [], hot)
    for e in open_ends:
        e["succ"].append(tail["label"])
    return blocks


def serve_blocks(rng):
    blocks = []
    _, last = chain(blocks, ["accept_conn", "parse_request"], lambda: [])
    for i in range(0, len(PROLOGUE), 2):
        b = {"label": len(blocks), "succ": [], "calls": PROLOGUE[i:i + 2]}
        last["succ"].append(b["label"])
        blocks.append(b)
        last = b
    last["dispatch"] = {}
    open_ends = []
    for req, handler in REQUESTS.items():
        first, end = chain(blocks, [handler], lambda: hot_calls(rng))
        last["succ"].append(first["label"])
        last["dispatch"][req] = first["label"]
        open_ends.append(end)
    for stage in EPILOGUE:
        arms = [chain(blocks, [fn], lambda: []) for fn in stage]
        for e in open_ends:
            e["succ"].extend(a[0]["label"] for a in arms)
        open_ends = [a[1] for a in arms]
    _, end = chain(blocks, ["send_response"], lambda: hot_calls(rng))
    for e in open_ends:
        e["succ"].append(end["label"])
    return blocks


def main():
    rng = np.random.default_rng(20240601)
    functions = []
    for fid, steps in BODIES.items():
        blocks = serve_blocks(rng) if steps == "entry" else body_blocks(steps, rng, fid in COLD)
        fn = {"id": fid, "params": int(rng.integers(0, 3)), "cost": 1.0, "blocks": blocks}
        if fid in RECURSIVE:
            fn["max_depth"] = RECURSIVE[fid]
        functions.append(fn)
    for h in HOT:
        functions.append({"id": h, "params": 1, "cost": 1.0, "blocks": [{"label": 0, "succ": [], "calls": []}]})
    model = {
        "entry": "serve",
        "rng_seed": 7,
        "variants": 2,
        "loggers": ["log_error"],
        "functions": functions,
        "workloads": [{"id": "default", "mix": {"browse": 0.4, "search": 0.25, "cart": 0.2, "buy": 0.15},
                       "rate": 20.0}],
    }
    json.dump(model, sys.stdout, indent=1)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
