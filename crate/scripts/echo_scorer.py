#!/usr/bin/env python3
"""Reference external scorer in Python, wire-compatible with the bundled
Rust echo scorer: score(q, i) = q + i / 1000.

Use it to check a non-Rust backend against the protocol:

    axn build-g ... --scorer "exec:python3 scripts/echo_scorer.py"

Swap score_batch() for real model calls to attach an actual scorer.
"""

import json
import sys


def score_batch(query_id, item_ids):
    return [query_id + i / 1000.0 for i in item_ids]


def main():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            print(json.dumps({"op": "error", "reason": "bad json"}), flush=True)
            continue
        op = msg.get("op")
        if op == "hello":
            print(
                json.dumps({"op": "hello", "version": 1, "name": "echo-scorer-py"}),
                flush=True,
            )
        elif op == "score":
            scores = score_batch(msg.get("query_id", 0), msg.get("item_ids", []))
            print(json.dumps({"op": "score", "scores": scores}), flush=True)
        elif op == "shutdown":
            break
        else:
            print(json.dumps({"op": "error", "reason": "unknown op"}), flush=True)


if __name__ == "__main__":
    main()
