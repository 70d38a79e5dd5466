#!/usr/bin/env python3
"""Minimal external-scorer adapter: answers 0.5 for every request pair.

Reads JSONL requests {"id", "text_a", "text_b"} on stdin, writes JSONL
responses {"id", "score"} on stdout. Use as a template for wiring real
perplexity / similarity / consistency scorers into `riff.metrics.external_score`.
"""

import json
import sys


def main() -> int:
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        request = json.loads(line)
        print(json.dumps({"id": request["id"], "score": 0.5}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
