"""Run every acceptance criterion and print one line per criterion.

    python3 scripts/run_acceptance.py [--cache DIR] [--workers N]

Fills the same cache that tests/test_acceptance.py reads.
"""

import argparse
import logging
import sys
import tempfile
import time
from pathlib import Path

from fedpoison import acceptance

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", default=ROOT / ".acceptance_cache", type=Path)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    start = time.time()
    checks = acceptance.run_all(args.cache, Path(tempfile.mkdtemp()), workers=args.workers)
    for c in checks:
        print(c.line())
    print(f"elapsed {time.time() - start:.0f} s")
    return 0 if all(c.passed for c in checks if c.hard) else 1


if __name__ == "__main__":
    sys.exit(main())
