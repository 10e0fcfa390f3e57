"""Process entry point for one spawned worker.

Usage: python -m staradmm.worker_entry <base64-spawn-request>

Exit codes: 0 terminated normally, 2 time limit exceeded, 3 numerical
failure, 4 transport failure.
"""

from __future__ import annotations

import sys

from .runtime import EXIT_CODES, worker_main, spawn_request_from_arg


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m staradmm.worker_entry <base64-request>", file=sys.stderr)
        return 4
    req = spawn_request_from_arg(argv[0])
    outcome = worker_main(req)
    return EXIT_CODES[outcome.exit]


if __name__ == "__main__":
    sys.exit(main())
