"""Serve a saved policy checkpoint over stdin/stdout for ``ExternalPolicy``.

    python -m vta.policy_server path/to/checkpoint
"""

import sys

from .policy import load_policy, serve_stdio


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m vta.policy_server CHECKPOINT", file=sys.stderr)
        return 1
    policy, ckpt = load_policy(argv[0])
    serve_stdio(policy, ckpt, sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
