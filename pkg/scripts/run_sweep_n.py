"""Sweep the number of Beta draws behind Amplify's mixing weight on the synthetic corpus.

Extra arguments are passed through to ``amplify sweep-n``, e.g. ``--seeds 0,1``.
"""
from _common import parser, run

if __name__ == "__main__":
    args, extra = parser(__doc__.splitlines()[0]).parse_known_args()
    run("sweep-n", args, extra)
