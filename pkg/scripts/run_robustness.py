"""Train every strategy on a synthetic corpus with token deletion or swapping applied to the train split.

Extra arguments are passed through to ``amplify robustness``, e.g. ``--seeds 0,1``.
"""
from _common import parser, run

if __name__ == "__main__":
    args, extra = parser(__doc__.splitlines()[0]).parse_known_args()
    run("robustness", args, extra)
