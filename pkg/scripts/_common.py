"""Shared bits for the experiment scripts: synthetic data on demand and a CLI passthrough."""
import argparse
import sys
from pathlib import Path

from amplify.cli import main as cli_main
from amplify.data import SyntheticSpec, write_synthetic

ROOT = Path(__file__).resolve().parent.parent


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--data", type=Path, default=ROOT / "runs" / "data",
                   help="directory with train.jsonl/test.jsonl (generated if missing)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.cfg")
    p.add_argument("--data-seed", type=int, default=0)
    return p


def ensure_data(path: Path, seed: int) -> None:
    if not (path / "train.jsonl").exists():
        write_synthetic(SyntheticSpec(), seed, path)


def run(command: str, args, extra) -> None:
    ensure_data(args.data, args.data_seed)
    argv = [command, "--train", str(args.data / "train.jsonl"), "--test", str(args.data / "test.jsonl"),
            "--out", str(args.out), "--config", str(args.config), *extra]
    sys.exit(cli_main(argv))
