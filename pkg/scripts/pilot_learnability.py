"""Calibration run for the learnability target.

Runs the recipe in ``dacvlm.pilot`` once and writes a JSONL log next to this
script (``pilot_learnability.log``). The acceptance threshold is set from
that log.

    python3 scripts/pilot_learnability.py [--log PATH]
"""
import argparse
import json
from pathlib import Path

from dacvlm.pilot import LEARNABILITY_THRESHOLD, run_learnability


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--log", default=str(Path(__file__).with_name("pilot_learnability.log")))
    args = ap.parse_args()
    result = run_learnability(log_path=args.log)
    print(json.dumps(result, indent=2, sort_keys=True))
    print(f"threshold {LEARNABILITY_THRESHOLD:.2f}: {'met' if result['accuracy'] >= LEARNABILITY_THRESHOLD else 'not met'}")


if __name__ == "__main__":
    main()
