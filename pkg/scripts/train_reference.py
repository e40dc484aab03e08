#!/usr/bin/env python3
"""Train the reference adapter checkpoint committed under assets/reference/.

Default profile: 200 training scenarios at the stock simulator settings,
stock adapter and training hyperparameters. The held-out alignment gate
(top-1 >= 0.9) and the frozen experiment gates in tests/test_acceptance.py
were taken from the run this script produced; re-running it reproduces the
checkpoint bit-for-bit.
"""

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from promptloop.harness import TrainSpec, train  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default=os.path.join(
        os.path.dirname(__file__), "..", "assets", "reference"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scenarios", type=int, default=200)
    ap.add_argument("--steps", type=int, default=1500)
    args = ap.parse_args()

    tspec = TrainSpec(
        train={"steps": args.steps},
        n_scenarios=args.scenarios,
        n_eval_scenarios=20,
        n_eval_samples=500,
        seed=args.seed,
    )
    _, summary = train(tspec, args.out_dir)
    print(json.dumps({"digest": summary["digest"],
                      "final_loss": summary["final_loss"],
                      "alignment": summary["alignment"]}, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
