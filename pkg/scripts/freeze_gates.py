#!/usr/bin/env python3
"""Freeze the regression gates for the canned benchmark battery.

Runs every experiment in promptloop.benchmarks against the reference
checkpoint and writes the headline numbers to assets/reference/gates.json.
The acceptance suite re-runs the same battery and compares against these
values, so this script is only ever re-run deliberately — after a change
that is *supposed* to move the numbers — and the resulting diff is the
reviewable record of that move.
"""

import argparse
import datetime
import json
import os
import sys
import tempfile
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from promptloop import benchmarks  # noqa: E402
from promptloop.adapter import load_checkpoint  # noqa: E402
from promptloop.harness import _params_digest  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", default=str(benchmarks.CHECKPOINT_PATH))
    ap.add_argument("--out", default=str(benchmarks.GATES_PATH))
    ap.add_argument("--work-dir", default=None,
                    help="keep sweep/experiment artifacts here "
                         "(default: throwaway temp dir)")
    args = ap.parse_args()

    params = load_checkpoint(args.checkpoint)
    gates = {
        "meta": {
            "checkpoint": os.path.relpath(args.checkpoint,
                                          os.path.dirname(args.out)),
            "checkpoint_digest": _params_digest(params),
            "frozen_at": datetime.date.today().isoformat(),
            # regression tolerance for frozen scalars; everything is seeded,
            # so this only absorbs cross-platform floating-point drift
            "tolerance": 0.02,
        }
    }

    def run(name, fn, *fn_args):
        t0 = time.time()
        gates[name] = fn(*fn_args)
        print(f"{name:<22} {time.time() - t0:5.1f}s  "
              + json.dumps(gates[name], sort_keys=True))

    with tempfile.TemporaryDirectory() as tmp:
        work = args.work_dir or tmp
        os.makedirs(work, exist_ok=True)
        run("unseen_recovery", benchmarks.unseen_class_recovery, params)
        run("distant_recovery", benchmarks.distant_miss_recovery, params)
        run("interval_eds", benchmarks.feedback_interval_curve, params,
            os.path.join(work, "interval"))
        run("perturb", benchmarks.click_perturbation_curves, params,
            os.path.join(work, "perturb"))
        run("offset_recall", benchmarks.prompt_age_curve, params,
            os.path.join(work, "offsets"))
        run("style_preload", benchmarks.style_shift_preload, params)
        run("loss_ablation_top1", benchmarks.loss_component_ablation,
            os.path.join(work, "ablation"))
        run("twin_recall", benchmarks.candidate_count_recall,
            os.path.join(work, "twin"))

    with open(args.out, "w") as f:
        json.dump(gates, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
