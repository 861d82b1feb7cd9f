"""Paired desk-scale ablations: multi-distance strides and the auxiliary losses.

    python scripts/ablations.py mdi --work /tmp/abl     # 64^3 grid, strides (1,2,4) vs (1)
    python scripts/ablations.py aux --work /tmp/abl     # tiny preset with and without the extra losses

Both arms of a pair share the scene, seed and iteration budget.
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

import torch

from dynvox.experiments import convergence_config, ensure_scene, mdi_config, run_experiment

ARMS = {
    "mdi": {"strides_1_2_4": lambda s: mdi_config((1, 2, 4), seed=s), "strides_1": lambda s: mdi_config((1,), seed=s)},
    "aux": {"aux_on": lambda s: convergence_config(seed=s),
            "aux_off": lambda s: convergence_config(seed=s, lambda_all=0.0, lambda_bg=0.0)},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("which", choices=sorted(ARMS))
    ap.add_argument("--work", default="/tmp/dynvox_ablations")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    work = Path(args.work)
    data = ensure_scene(work / "scene", seed=args.seed)
    report = {}
    for name, make in ARMS[args.which].items():
        report[name] = run_experiment(data, make(args.seed), work / args.which / name).to_json()
        print(name, json.dumps(report[name]))
    a, b = (report[k]["psnr"]["test"] for k in ARMS[args.which])
    report["heldout_gain_db"] = a - b
    print(json.dumps(report, indent=2))
    (work / f"{args.which}.json").write_text(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
