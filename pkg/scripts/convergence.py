"""Train the tiny preset on the desk-scale moving-sphere scene and report PSNR per split.

    python scripts/convergence.py --work /tmp/conv [--config overrides.txt] [--spec scene.json]
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

import torch

from dynvox.config import TrainConfig
from dynvox.datasets import SceneSpec
from dynvox.experiments import convergence_config, ensure_scene, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="/tmp/dynvox_convergence")
    ap.add_argument("--config", help="key = value overrides on the tiny preset")
    ap.add_argument("--spec", help="scene spec JSON (default: built-in moving sphere)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-aux", action="store_true", help="train without the two auxiliary losses")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    work = Path(args.work)
    data = ensure_scene(work / "scene", SceneSpec.load(args.spec) if args.spec else None, args.seed)
    config = convergence_config(seed=args.seed)
    if args.config:
        config = TrainConfig.load(args.config, config)
    if args.no_aux:
        config = config.replace(lambda_all=0.0, lambda_bg=0.0)
    rep = run_experiment(data, config, work / "run")
    out = rep.to_json() | {"median_loss_first_200": rep.median_loss(0, 200),
                           "median_loss_last_200": rep.median_loss(-200, None)}
    print(json.dumps(out, indent=2))
    (work / "report.json").write_text(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
