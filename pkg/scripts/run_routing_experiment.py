"""
Run Routing Adaptation Experiment

Trains the desk preset over several seeds, with and without the diversity loss, and
checks that routing shifts away from LiDAR in heavy snow, that the diversity loss spreads
the per-category routing centres apart, and that the router does not collapse early.
"""

import argparse
import copy
import itertools
import json
import math
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd

from cli.commands import cmd_eval, cmd_gen_data, cmd_train
from modules.config import load_config
from modules.run_logger import category_means

MIN_SHIFT = 0.05
MIN_EPOCH_ENTROPY = 0.5
WEIGHT_FLOOR = 0.1


def max_center_distance(means: pd.DataFrame) -> float:
    centers = means[["w_L", "w_R", "w_F"]].to_numpy()
    return max((float(np.linalg.norm(a - b)) for a, b in itertools.combinations(centers, 2)), default=0.0)


def run_seed(config, seed: int, root: Path, lambda_div: float) -> dict:
    cfg = copy.deepcopy(config)
    cfg.run.seed = seed
    cfg.loss.lambda_div = lambda_div
    data_dir = root / f"seed_{seed}" / "data"
    run_dir = root / f"seed_{seed}" / f"lambda_div_{lambda_div:g}"
    if not (data_dir / cfg.data.train_file).exists():
        cmd_gen_data(cfg, data_dir)
    result = cmd_train(cfg, data_dir, run_dir)
    report, rows = cmd_eval(cfg, data_dir, result.files["best"], run_dir / "eval")
    means = category_means(rows)

    steps_per_epoch = math.ceil(7 * cfg.data.train_per_category / cfg.optim.batch_size)
    losses = pd.read_csv(result.files["loss_log"])
    first_epoch = losses[losses["step"] < steps_per_epoch]
    epochs = pd.read_csv(result.files["routing_epochs"])
    epoch0 = epochs[epochs["epoch"] == 0]
    collapsed = any(bool((epoch0[col] <= WEIGHT_FLOOR + 1e-6).all()) for col in ("w_L", "w_R", "w_F"))

    return {
        "seed": seed,
        "lambda_div": lambda_div,
        "normal": means.loc["normal"].to_dict(),
        "heavysnow": means.loc["heavysnow"].to_dict(),
        "max_center_distance": max_center_distance(means),
        "ap_bev_05": report.get("total", "bev", 0.5),
        "min_first_epoch_entropy": float(first_epoch["H_bar"].min()),
        "first_epoch_collapsed": collapsed,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--config", default="configs/desk.ini")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="runs/routing_experiment")
    args = parser.parse_args()

    config = load_config(args.config, preset="desk")
    root = Path(args.out)

    print("=== Routing Adaptation Experiment ===")
    print(f"Config: {args.config}")
    print(f"Seeds: {args.seeds}")
    print(f"Epochs: {config.optim.epochs}")
    print(f"Output: {root}")
    print("=" * 50)

    start_time = datetime.now()
    try:
        runs = []
        for seed in args.seeds:
            for lambda_div in (config.loss.lambda_div, 0.0):
                print(f"\nSeed {seed}, lambda_div = {lambda_div:g}...")
                runs.append(run_seed(config, seed, root, lambda_div))

        with_div = [r for r in runs if r["lambda_div"] != 0.0]
        without_div = {r["seed"]: r for r in runs if r["lambda_div"] == 0.0}

        radar_shift = np.mean([(r["heavysnow"]["w_R"] + r["heavysnow"]["w_F"])
                               - (r["normal"]["w_R"] + r["normal"]["w_F"]) for r in with_div])
        lidar_shift = np.mean([r["normal"]["w_L"] - r["heavysnow"]["w_L"] for r in with_div])
        spread_votes = sum(without_div[r["seed"]]["max_center_distance"] < r["max_center_distance"] for r in with_div)
        ap_votes = sum(without_div[r["seed"]]["ap_bev_05"] <= r["ap_bev_05"] for r in with_div)
        majority = len(with_div) // 2 + 1
        guard_ok = all(r["min_first_epoch_entropy"] >= MIN_EPOCH_ENTROPY and not r["first_epoch_collapsed"]
                       for r in with_div)

        checks = {
            "routing shift toward radar in heavy snow": radar_shift >= MIN_SHIFT and lidar_shift >= MIN_SHIFT,
            "diversity loss spreads routing centres": spread_votes >= majority and ap_votes >= majority,
            "no early routing collapse": guard_ok,
        }

        print("\n=== Results ===")
        print(f"(w_R + w_F) heavysnow - normal: {radar_shift:+.4f}")
        print(f"w_L normal - heavysnow:         {lidar_shift:+.4f}")
        print(f"Centre spread larger with L_div: {spread_votes}/{len(with_div)} seeds")
        print(f"AP_BEV@0.5 not higher without L_div: {ap_votes}/{len(with_div)} seeds")
        for name, ok in checks.items():
            print(f"{'PASS' if ok else 'FAIL'}: {name}")

        log_filename = root / f"routing_experiment_{datetime.now().strftime('%Y%m%d_%H%M%S')}.json"
        root.mkdir(parents=True, exist_ok=True)
        with open(log_filename, "w") as f:
            json.dump({"runs": runs, "checks": checks}, f, indent=2, default=float)
        print(f"\nExperiment log saved to: {log_filename}")
        print(f"Total duration: {datetime.now() - start_time}")

    except Exception as e:
        print(f"\n✗ Experiment failed: {str(e)}")
        raise


if __name__ == "__main__":
    main()
