"""
Run Loss-Weight Sweep

Varies one of lambda_aux, lambda_div, lambda_ent at a time around the defaults, trains the
configured preset for each setting and records AP_BEV@0.5 and AP_3D@0.5 on the test split.
"""

import argparse
import copy
from datetime import datetime
from pathlib import Path

import pandas as pd

from cli.commands import cmd_eval, cmd_gen_data, cmd_train
from modules.config import load_config

SWEEP = {
    "lambda_aux": (0.0, 0.05, 0.1, 0.2),
    "lambda_div": (0.0, 0.01, 0.02, 0.05),
    "lambda_ent": (0.0, 0.005, 0.01, 0.02),
}


def sweep_settings(config):
    """(axis, value) pairs, one axis varied at a time; defaults appear once"""
    seen = set()
    for axis, values in SWEEP.items():
        for value in values:
            cfg = copy.deepcopy(config)
            setattr(cfg.loss, axis, value)
            key = (cfg.loss.lambda_aux, cfg.loss.lambda_div, cfg.loss.lambda_ent)
            if key in seen:
                continue
            seen.add(key)
            yield axis, value, cfg


def main():
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--config", default="configs/desk.ini")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/hparam_sweep")
    args = parser.parse_args()

    config = load_config(args.config, seed=args.seed)
    root = Path(args.out)
    data_dir = root / "data"

    print("=== Loss-Weight Sweep ===")
    print(f"Config: {args.config}")
    print(f"Seed: {config.seed}")
    for axis, values in SWEEP.items():
        print(f"{axis}: {values}")
    print("=" * 50)

    start_time = datetime.now()
    try:
        if not (data_dir / config.data.train_file).exists():
            cmd_gen_data(config, data_dir)

        rows = []
        for axis, value, cfg in sweep_settings(config):
            run_dir = root / f"{axis}_{value:g}"
            print(f"\n{axis} = {value:g}...")
            result = cmd_train(cfg, data_dir, run_dir)
            report, _ = cmd_eval(cfg, data_dir, result.files["best"], run_dir / "eval")
            rows.append({
                "lambda_aux": cfg.loss.lambda_aux,
                "lambda_div": cfg.loss.lambda_div,
                "lambda_ent": cfg.loss.lambda_ent,
                "ap_bev_05": 100.0 * report.get("total", "bev", 0.5),
                "ap_3d_05": 100.0 * report.get("total", "3d", 0.5),
            })

        table = pd.DataFrame(rows)
        root.mkdir(parents=True, exist_ok=True)
        table.to_csv(root / "sweep.csv", index=False)
        print("\n=== Sweep Results ===")
        print(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
        print(f"\nSweep table saved to: {root / 'sweep.csv'}")
        print(f"Total duration: {datetime.now() - start_time}")
        print("\n✓ Sweep completed successfully!")

    except Exception as e:
        print(f"\n✗ Sweep failed: {str(e)}")
        raise


if __name__ == "__main__":
    main()
