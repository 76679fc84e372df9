"""Write the shipped synthetic 5-minute price and demand CSVs.

    python scripts/make_synthetic_day.py [--seed 0]
"""
import argparse

from dsomarket.feeds import shipped_feed_paths, synthetic_day, write_series


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    lmp, demand = synthetic_day(args.seed)
    lmp_path, demand_path = shipped_feed_paths()
    write_series(lmp, lmp_path)
    write_series(demand, demand_path)
    print(f"mean lmp {lmp.mean():.6f} $/kWh, peak demand {demand.values.max():.0f} MW")


if __name__ == "__main__":
    main()
