"""Simulate an imbalanced cohort and compare its rates with the stationary rates."""

import sys

import numpy as np

from thphealth import CohortConfig, make_imbalanced_cohort, write_sequences


def main(out="cohort.jsonl"):
    cfg = CohortConfig.preset("paper-like", n_patients=200, seed=0)
    data = make_imbalanced_cohort(cfg)
    write_sequences(data, out)
    types = np.concatenate([s.types for s in data])
    shares = np.bincount(types, minlength=data.K) / types.size
    exposure = cfg.horizon_days * len(data)
    print(f"{len(data)} patients, {data.n_events} events written to {out}")
    for name, share, rate in zip(data.type_names, shares, cfg.params.stationary_rates()):
        print(f"  {name}: share {share:.3f}, stationary rate {rate:.4f}/day")
    print(f"  pooled empirical rate {data.n_events / exposure:.4f}/day")


if __name__ == "__main__":
    main(*sys.argv[1:])
