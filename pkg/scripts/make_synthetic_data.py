#!/usr/bin/env python3
"""Generate the synthetic flow datasets as CSV files for the CLI.

Families (generative rules documented in flowgnn.synth):
  feature   -- labels follow byte volume; topology is noise
  topology  -- labels follow per-window fan-out structure; features are noise
  temporal  -- labels follow position inside same-source bursts; three
               endpoint universes (netA/netB/netC) for cross-network
               pre-training experiments

Writes one CSV per dataset plus the shared schema file that `flowgnn
ingest --schema` expects.
"""

import argparse
from pathlib import Path

from flowgnn.synth import (feature_pattern, temporal_pattern,
                           topology_pattern, write_flow_csv,
                           write_schema_file)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--feature-flows", type=int, default=400)
    parser.add_argument("--topology-windows", type=int, default=30)
    parser.add_argument("--temporal-windows", type=int, default=30)
    args = parser.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_schema_file(out / "schema.txt")

    datasets = {
        "feature.csv": feature_pattern(n_flows=args.feature_flows,
                                       seed=args.seed),
        "topology.csv": topology_pattern(n_windows=args.topology_windows,
                                         seed=args.seed + 1),
    }
    for i, network in enumerate(("netA", "netB", "netC")):
        datasets[f"temporal_{network}.csv"] = temporal_pattern(
            n_windows=args.temporal_windows, sources_per_window=2,
            burst_len=6, seed=args.seed + 100 * (i + 1), network=network)

    for name, records in datasets.items():
        write_flow_csv(records, out / name)
        attacks = sum(1 for r in records if r.label > 0)
        print(f"{out / name}: {len(records)} flows ({attacks} attack)")
    print(f"schema: {out / 'schema.txt'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
