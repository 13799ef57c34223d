"""Per-frame latency of the filter and mesh chain, as median and p95 over N frames."""

import argparse
import json

from volcap.pipeline import PipelineConfig, run_bench


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--no-refine", action="store_true")
    args = p.parse_args()

    cfg = PipelineConfig(seed=args.seed)
    if args.no_refine:
        cfg = PipelineConfig(seed=args.seed, stages=type(cfg.stages)(refine=False))
    rep = run_bench(cfg, args.frames)
    rep.pop("mesh_hashes")
    for key in ("filter_frame", "mesh_chain"):
        print(f"{key:12s} median {rep[key]['median_ms']:6.2f} ms  p95 {rep[key]['p95_ms']:6.2f} ms  (n={rep[key]['n']})")
    print(json.dumps(rep, indent=2))


if __name__ == "__main__":
    main()
