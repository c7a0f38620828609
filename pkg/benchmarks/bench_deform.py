"""Compare the compiled deformable aggregation kernel with the torch fallback.

    python benchmarks/bench_deform.py [--batch 16] [--size 64]
"""
import argparse
import json

from vfit.kernel_bench import run

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--K", type=int, default=25)
    p.add_argument("--repeat", type=int, default=5)
    a = p.parse_args()
    print(json.dumps(run(a.batch, a.size, a.K, a.repeat), indent=2))
