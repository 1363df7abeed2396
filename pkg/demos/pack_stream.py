"""Stream a synthetic workload through the two-example packer and report density.

Run: python demos/pack_stream.py [n_examples]
"""
import sys

from mmkit.packer import format_bench, run_stream, short_heavy_workload


if __name__ == "__main__":
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 20_000
    stream = short_heavy_workload(n, seed=0)
    emissions, stats = run_stream(stream)
    print(format_bench(stats))
    for e in emissions[:5]:
        print("emitted", [(m.id, m.enc_len, m.dec_len) for m in e.members])
