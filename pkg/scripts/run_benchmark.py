"""Run classical matching and TTM on the bundled synthetic scene and print a summary.

    python3 scripts/run_benchmark.py --rot_classical_count 512 --snr 1.0
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from tensormatch.cli import main as cli_main


def parse_args():
    p = argparse.ArgumentParser(formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--rot_classical_count", type=int, default=512)
    p.add_argument("--rot_build_count", type=int, default=20000)
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--scene_seed", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None, help="where to keep the JSON result")
    return p.parse_args()


def main():
    args = parse_args()
    out = Path(args.out) if args.out else Path(tempfile.mkdtemp()) / "benchmark.json"
    argv = ["benchmark", "--rot_classical_count", str(args.rot_classical_count),
            "--rot_build_count", str(args.rot_build_count), "--scene_seed", str(args.scene_seed),
            "--threads", str(args.threads), "--out", str(out), "--log_level", "WARNING"]
    if args.snr is not None:
        argv += ["--snr", str(args.snr)]
    code = cli_main(argv)
    if code:
        return code
    res = json.loads(out.read_text())
    w = res["wall_times"]
    print(f"\ncorrelations: classical {res['n_correlations_classical']}, ttm {res['n_correlations_ttm']}, "
          f"ratio {res['ratio']}")
    print(f"wall time: classical {w['classical_s']:.1f} s, ttm build {w['ttm_build_s']:.1f} s, "
          f"ttm match {w['ttm_match_s']:.2f} s")
    if res["position_error"]:
        for k in res["position_error"]:
            print(f"{k:10s} position error {res['position_error'][k]:.2f} vox, "
                  f"rotation error {res['angular_error_deg'][k]:.1f} deg")
    for n, g in res["reference_grids"].items():
        print(f"grid {n:>6s}: ratio {g['ratio']}  {'; '.join(g['notes'])}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
