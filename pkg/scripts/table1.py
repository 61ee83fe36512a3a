"""Repeated synthetic transcription runs: output Q2, latent Q2 and parameter MAE."""
import time

from _common import parser, save
from latentforce.experiments import default_config, run_repeats

args = parser(__doc__, repeats=15, seed=0, workers=1).parse_args()
cfg = default_config("transcription")
cfg.seed = args.seed
t0 = time.perf_counter()
runs, summary = run_repeats(cfg, args.repeats, args.workers)
summary["seconds"] = time.perf_counter() - t0
for key in ("q2_output", "q2_latent", "param_mae", "coverage_output", "coverage_latent"):
    s = summary[key]
    print(f"{key:16s} {s['mean']:8.3f} +- {s['std']:.3f}")
save(args.out, "table1.json", summary)
