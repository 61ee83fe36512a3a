"""Does gradient-matching pre-estimation speed up solver fine-tuning?"""
import numpy as np

from _common import parser, save
from latentforce.experiments import default_config, preestimation_comparison

args = parser(__doc__, seeds=10).parse_args()
rows = preestimation_comparison(default_config("transcription"), range(args.seeds))
print("seed  first_pre  first_random  epochs_pre  epochs_random  sec_pre  sec_random")
for r in rows:
    print(f"{r['seed']:4d} {r['first_pre']:10.1f} {r['first_random']:13.1f} {r['epochs_pre']!s:>11} "
          f"{r['epochs_random']!s:>14} {r['seconds_pre'] or float('nan'):8.2f} {r['seconds_random'] or float('nan'):11.2f}")
wins = sum(r["first_pre"] >= r["first_random"] for r in rows)
print(f"pre-estimated first ELBO higher in {wins}/{len(rows)} seeds")
print("median fine epochs to threshold:", np.median([r["epochs_pre"] for r in rows]),
      "vs", np.median([r["epochs_random"] for r in rows]))
save(args.out, "preestimation.json", rows)
