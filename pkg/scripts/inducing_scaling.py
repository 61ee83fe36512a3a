"""Per-epoch time of gradient matching as the number of inducing points doubles.

Informational only: the non-solver epoch is expected to grow between linearly
and quadratically in M at desk scale.
"""
import numpy as np

from _common import parser, save
from latentforce.experiments import build_model, default_config, instance_for
from latentforce.lfm import train

args = parser(__doc__, epochs=30).parse_args()
cfg = default_config("transcription")
inst = instance_for(cfg, 0)
rows = []
for M in (8, 16, 32, 64, 128):
    cfg.num_inducing = M
    model, data = build_model(cfg, inst, 0)
    res = train(data, model, type(cfg.train)(preestimation_epochs=args.epochs, finetune_epochs=0))
    secs = float(np.median([s for _, _, s in res.seconds]))
    rows.append({"M": M, "seconds": secs})
    print(f"M={M:4d}  {secs * 1e3:7.2f} ms/epoch")
slope = np.polyfit(np.log([r["M"] for r in rows]), np.log([r["seconds"] for r in rows]), 1)[0]
print(f"log-log slope {slope:.2f}")
save(args.out, "inducing_scaling.json", {"rows": rows, "slope": slope})
