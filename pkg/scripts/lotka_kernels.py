"""Predator-prey extrapolation: periodic against RBF prior on the latent prey."""
from _common import parser, save
from latentforce.experiments import default_config, kernel_comparison

args = parser(__doc__, seeds=10).parse_args()
rows = kernel_comparison(default_config("lotka"), range(args.seeds))
for r in rows:
    print(f"seed {r['seed']}: extrapolation Q2 periodic {r['periodic']:7.1f}  rbf {r['rbf']:7.1f}")
print(f"periodic better in {sum(r['periodic'] > r['rbf'] for r in rows)}/{len(rows)} seeds")
save(args.out, "lotka_kernels.json", rows)
