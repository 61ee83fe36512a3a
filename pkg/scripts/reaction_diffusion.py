"""Single reaction-diffusion latent force fit on a synthetic field."""
from _common import parser, save
from latentforce.experiments import default_config, run_lfm

args = parser(__doc__, seed=0).parse_args()
run = run_lfm(default_config("reaction_diffusion"), args.seed)
r = run.report.to_dict()
print(f"output Q2 {r['q2_output']:.1f}, latent Q2 {r['q2_latent']:.1f}, param MAE {r['param_mae']:.3f}, "
      f"{run.wall:.1f}s")
save(args.out, f"reaction_diffusion_{args.seed}.json", {**r, "seconds": run.wall})
