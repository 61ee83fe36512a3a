"""Train the operator on generated transcription data and score held-out sets at two grids."""
from _common import parser, save
from latentforce.experiments import default_config, lfo_experiment

args = parser(__doc__, instances=2000, epochs=50, workers=1).parse_args()
cfg = default_config("transcription")
cfg.lfo.n_instances = args.instances
cfg.lfo.epochs = args.epochs
res = lfo_experiment(cfg, workers=args.workers)
res.pop("net")
print(f"latent Q2 at grid {cfg.lfo.n_times}: {res['test']['q2_latent']:.1f}")
print(f"latent Q2 at grid {cfg.lfo.eval_times}: {res['test_fine']['q2_latent']:.1f}")
print(f"inference {res['inference_seconds'] * 1e3:.2f} ms, single LFM fit {res['lfm_seconds']:.1f} s, "
      f"speedup {res['speedup']:.0f}x")
save(args.out, "lfo_transcription.json", res)
