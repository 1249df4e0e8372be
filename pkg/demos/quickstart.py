"""Two synthetic sites, one adaptation task: FLARE against the Source-only baseline.

Runs in well under a minute with a shrunk network. Usage::

    python demos/quickstart.py [seed]
"""

import sys

from flare.datamodel import SynthSpec, build_task, subsample_regime, synth_generate
from flare.evaluation import evaluate, train_flare, train_source_only
from flare.trainer import TrainConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

# Site 1 is the fully labeled source; site 2 is the target. The target keeps
# 10% of its training split as labels, the rest of the site is D_u.
spec = SynthSpec(sites=2, counts=(400, 40), separation=7.0, shift=0.75,
                 site_counts=((400, 40), (1000, 100)))
site1, site2 = synth_generate(spec, seed)
task = subsample_regime(build_task(site1, site2, spec.manifest, "imbalanced", seed), 0.1, 1.0, seed)
print(f"source {len(task.source)} rows, D_t {task.target_labeled.class_counts(2).tolist()}, "
      f"D_u {len(task.target_unlabeled)} rows, {task.manifest.total_dim} features in "
      f"{len(task.manifest.views)} views")

config = TrainConfig(epochs=15, lr=1e-3, seed=seed, steps_rule="max", translator_hidden=(64, 64),
                     extractor_hidden=64, latent=32)
Xu, yu = task.target_unlabeled.X, task.target_unlabeled.y
for name, train in (("Source-only", train_source_only), ("FLARE", train_flare)):
    r = evaluate(train(task, config).proba(Xu), yu)
    print(f"{name:12s} SEN {r.sen:.3f}  SPE {r.spe:.3f}  F1 {r.f1:.3f}  G-mean {r.gmean:.3f}")
