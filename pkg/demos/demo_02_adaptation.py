"""
Adapting a source model to an unlabelled target domain
======================================================

A model trained on one labelled domain loses accuracy on another one whose
appearance statistics differ.  Here the synthetic generator produces both
domains, and we follow mean average precision through each stage:

* direct transfer of the source model
* self-similarity grouping (pseudo labels from clustering, one per view)
* the semi-supervised variant, with one annotated sample per cluster
* the same with the grouping loss trained jointly

Takes about half a minute on one core.
"""

import time
import warnings

from ssg import evaluate, generate, pretrain, run_semi, run_ssg
from ssg.config import load_config
from ssg.synth import SynthSpec

warnings.simplefilter("ignore")

source, target, query, gallery = generate(SynthSpec(seed=42))
print("source %d, target %d, query %d, gallery %d"
      % (len(source), len(target), len(query), len(gallery)))

# the desk preset scales learning rates for epochs that hold a few batches
cfg = load_config(overrides={"preset": "desk", "seed": "42"}).pipeline()

t0 = time.time()
base, trace = pretrain(source, cfg)
print("pretrain loss %.1f -> %.1f" % (trace[0], trace[-1]))

def mAP(params):
    return evaluate(params, query, gallery, cfg.embedder).mAP

print("direct transfer  mAP %.4f" % mAP(base))

adapted, history = run_ssg(base, target, cfg)
for row in history:
    print("  iteration %2d  clusters/view %s  noise/view %s"
          % (row["iteration"], row["clusters_per_view"], row["noise_per_view"]))
print("grouping         mAP %.4f" % mAP(adapted))

semi, _ = run_semi(base, target, cfg, joint=False)
print("+ annotation     mAP %.4f" % mAP(semi))

joint, _ = run_semi(base, target, cfg, joint=True)
print("+ joint training mAP %.4f" % mAP(joint))
print("%.0f s" % (time.time() - t0))
