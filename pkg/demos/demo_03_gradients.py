"""
Checking hand-written gradients
===============================

Every objective returns its own gradient, derived by hand through the
pooling and the patch map.  Central differences are slow but hard to get
wrong, so they are the reference.
"""

import numpy as np

from ssg.embedder import EmbedderConfig, embed_grids
from ssg.gradcheck import max_relative_error, numerical_grad
from ssg.losses import loss_ssg, triplet_batch_hard
from ssg.types import ModelParams

cfg = EmbedderConfig()
rng = np.random.default_rng(3)

# batch-hard triplet on raw vectors first: 4 identities x 3 samples
x = rng.normal(size=(12, 5))
y = np.repeat(np.arange(4), 3)
loss, grad = triplet_batch_hard(x, y, 0.5)
print("triplet loss %.4f" % loss)

h = 1e-6
bump = np.zeros_like(x)
bump[0, 0] = h
fd = (triplet_batch_hard(x + bump, y, 0.5)[0] - triplet_batch_hard(x - bump, y, 0.5)[0]) / (2 * h)
print("d loss / d x[0,0]: analytic %.8f  numeric %.8f" % (grad[0, 0], fd))

# now through the whole model, with one label column per view
params = ModelParams.init(cfg.d_in, cfg.channels, cfg.embed_dim, 4, rng)
grids = rng.normal(size=(12, cfg.height, cfg.width, cfg.d_in))
y_parts = [rng.permutation(y) for _ in range(cfg.part_count)]

def objective(p):
    return loss_ssg(embed_grids(grids, p, cfg), y, y_parts)[0]

feats = embed_grids(grids, params, cfg)
value, upstream = loss_ssg(feats, y, y_parts)
analytic = upstream.to_params(feats, params, cfg)
numeric = numerical_grad(objective, params, names=("W_emb", "b_emb", "W_fc", "b_fc"))
print("grouping loss %.4f, terms %d" % (value, cfg.part_count + 2))
print("max relative error: %.2e" % max_relative_error(analytic, numeric))
