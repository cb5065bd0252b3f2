"""
Grouping unlabelled samples by self-similarity
==============================================

Three small pieces carry the unsupervised half of the method: a distance,
a re-ranked distance, and density clustering on top of it.  This script
walks through them on points we can reason about by eye.
"""

import numpy as np

from ssg.grouping import DbscanConfig, dbscan, select_eps
from ssg.reranking import KReciprocalConfig, k_reciprocal_jaccard, pairwise_euclidean

rng = np.random.default_rng(0)

# three tight blobs and a couple of stragglers in the plane
centers = np.array([[0.0, 0.0], [6.0, 0.0], [3.0, 5.0]])
x = np.vstack([c + 0.4 * rng.normal(size=(12, 2)) for c in centers]
              + [np.array([[3.0, 1.5], [10.0, 9.0]])])
print("points:", x.shape)

d = pairwise_euclidean(x)
print("euclidean range: %.2f .. %.2f" % (d.values[d.values > 0].min(), d.values.max()))

# re-ranking replaces raw distance by overlap of k-reciprocal neighbourhoods;
# two points in the same blob share most of their neighbours
dj = k_reciprocal_jaccard(d, KReciprocalConfig(k1=8))
print("jaccard, same blob  :", round(float(dj.values[0, 1]), 3))
print("jaccard, across blobs:", round(float(dj.values[0, 12]), 3))

# eps comes from the data: mean of the smallest rho fraction of pair distances.
# rho should sit near half the fraction of pairs that fall inside one group
eps = select_eps(dj.values, 0.2)
print("auto eps:", round(eps, 3))

labels = dbscan(dj.values, DbscanConfig(eps=eps, min_pts=4))
print("labels:", labels)
print("clusters:", labels.max() + 1, " noise:", int((labels == -1).sum()))

# one cluster per blob; the far straggler and the loosest blob members have
# no dense neighbourhood and stay noise
print("far point label:", labels[-1])
for k in range(labels.max() + 1):
    members = np.flatnonzero(labels == k)
    print("cluster %d: %2d points around %s" % (k, members.size, np.round(x[members].mean(0), 1)))
