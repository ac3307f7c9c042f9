"""
From BOLD signals to brain graphs
=================================

Generate a small synthetic cohort, turn each visit's ROI time series into
a Pearson connectivity matrix, then sparsify it into a graph.
"""

import numpy as np

from hagnn.cohort import CohortConfig, compute_fc, generate_synthetic_cohort
from hagnn.connectome import build_graph, parse_edge_rule

cfg = CohortConfig(seed=1, n_subjects=12, roi_count=20, timepoints=200, n_networks=4)
subjects = generate_synthetic_cohort(cfg)
print(len(subjects), "subjects,", sum(len(s.visits) for s in subjects), "visits")

# one subject's visit history: diagnosis and month offset per scan
s = subjects[0]
print(s.id, s.label, [(v.diagnosis.name, round(v.month_offset, 1)) for v in s.visits])

# BOLD is (timepoints, ROIs)
bold = s.visits[0].bold
print("BOLD shape", bold.values.shape)

compute_fc(subjects, drop_bold=True)
fc = s.visits[0].fc.values
print("FC shape", fc.shape, "symmetric:", np.array_equal(fc, fc.T), "diag:", np.unique(np.diag(fc)))

# ROIs in the same latent network correlate more strongly
upper = fc[np.triu_indices_from(fc, 1)]
print("mean |r| off-diagonal: %.3f" % np.abs(upper).mean())

# keep each ROI's 4 strongest links (union over both endpoints)
for text in ("topk:4", "threshold:0.3"):
    g = build_graph(s.visits[0].fc, parse_edge_rule(text))
    deg = np.bincount(g.edges.ravel(), minlength=g.n_nodes)
    print(f"{text:14s} edges={len(g.edges):4d}  degree min/mean/max = {deg.min()}/{deg.mean():.1f}/{deg.max()}")
