"""
Cross-validated conversion prediction on a small cohort
=======================================================

Pretrain the graph encoder on single-visit diagnosis, then train the
recurrent model on visit histories with stratified folds.  The cohort keeps
the default subject count but uses 60 ROIs, so each model trains in about a
minute.  Fewer subjects or ROIs leave too few converters per fold or too weak
a graph signal, and balanced accuracy falls towards chance.
"""

import numpy as np

from hagnn.autodiff import set_profile
from hagnn.cohort import CohortConfig, compute_fc, generate_synthetic_cohort
from hagnn.report import format_table
from hagnn.training import TrainConfig, run_pipeline

set_profile("release")  # skip per-op NaN checks

subjects = generate_synthetic_cohort(CohortConfig(seed=7, roi_count=60))
compute_fc(subjects, drop_bold=True)
labels = np.array([s.label for s in subjects])
print("stable / converter:", (labels == "stable").sum(), "/", (labels == "converter").sum())

rows = []
for rnn in ("lstm", "gru"):
    cfg = TrainConfig(seed=7, rnn=rnn, epochs=40, pretrain_epochs=30, edge_rule="topk:8")
    res = run_pipeline(subjects, cfg, k=3)
    print(rnn, "epochs per fold:", [f.epochs_run for f in res.cv.folds])
    rows.append((f"HA-GNN ({rnn.upper()})", res.cv.report))

print()
print(format_table(rows))
