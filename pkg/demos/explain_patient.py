"""Export intensity, recency and attention CSVs for one patient."""

import sys
from pathlib import Path

from thphealth import CohortConfig, TrainConfig, export_explanations, make_imbalanced_cohort, split_dataset, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "explain_out")
data = make_imbalanced_cohort(CohortConfig.preset("paper-like", n_patients=60, horizon_days=300.0, seed=3))
train_set, eval_set = split_dataset(data, 0.8, seed=3)
cfg = TrainConfig(d=16, n_layers=1, n_heads=2, d_ff=32, epochs=3, warmup_steps=10, seed=3)
ckpt = train(cfg, train_set, eval_set)

patient = max(eval_set, key=len)
paths = export_explanations(ckpt, patient, out)
print(f"patient {patient.patient_id} with {len(patient)} events")
for kind, path in paths.items():
    print(f"  {kind}: {path}")
