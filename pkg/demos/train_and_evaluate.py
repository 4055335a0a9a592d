"""Train a small model on a simulated cohort and report held-out metrics."""

from thphealth import CohortConfig, TrainConfig, evaluate, make_imbalanced_cohort, mean_event_nll, split_dataset, train

data = make_imbalanced_cohort(CohortConfig.preset("paper-like", n_patients=150, seed=1))
train_set, eval_set = split_dataset(data, 0.8, seed=1)

# a reduced architecture so the demo finishes in well under a minute
cfg = TrainConfig(d=16, n_layers=1, n_heads=2, d_ff=32, epochs=8, batch_size=16, warmup_steps=20, seed=1)
ckpt = train(cfg, train_set, eval_set, progress=True)

report = evaluate(ckpt, eval_set)
print(f"best epoch {ckpt.epoch}")
print("per-class F1", dict(zip(data.type_names, (round(f, 3) for f in report.per_class_f1))))
print(f"macro-F1 {report.macro_f1:.3f}, MedAE {report.medae_days:.2f} days")
print(f"held-out NLL per event {mean_event_nll(ckpt, eval_set):.4f}")
