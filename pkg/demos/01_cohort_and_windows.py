"""Walk through a synthetic cohort: patients, index events and the
pre/post windows that anchor contrastive pretraining.

    python3 demos/01_cohort_and_windows.py
"""
import numpy as np

from ebclkit.events import WindowParams
from ebclkit.pipeline import prepare_cohort
from ebclkit.synthetic import GeneratorConfig, generate

config = GeneratorConfig(n_patients=200, seed=0, n_static_features=1, static_cardinality=2)
dataset, outcomes, truths = generate(config)
print(f"{len(dataset)} patients, {len(dataset.feature_names)} features: {list(dataset.feature_names)}")

first = next(iter(dataset))
print(f"patient {first.patient_id}: {first.times.size} observations "
      f"spanning {first.times[0]:.1f}h to {first.times[-1]:.1f}h")

# every admission anchors one window pair; tau caps each side at 32 tokens
cohort = prepare_cohort(dataset, outcomes, window=WindowParams(tau=32, min_len=8))
for name, pairs in cohort.pairs.items():
    print(f"{name:>5}: {len(pairs)} window pairs")

pair = cohort.pairs["train"][0]
print(f"\nevent at t={pair.event.time:.1f}h for {pair.event.patient_id}")
print(f"  pre window : {pair.pre.times.size} tokens ending at {pair.pre.times[-1]:.1f}h")
print(f"  post window: {pair.post.times.size} tokens starting at {pair.post.times[0]:.1f}h")
print(f"  labels     : {dict(pair.labels)}")

enc = cohort.encoded["train"]
print(f"\ntokenized train split: pre {enc.pre.feature_ids.shape}, post {enc.post.feature_ids.shape}")
for task, y in enc.labels.items():
    labelled = ~np.isnan(y)
    print(f"  {task}: {labelled.sum()} labelled, prevalence {np.nanmean(y):.2f}")

# the generator's hidden per-event state, used only for diagnostics
sev = np.array([t.severity for t in truths])
print(f"\nlatent severity across events: mean {sev.mean():.2f}, std {sev.std():.2f}")
