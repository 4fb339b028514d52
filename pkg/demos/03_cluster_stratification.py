"""Cluster frozen embeddings, choose K at the elbow and check whether the
clusters stratify outcome risk. Writes a Kaplan-Meier plot to
``km_clusters.svg`` in the current directory.

    python3 demos/03_cluster_stratification.py
"""
import numpy as np

from ebclkit.analysis import elbow_curve, kmeans, km_curve, stratification_report, survival_svg
from ebclkit.encoder import EncoderConfig
from ebclkit.evaluation import build_embedding_table
from ebclkit.events import WindowParams
from ebclkit.pipeline import prepare_cohort
from ebclkit.synthetic import GeneratorConfig, generate
from ebclkit.training import RunConfig, pretrain

dataset, outcomes, _ = generate(GeneratorConfig(n_patients=600, seed=4, base_std=0.1, trend_slope_std=0.02))
cohort = prepare_cohort(dataset, outcomes, window=WindowParams(tau=48, min_len=12))
result = pretrain(RunConfig("ebcl", seed=0, batch_size=64, max_epochs=8), cohort.pretrain_data(),
                  EncoderConfig(max_len=48))
table = build_embedding_table(result.model.encoder.embed_numpy, cohort.encoded)
X = table.features("both")

inertias, K = elbow_curve(X, range(2, 9), n_init=3)
print("inertia by K:", ", ".join(f"{k}: {v:.0f}" for k, v in zip(range(2, 9), inertias)))
print(f"elbow at K={K}")
assignment = kmeans(X, K, n_init=5)

# time from event to death, censored at the end of the record
lookup = {(o.patient_id, o.event_time): o for o in outcomes if o.task == "mortality"}
found = [lookup.get((p, float(t))) for p, t in zip(table.patient_ids, table.event_times)]
tto = np.array([o.time - o.event_time if o else 0.0 for o in found])
observed = np.array([bool(o and o.value) for o in found])

report = stratification_report(assignment, table.labels["mortality"], tto, observed)
for c in report["clusters"]:
    print(f"cluster {c['cluster']}: n={c['size']}, mortality {c['prevalence']:.2f}")
print(f"prevalence gap between extreme clusters: {report['delta_prevalence']:.2f}")
significant = [c for c in report["contrasts"] if c["significant"]]
print(f"{len(significant)} of {len(report['contrasts'])} pairwise time-to-death contrasts significant")

curves = {f"cluster {k}": km_curve(tto[assignment.labels == k], observed[assignment.labels == k]) for k in range(K)}
with open("km_clusters.svg", "w", encoding="utf-8") as fh:
    fh.write(survival_svg(curves))
print("wrote km_clusters.svg")
