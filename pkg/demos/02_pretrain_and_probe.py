"""Pretrain the contrastive encoder, then compare its frozen embeddings
against a randomly initialised encoder with a linear probe, KNN and
pre/post retrieval.

    python3 demos/02_pretrain_and_probe.py      # about a minute on one core
"""
from ebclkit.encoder import EncoderConfig
from ebclkit.evaluation import KnnSweep, build_embedding_table, knn_eval, linear_probe
from ebclkit.events import WindowParams
from ebclkit.objectives import retrieval_accuracy
from ebclkit.pipeline import prepare_cohort
from ebclkit.synthetic import GeneratorConfig, generate
from ebclkit.training import RunConfig, pretrain, random_backbone

dataset, outcomes, _ = generate(GeneratorConfig(n_patients=1000, seed=1, n_static_features=1,
                                                static_cardinality=2, base_std=0.1, trend_slope_std=0.02))
cohort = prepare_cohort(dataset, outcomes, window=WindowParams(tau=64, min_len=16))
encoder = EncoderConfig(max_len=64)

run = RunConfig("ebcl", seed=0, learning_rate=1e-3, batch_size=64, max_epochs=12)
result = pretrain(run, cohort.pretrain_data(), encoder)
print(f"pretrained for {result.epochs_run} epochs, best val loss {result.best_val:.3f}")

# a held-out post window should be found among 31 distractors far above 1/32
acc = retrieval_accuracy(result.model, cohort.encoded["test"], seed=0)
print(f"pre -> post retrieval, top-1 of 32: {acc:.3f} (chance {1 / 32:.3f})")

backbones = {"random": random_backbone(cohort.vocab, encoder, 0), "ebcl": result.model.encoder}
sweep = KnnSweep(ks=(5, 15, 45), weights=("uniform",), metrics=("cosine",))
for name, backbone in backbones.items():
    table = build_embedding_table(backbone.embed_numpy, cohort.encoded)
    probe = linear_probe(table, "mortality", n_bootstrap=100)
    knn = knn_eval(table, "mortality", sweep, n_bootstrap=100)
    p, k = probe.metrics["auroc"], knn.metrics["auroc"]
    print(f"{name:>6}: probe AUROC {p['point']:.3f} ± {p['std']:.3f}, "
          f"KNN AUROC {k['point']:.3f} ± {k['std']:.3f} (k={knn.config['k']})")
