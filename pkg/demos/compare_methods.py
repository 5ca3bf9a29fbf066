"""Benchmark several attribution methods on one trained classifier.

Prints the mean insertion/deletion AUC and IoU per method and writes the
insertion-vs-deletion scatter to compare_methods.png.

    python3 demos/compare_methods.py
"""

import json

import torch

from ibattr.methods import AttributionSettings
from ibattr.models import TrainConfig, ToyCnnSpec, build_model, train_classifier
from ibattr.report import EvaluationSettings, compare_methods, plot_insertion_deletion
from ibattr.synthetic import GeneratorConfig, generate_dataset, label_matrix, stack_images

torch.set_num_threads(1)

train, _ = generate_dataset(GeneratorConfig(samples=800, n_classes=2, seed=1))
images = stack_images(train)
model = build_model(ToyCnnSpec(n_outputs=2, seed=0))
model, _ = train_classifier(model, images, label_matrix(train), TrainConfig(epochs=6, label_smoothing=0.2))

test, _ = generate_dataset(GeneratorConfig(samples=24, n_classes=2, seed=11))
report = compare_methods(
    model,
    test,
    methods=["iba", "inverse-iba", "gradient", "integrated-gradients", "occlusion", "random"],
    metrics=["insertion", "deletion", "iou"],
    settings=AttributionSettings(layer="block1", threshold="percentile:95"),
    evaluation=EvaluationSettings(iou_threshold="percentile:95"),
    stats_images=images[:64],
)
print(json.dumps(report.aggregates(), indent=2))
plot_insertion_deletion(report, "compare_methods.png")
