"""Train a toy classifier on planted patches and see where IBA and Inverse IBA look.

Some training images carry a second copy of the class patch. IBA only needs
one copy to keep the prediction, so it often highlights a single patch;
Inverse IBA has to remove every copy to flip the prediction, so it marks both.

    python3 demos/localize_planted_patches.py
"""

import numpy as np
import torch

from ibattr.bottleneck import BottleneckConfig, estimate_feature_statistics, iba_attribute, inverse_iba_attribute
from ibattr.evaluation import localization_iou
from ibattr.maps import ThresholdPolicy
from ibattr.models import TrainConfig, ToyCnnSpec, build_model, train_classifier
from ibattr.synthetic import GeneratorConfig, box_mask, generate_dataset, label_matrix, stack_images

torch.set_num_threads(1)

train, _ = generate_dataset(GeneratorConfig(samples=800, n_classes=2, redundancy_rate=0.5, seed=1))
images = stack_images(train)
model = build_model(ToyCnnSpec(n_outputs=2, seed=0))
model, report = train_classifier(model, images, label_matrix(train), TrainConfig(epochs=6, label_smoothing=0.2))
print("held-out AUROC per class:", [round(a, 3) for a in report.per_class_auroc])

stats = estimate_feature_statistics(model, "block1", images[:64])
config = BottleneckConfig(steps=20)
policy = ThresholdPolicy("percentile", 95.0)

test, _ = generate_dataset(GeneratorConfig(samples=40, n_classes=2, redundancy_rate=1.0, seed=5))
for s in test[:8]:
    positives = np.flatnonzero(s.class_labels)
    if positives.size != 1:
        continue
    c = int(positives[0])
    boxes = [b for b in s.boxes if b[0] == c]
    gt = box_mask(s.boxes, s.image.shape, c)
    for name, fn in (("IBA", iba_attribute), ("Inverse IBA", inverse_iba_attribute)):
        amap = fn(model, s.image, c, "block1", stats, config)
        shares = [amap.values[box_mask([b], s.image.shape)].sum() / amap.values.sum() for b in boxes]
        print(f"{s.id} class {c} {name:12s} IoU {localization_iou(amap, gt, policy):.2f}  "
              f"mass share per patch {', '.join(f'{x:.2f}' for x in shares)}")
