"""Acceptance criteria 1-12.

Each test prints one ``[C<n>] PASS|FAIL ...`` line with the measured values
and then asserts. Models are trained once per session on seeded synthetic
data; attribution settings per experiment are listed in EXPERIMENTS.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
import pytest
import torch
import yaml

from ibattr.adapter import linear_adapter
from ibattr.bottleneck import (
    DELETE,
    PRESERVE,
    BottleneckConfig,
    FeatureStatistics,
    bottleneck_objective,
    classification_fit,
    estimate_feature_statistics,
    iba_attribute,
    inverse_iba_attribute,
    kl_capacity,
    multilayer_iba,
    regression_fit,
    regression_iba_attribute,
)
from ibattr.cli import main as cli_main
from ibattr.evaluation import (
    insertion_deletion,
    localization_iou,
    random_map,
    region_rank_correlation,
    sensitivity_n,
    severity_correlation,
)
from ibattr.maps import AttributionMap, ThresholdPolicy
from ibattr.models import (
    TrainConfig,
    ToyCnnSpec,
    build_model,
    holdout_split,
    train_classifier,
    train_regressor,
)
from ibattr.synthetic import (
    GeneratorConfig,
    box_mask,
    cumulative_scores,
    generate_dataset,
    label_matrix,
    severity_map,
    stack_images,
)

from conftest import ACCEPTANCE_LINES, null_model
from oracles import gaussian_kl_quad

pytestmark = pytest.mark.slow

# classifiers are trained with label smoothing so the deletion game keeps a
# usable gradient (a saturated sigmoid makes the inverse BCE flat)
CLASSIFIER_TRAIN = TrainConfig(epochs=8, label_smoothing=0.2, seed=0)
REGRESSOR_TRAIN = TrainConfig(epochs=8, seed=0)
SEVERITY_WEIGHTS = (0.85, 0.05, 0.05, 0.05)
LOCALIZATION = ThresholdPolicy("percentile", 95.0)

EXPERIMENTS = {
    "classifier_layer": "block1",
    "classifier_config": BottleneckConfig(beta=10.0, steps=20),
    "regressor_layer": "block3",
    "regressor_config": BottleneckConfig(beta=10.0, steps=10),
    "multilayer_layers": ("block1", "block2", "block3"),
}


def record(n: int, ok: bool, text: str) -> None:
    line = f"[C{n}] {'PASS' if ok else 'FAIL'} {text}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


@dataclass
class Trained:
    model: torch.nn.Module
    stats_images: np.ndarray
    report: object

    def stats(self, layer: str) -> FeatureStatistics:
        return estimate_feature_statistics(self.model, layer, self.stats_images)


def _train(data_cfg: GeneratorConfig, kind: str, train_cfg: TrainConfig) -> Trained:
    samples, _ = generate_dataset(data_cfg)
    images = stack_images(samples)
    if kind == "classifier":
        model = build_model(ToyCnnSpec(n_outputs=data_cfg.n_classes, seed=0))
        model, report = train_classifier(model, images, label_matrix(samples), train_cfg)
    else:
        model = build_model(ToyCnnSpec(n_outputs=1, head="scalar_linear", seed=0))
        model, report = train_regressor(model, images, cumulative_scores(samples), train_cfg)
    train_idx, _ = holdout_split(len(images), train_cfg.holdout_fraction, train_cfg.seed)
    return Trained(model, images[train_idx[:64]], report)


def _single_positive(samples, limit):
    picked = [(s, int(np.flatnonzero(s.class_labels)[0])) for s in samples if s.class_labels.sum() == 1]
    return picked[:limit]


@pytest.fixture(scope="session")
def redundant_classifier() -> Trained:
    return _train(GeneratorConfig(samples=1500, n_classes=2, redundancy_rate=0.5, seed=1), "classifier", CLASSIFIER_TRAIN)


@pytest.fixture(scope="session")
def small_patch_classifier() -> Trained:
    return _train(GeneratorConfig(samples=1500, n_classes=2, patch_size=6, seed=1), "classifier", CLASSIFIER_TRAIN)


@pytest.fixture(scope="session")
def severity_regressor() -> Trained:
    cfg = GeneratorConfig(samples=1500, n_classes=0, severity_weights=SEVERITY_WEIGHTS, seed=3)
    return _train(cfg, "regressor", REGRESSOR_TRAIN)


@pytest.fixture(scope="session")
def severity_test_set():
    """200 held-out severity images whose grid is not constant (PCC and Spearman need variation)."""
    samples, _ = generate_dataset(GeneratorConfig(samples=600, n_classes=0, severity_weights=SEVERITY_WEIGHTS, seed=77))
    picked = [s for s in samples if np.ptp(s.severity_grid) > 0][:200]
    assert len(picked) == 200
    return picked


# ---------------------------------------------------------------------------
# C1-C3: analytic checks
# ---------------------------------------------------------------------------


def test_c1_kl_oracle():
    start = time.perf_counter()
    worst = 0.0
    stats = FeatureStatistics(torch.tensor([0.3], dtype=torch.float64), torch.tensor([1.7], dtype=torch.float64), 1)
    for lam in (0.1, 0.5, 0.9):
        for r in (0.0, 1.0, 3.0):
            f = stats.mean + r * stats.std
            closed = kl_capacity(f, torch.tensor([np.log(lam / (1 - lam))], dtype=torch.float64), stats).item()
            reference = gaussian_kl_quad(lam, r, 0.3, 1.7)
            worst = max(worst, abs(closed - reference) / reference)
    elapsed = time.perf_counter() - start
    record(1, worst < 1e-4 and elapsed < 1.0, f"KL closed form vs quadrature: max rel err {worst:.2e} (< 1e-4), {elapsed:.2f}s (< 1s)")


def test_c2_gradient_check():
    start = time.perf_counter()
    spec = ToyCnnSpec(input_size=(16, 16), channels_per_block=(4, 8), n_outputs=2, seed=0)
    clf = build_model(spec).double()
    reg = build_model(ToyCnnSpec(input_size=(16, 16), channels_per_block=(4, 8), n_outputs=1, head="scalar_linear", seed=0)).double()
    gen = torch.Generator().manual_seed(0)
    image = torch.rand((1, 1, 16, 16), dtype=torch.float64, generator=gen)
    batch = torch.rand((16, 1, 16, 16), dtype=torch.float64, generator=gen)
    with torch.no_grad():
        ref = float(reg(image)[0, 0])
    cases = {
        "iba": (clf, classification_fit(0), PRESERVE),
        "inverse_iba": (clf, classification_fit(0), DELETE),
        "mse": (reg, regression_fit("mse", 1.5), PRESERVE),
        "rm": (reg, regression_fit("rm"), PRESERVE),
        "dv": (reg, regression_fit("dv", reference=ref), PRESERVE),
    }
    worst = {}
    for name, (model, fit, game) in cases.items():
        stats = estimate_feature_statistics(model, "block1", batch)
        features = model.features_at("block1", image)[0].detach()
        noise = stats.sample_noise(5, torch.Generator().manual_seed(1))
        theta = torch.randn(features.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(2))

        def objective(t):
            return bottleneck_objective(model, "block1", features, stats, t, noise, fit, 10.0, game)

        t = theta.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(objective(t), t)
        err = 0.0
        for flat in np.random.default_rng(3).choice(theta.numel(), 20, replace=False):
            idx = np.unravel_index(flat, theta.shape)
            up, down = theta.clone(), theta.clone()
            up[idx] += 1e-6
            down[idx] -= 1e-6
            with torch.no_grad():
                fd = (objective(up) - objective(down)).item() / 2e-6
            err = max(err, abs(grad[idx].item() - fd) / max(abs(fd), 1e-4))
        worst[name] = err
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-3 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, ok, f"objective gradients vs central differences: {detail} (< 1e-3), {elapsed:.1f}s (< 30s)")


def test_c3_null_model():
    model = null_model()
    images = np.random.default_rng(0).random((32, 16, 16))
    stats = estimate_feature_statistics(model, "conv", images)
    means = {}
    for name, fn in (("IBA", iba_attribute), ("Inverse IBA", inverse_iba_attribute)):
        means[name] = float(np.mean([fn(model, images[i], 0, "conv", stats).values.mean() for i in range(8)]))
    ok = all(v < 0.01 for v in means.values())
    record(3, ok, "head ignores layer: " + ", ".join(f"{k} mean {v:.4f} bits/px" for k, v in means.items()) + " (< 0.01)")


# ---------------------------------------------------------------------------
# C4-C6, C10, C11: classification experiments
# ---------------------------------------------------------------------------


def test_c4_planted_feature_localization(redundant_classifier):
    samples, _ = generate_dataset(GeneratorConfig(samples=500, n_classes=2, seed=99))
    items = _single_positive(samples, 200)
    assert len(items) == 200
    layer, cfg = EXPERIMENTS["classifier_layer"], EXPERIMENTS["classifier_config"]
    stats = redundant_classifier.stats(layer)
    iba, rnd = [], []
    for i, (s, c) in enumerate(items):
        gt = box_mask(s.boxes, s.image.shape, c)
        amap = iba_attribute(redundant_classifier.model, s.image, c, layer, stats, cfg)
        iba.append(localization_iou(amap, gt, LOCALIZATION))
        rnd.append(localization_iou(random_map(s.image.shape, seed=i), gt, LOCALIZATION))
    m_iba, m_rnd = float(np.mean(iba)), float(np.mean(rnd))
    ok = m_iba >= 0.3 and m_iba >= 3 * m_rnd
    record(4, ok, f"single-patch IoU on 200 images: IBA {m_iba:.3f} (>= 0.3), random {m_rnd:.3f}, ratio {m_iba / m_rnd:.1f} (>= 3)")


def test_c5_redundancy(redundant_classifier):
    samples, _ = generate_dataset(GeneratorConfig(samples=300, n_classes=2, redundancy_rate=1.0, seed=98))
    items = _single_positive(samples, 100)
    assert len(items) == 100
    layer, cfg = EXPERIMENTS["classifier_layer"], EXPERIMENTS["classifier_config"]
    stats = redundant_classifier.stats(layer)
    passes = {"iba": 0, "inverse": 0}
    for s, c in items:
        boxes = [b for b in s.boxes if b[0] == c]
        masks = [box_mask([b], s.image.shape) for b in boxes]
        for name, fn in (("iba", iba_attribute), ("inverse", inverse_iba_attribute)):
            values = fn(redundant_classifier.model, s.image, c, layer, stats, cfg).values
            total = values.sum()
            if total > 0 and all(values[m].sum() >= 0.25 * total for m in masks):
                passes[name] += 1
    inv_rate = passes["inverse"] / len(items)
    iba_fail, inv_fail = len(items) - passes["iba"], len(items) - passes["inverse"]
    ok = inv_rate >= 0.7 and iba_fail > inv_fail
    record(5, ok, f"two redundant patches, >= 25% mass in each: Inverse IBA {inv_rate:.2f} of images (>= 0.70); "
                  f"failures IBA {iba_fail} > Inverse {inv_fail}")


def test_c6_deletion_ordering(redundant_classifier):
    samples, _ = generate_dataset(GeneratorConfig(samples=300, n_classes=2, redundancy_rate=0.5, seed=97))
    items = _single_positive(samples, 100)
    layer, cfg = EXPERIMENTS["classifier_layer"], EXPERIMENTS["classifier_config"]
    stats = redundant_classifier.stats(layer)
    model = redundant_classifier.model
    auc = {(m, mode): [] for m in ("iba", "inverse", "random") for mode in ("insertion", "deletion")}
    for i, (s, c) in enumerate(items):
        maps = {
            "iba": iba_attribute(model, s.image, c, layer, stats, cfg),
            "inverse": inverse_iba_attribute(model, s.image, c, layer, stats, cfg),
            "random": AttributionMap(random_map(s.image.shape, seed=i), "unitless", "random"),
        }
        for name, amap in maps.items():
            for mode in ("insertion", "deletion"):
                auc[name, mode].append(insertion_deletion(model, s.image, amap, mode, target=c).auc)
    mean = {k: float(np.mean(v)) for k, v in auc.items()}
    d_inv, d_iba, d_rnd = mean["inverse", "deletion"], mean["iba", "deletion"], mean["random", "deletion"]
    i_inv, i_iba, i_rnd = mean["inverse", "insertion"], mean["iba", "insertion"], mean["random", "insertion"]
    ok = d_inv <= d_iba <= d_rnd and i_iba - i_rnd >= 0.05 and i_inv - i_rnd >= 0.05
    record(6, ok, f"{len(items)} images, deletion AUC Inverse {d_inv:.3f} <= IBA {d_iba:.3f} <= random {d_rnd:.3f}; "
                  f"insertion AUC IBA {i_iba:.3f}, Inverse {i_inv:.3f} vs random {i_rnd:.3f} (margin >= 0.05)")


def test_c10_multilayer_precision(small_patch_classifier):
    samples, _ = generate_dataset(GeneratorConfig(samples=300, n_classes=2, patch_size=6, seed=96))
    items = _single_positive(samples, 100)
    layers = EXPERIMENTS["multilayer_layers"]
    stats = {l: small_patch_classifier.stats(l) for l in layers}
    model = small_patch_classifier.model
    cfg = BottleneckConfig()
    single, multi = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for s, c in items:
            gt = box_mask(s.boxes, s.image.shape, c)
            single.append(localization_iou(iba_attribute(model, s.image, c, "block1", stats["block1"], cfg), gt, LOCALIZATION))
            multi.append(localization_iou(multilayer_iba(model, s.image, c, list(layers), stats, cfg, LOCALIZATION), gt))
    m_single, m_multi = float(np.mean(single)), float(np.mean(multi))
    record(10, m_multi >= m_single, f"6x6 patches, {len(items)} images: multi-layer IBA IoU {m_multi:.3f} >= single-layer (block1) {m_single:.3f}")


def test_c11_imbalance():
    data = GeneratorConfig(samples=1500, n_classes=2, class_prevalence=0.1, seed=1)
    unweighted = _train(data, "classifier", CLASSIFIER_TRAIN)
    weighted = _train(data, "classifier", TrainConfig(**{**CLASSIFIER_TRAIN.__dict__, "weighted_bce": True}))
    samples, _ = generate_dataset(GeneratorConfig(samples=600, n_classes=2, class_prevalence=0.1, seed=95))
    items = [(s, int(c)) for s in samples for c in np.flatnonzero(s.class_labels)][:80]
    layer, cfg = EXPERIMENTS["classifier_layer"], EXPERIMENTS["classifier_config"]
    ious = {}
    for name, trained in (("unweighted", unweighted), ("weighted", weighted)):
        stats = trained.stats(layer)
        ious[name] = float(np.mean([
            localization_iou(inverse_iba_attribute(trained.model, s.image, c, layer, stats, cfg), box_mask(s.boxes, s.image.shape, c), LOCALIZATION)
            for s, c in items
        ]))
    auc_gap = max(abs(a - b) for a, b in zip(weighted.report.per_class_auroc, unweighted.report.per_class_auroc))
    ok = ious["weighted"] >= ious["unweighted"] and auc_gap <= 0.05
    record(11, ok, f"1:9 imbalance, {len(items)} positives: Inverse IBA IoU weighted {ious['weighted']:.3f} >= "
                   f"unweighted {ious['unweighted']:.3f}; AUROC gap {auc_gap:.3f} (<= 0.05)")


# ---------------------------------------------------------------------------
# C7-C9: regression experiments
# ---------------------------------------------------------------------------


def test_c7_sensitivity_n(severity_regressor, severity_test_set):
    rng = np.random.default_rng(0)
    w, x = rng.normal(size=(32, 32)), rng.random((32, 32))
    fractions = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
    oracle = sensitivity_n(linear_adapter(w), x, AttributionMap(w * x, "unitless", "gradient"), fractions, 100, seed=1, baseline=0.0)
    oracle_err = max(abs(c - 1.0) for c in oracle.correlations)

    layer, cfg = EXPERIMENTS["regressor_layer"], EXPERIMENTS["regressor_config"]
    model = severity_regressor.model
    stats = severity_regressor.stats(layer)
    dv, rnd = [], []
    for i, s in enumerate(severity_test_set[:40]):
        amap = regression_iba_attribute(model, s.image, layer, stats, cfg, "dv")
        dv.append(sensitivity_n(model, s.image, amap, fractions, 100, seed=i).mean())
        rnd.append(sensitivity_n(model, s.image, random_map(s.image.shape, seed=i), fractions, 100, seed=i).mean())
    m_dv, m_rnd = float(np.mean(dv)), float(np.mean(rnd))
    ok = oracle_err <= 1e-6 and m_dv - m_rnd >= 0.2
    record(7, ok, f"linear oracle max |r-1| {oracle_err:.1e} (<= 1e-6); regressor, 40 images, n in 0.05..0.5: "
                  f"Regression IBA (dv) {m_dv:.3f} vs random {m_rnd:.3f} (margin >= 0.2)")


@pytest.fixture(scope="session")
def severity_maps(severity_regressor, severity_test_set):
    layer, cfg = EXPERIMENTS["regressor_layer"], EXPERIMENTS["regressor_config"]
    stats = severity_regressor.stats(layer)
    return [regression_iba_attribute(severity_regressor.model, s.image, layer, stats, cfg, "dv") for s in severity_test_set]


def test_c8_severity_correlation(severity_test_set, severity_maps):
    pcc = [severity_correlation(a, severity_map(s)).value for a, s in zip(severity_maps, severity_test_set)]
    rnd = [severity_correlation(random_map(s.image.shape, seed=i), severity_map(s)).value for i, s in enumerate(severity_test_set)]
    m_pcc, m_rnd = float(np.mean(pcc)), float(np.mean(rnd))
    ok = m_pcc >= 0.3 and abs(m_rnd) <= 0.05
    record(8, ok, f"200 severity images: Regression IBA (dv) PCC {m_pcc:.3f} (>= 0.3), random {m_rnd:+.4f} (within 0.05)")


def _mean_region_rho(maps, samples) -> tuple[float, int]:
    rho = [region_rank_correlation(a, s.severity_grid) for a, s in zip(maps, samples)]
    values = [r.value for r in rho if not r.degenerate]
    return float(np.mean(values)), len(values)


def test_c9_implicit_regions(severity_regressor, severity_test_set, severity_maps):
    m_rho, n = _mean_region_rho(severity_maps, severity_test_set)
    # the verdict is on dv; rm on the same images is reported for context only
    layer, cfg = EXPERIMENTS["regressor_layer"], EXPERIMENTS["regressor_config"]
    stats = severity_regressor.stats(layer)
    rm_maps = [regression_iba_attribute(severity_regressor.model, s.image, layer, stats, cfg, "rm") for s in severity_test_set]
    rm_rho, _ = _mean_region_rho(rm_maps, severity_test_set)
    record(9, m_rho >= 0.5, f"per-region mass vs planted severity, {n} images: Regression IBA (dv) mean Spearman {m_rho:.3f} (>= 0.5); "
                            f"rm for reference {rm_rho:.3f}")


# ---------------------------------------------------------------------------
# C12: determinism of every command
# ---------------------------------------------------------------------------


def test_c12_determinism(tmp_path):
    config = {
        "seed": 3,
        "data": {"image_size": 32, "patch_size": 6, "samples": 30},
        "model": {"channels_per_block": [4, 8]},
        "train": {"epochs": 1},
        "attribution": {"layer": "block1", "bottleneck": {"steps": 3}, "stats_samples": 16},
        "evaluation": {"methods": ["iba", "inverse-iba", "random"], "metrics": ["insertion", "deletion", "iou", "sensitivity_n"],
                       "steps": 6, "masks_per_n": 10, "n_fractions": [0.1, 0.3]},
    }
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump(config))

    def run_all(root):
        data, ckpt = root / "data", root / "m.ckpt"
        codes = [
            cli_main(["generate", "--config", str(cfg), "--out", str(data)]),
            cli_main(["train", "--config", str(cfg), "--data", str(data), "--out", str(ckpt)]),
            cli_main(["attribute", "--config", str(cfg), "--checkpoint", str(ckpt), "--input", str(data),
                      "--method", "inverse-iba", "--target", "0", "--out", str(root / "maps")]),
            cli_main(["evaluate", "--config", str(cfg), "--checkpoint", str(ckpt), "--data", str(data), "--out", str(root / "eval")]),
            cli_main(["compare", "--config", str(cfg), "--checkpoints", str(ckpt), "--data", str(data), "--out", str(root / "cmp")]),
        ]
        return codes, {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*.json"))}

    codes_a, a = run_all(tmp_path / "a")
    codes_b, b = run_all(tmp_path / "b")
    # compare.json names its checkpoint path, which differs between the two roots
    for files, root in ((a, tmp_path / "a"), (b, tmp_path / "b")):
        key = next(k for k in files if k.name == "compare.json")
        files[key] = files[key].replace(str(root).encode(), b"<root>")
    differing = sorted(str(k) for k in a if a[k] != b.get(k))
    ok = codes_a == codes_b == [0] * 5 and set(a) == set(b) and not differing and len(a) > 30
    record(12, ok, f"generate/train/attribute/evaluate/compare re-run: {len(a)} JSON files, {len(differing)} differ (0)")
