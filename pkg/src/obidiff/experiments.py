"""Augmentation-scale study: does synthetic data lift rare-class accuracy?

Simulates a long tail by keeping only a few training rubbings for the
designated rare classes, then augments them at several scales and retrains
the recognition classifier per (scale, arm). The control arm duplicates the
original rubbings; the treatment arm uses a generator callable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import ClassifierConfig, acc_at_k, train_classifier
from .manifest import DatasetManifest


def copy_style_generator(glyph: np.ndarray, style: np.ndarray, seed: int) -> np.ndarray:
    """Degenerate generator returning the style image unchanged.

    Augmenting with this is exactly the duplicate-rubbings control.
    """
    return style


@dataclass(frozen=True)
class ScaleResult:
    scale: int
    arm: str
    acc1: float
    acc3: float
    acc5: float


def _arm_results(
    manifest: DatasetManifest,
    generator,
    arm: str,
    scales: list[int],
    rare_classes: set[int],
    rare_keep: int,
    clf_config: ClassifierConfig,
    eval_items,
    seed: int,
    log=None,
) -> list[ScaleResult]:
    train_pairs = manifest.split_pairs("train")
    base_items = []
    rare_sources = []  # (glyph, style, class_id) kept for augmentation
    kept: dict[int, int] = {c: 0 for c in rare_classes}
    for pair in train_pairs:
        glyph, style = manifest.load_pair(pair)
        if pair.class_id in rare_classes:
            if kept[pair.class_id] >= rare_keep:
                continue
            kept[pair.class_id] += 1
            rare_sources.append((glyph, style, pair.class_id))
        base_items.append((style, pair.class_id))

    results = []
    for scale in scales:
        extras = []
        for i, (glyph, style, cid) in enumerate(rare_sources):
            for s in range(scale):
                extras.append((generator(glyph, style, seed + 7919 * i + s), cid))
        clf = train_classifier(manifest, clf_config, extra_items=base_items + extras, split="__none__")
        # Acc@k saturates at the class count on small label sets.
        accs = {k: acc_at_k(clf, eval_items, min(k, clf.n_classes)) for k in (1, 3, 5)}
        results.append(ScaleResult(scale, arm, accs[1], accs[3], accs[5]))
        if log:
            log(f"{arm} x{scale}: acc@1 {accs[1]:.3f} acc@3 {accs[3]:.3f} acc@5 {accs[5]:.3f}")
    return results


def augmentation_experiment(
    manifest: DatasetManifest,
    generator,
    scales: list[int],
    seed: int = 0,
    rare_classes: list[int] | None = None,
    rare_keep: int = 5,
    clf_config: ClassifierConfig | None = None,
    csv_path: str | Path | None = None,
    log=None,
) -> list[ScaleResult]:
    """Run both arms at every scale; evaluation is on rare-class val items.

    `generator` maps (glyph, style, seed) to a pseudo rubbing of the glyph's
    class. Results optionally land in a CSV with header scale,arm,acc1,acc3,acc5.
    """
    if not scales:
        raise ValueError("scales must be non-empty")
    if generator is None:
        raise ValueError("a trained generator (or stub) is required")
    clf_config = clf_config or ClassifierConfig(seed=seed)
    all_classes = sorted({p.class_id for p in manifest.pairs})
    if rare_classes is None:
        rare_classes = all_classes[-2:]
    rare_set = set(rare_classes)

    eval_items = []
    for pair in manifest.split_pairs("val"):
        if pair.class_id in rare_set:
            _, style = manifest.load_pair(pair)
            eval_items.append((style, pair.class_id))
    if not eval_items:
        raise ValueError("no validation items in the rare classes")

    results = []
    for arm, gen in (("duplicate", copy_style_generator), ("generated", generator)):
        results.extend(
            _arm_results(
                manifest, gen, arm, list(scales), rare_set, rare_keep,
                clf_config, eval_items, seed, log,
            )
        )
    if csv_path is not None:
        write_experiment_csv(csv_path, results)
    return results


def write_experiment_csv(path: str | Path, results: list[ScaleResult]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scale", "arm", "acc1", "acc3", "acc5"])
        for r in results:
            writer.writerow([r.scale, r.arm, f"{r.acc1:.6f}", f"{r.acc3:.6f}", f"{r.acc5:.6f}"])
