"""Recognition classifier: training, Acc@k evaluation, feature extraction.

Trains a compact residual network on style (rubbing) images with random
rotation and horizontal-flip augmentation. The penultimate pooled features
double as the extractor for the Frechet distance proxy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .manifest import AlignedPair, DatasetManifest
from .metrics import acc_at_k as _acc_at_k_arrays
from .networks import SmallResNet


@dataclass
class ClassifierConfig:
    base_channels: int = 16
    stages: int = 3
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    max_rotation_deg: float = 15.0
    seed: int = 0


@dataclass
class TrainedClassifier:
    model: SmallResNet
    classes: list[int]  # ordered class ids; logits follow this order
    resolution: int
    seed: int
    loss_history: list[float] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def logits(self, images: list[np.ndarray]) -> np.ndarray:
        x = torch.from_numpy(np.stack(images)).float().unsqueeze(1)
        self.model.eval()
        out = []
        with torch.no_grad():
            for i in range(0, x.shape[0], 64):
                out.append(self.model(x[i : i + 64]).numpy())
        return np.concatenate(out)

    def features(self, images: list[np.ndarray]) -> np.ndarray:
        """Penultimate-layer features, fixed dimension per config."""
        x = torch.from_numpy(np.stack(images)).float().unsqueeze(1)
        self.model.eval()
        out = []
        with torch.no_grad():
            for i in range(0, x.shape[0], 64):
                out.append(self.model.features(x[i : i + 64]).numpy())
        return np.concatenate(out)


def _augment(img: np.ndarray, rng: np.random.Generator, max_deg: float) -> np.ndarray:
    out = img
    angle = float(rng.uniform(-max_deg, max_deg))
    if abs(angle) > 0.1:
        out = ndimage.rotate(out, angle, reshape=False, order=1, mode="constant", cval=0.0)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return np.clip(out, 0.0, 1.0)


def train_classifier(
    manifest: DatasetManifest,
    config: ClassifierConfig | None = None,
    extra_items: list[tuple[np.ndarray, int]] | None = None,
    split: str = "train",
    log=None,
) -> TrainedClassifier:
    """Train on the style images of a split, plus optional extra items.

    `extra_items` carries augmentation images (pseudo rubbings) as
    (image, class_id) tuples. Deterministic given the seed.
    """
    config = config or ClassifierConfig()
    pairs = manifest.split_pairs(split)
    if not pairs and not extra_items:
        raise ValueError(f"split {split!r} is empty")
    items: list[tuple[np.ndarray, int]] = []
    for pair in pairs:
        _, style = manifest.load_pair(pair)
        items.append((style, pair.class_id))
    items.extend(extra_items or [])
    classes = sorted({cid for _, cid in items})
    class_index = {cid: i for i, cid in enumerate(classes)}

    torch.manual_seed(config.seed)
    model = SmallResNet(len(classes), config.base_channels, config.stages)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    aug_rng = np.random.default_rng(config.seed)
    labels = torch.tensor([class_index[cid] for _, cid in items])
    n = len(items)
    clf = TrainedClassifier(
        model=model, classes=classes, resolution=manifest.resolution, seed=config.seed
    )
    model.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for i in range(0, n, config.batch_size):
            idx = perm[i : i + config.batch_size]
            batch = np.stack(
                [_augment(items[j][0], aug_rng, config.max_rotation_deg) for j in idx.tolist()]
            )
            x = torch.from_numpy(batch).float().unsqueeze(1)
            loss = F.cross_entropy(model(x), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
        clf.loss_history.append(epoch_loss / n)
        if log and (epoch + 1) % 5 == 0:
            log(f"classifier epoch {epoch + 1}/{config.epochs} loss {clf.loss_history[-1]:.4f}")
    model.eval()
    return clf


def acc_at_k(clf: TrainedClassifier, eval_set: list[tuple[np.ndarray, int]], k: int) -> float:
    """Top-k accuracy over (image, class_id) items."""
    logits = clf.logits([img for img, _ in eval_set])
    idx = {cid: i for i, cid in enumerate(clf.classes)}
    labels = np.array([idx[cid] for _, cid in eval_set])
    return _acc_at_k_arrays(logits, labels, k)


def eval_split(
    clf: TrainedClassifier,
    manifest: DatasetManifest,
    split: str = "val",
    ks: tuple[int, ...] = (1, 3, 5),
    transform=None,
    pair_filter=None,
) -> dict[int, float]:
    """Acc@k on a split's style images, optionally transformed/filtered."""
    pairs: list[AlignedPair] = manifest.split_pairs(split)
    if pair_filter is not None:
        pairs = [p for p in pairs if pair_filter(p)]
    eval_set = []
    for pair in pairs:
        _, style = manifest.load_pair(pair)
        if transform is not None:
            style = transform(style)
        eval_set.append((style, pair.class_id))
    return {k: acc_at_k(clf, eval_set, k) for k in ks}


def save_classifier(path: str | Path, clf: TrainedClassifier) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(clf.model.state_dict(), path)
    sidecar = {
        "kind": "classifier",
        "step": len(clf.loss_history),
        "seed": clf.seed,
        "loss_ema": clf.loss_history[-1] if clf.loss_history else None,
        "config": {
            "classes": clf.classes,
            "resolution": clf.resolution,
            "base_channels": clf.model.stem.out_channels,
            "stages": len(clf.model.blocks),
        },
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=1)


def load_classifier(path: str | Path) -> TrainedClassifier:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    if sidecar.get("kind") != "classifier":
        raise ValueError(f"checkpoint at {path} is not a classifier")
    cfg = sidecar["config"]
    model = SmallResNet(len(cfg["classes"]), cfg["base_channels"], cfg["stages"])
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return TrainedClassifier(
        model=model,
        classes=list(cfg["classes"]),
        resolution=cfg["resolution"],
        seed=sidecar["seed"],
    )
