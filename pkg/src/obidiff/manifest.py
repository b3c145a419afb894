"""Dataset manifest: aligned-pair index, quality gate, splits, QC report.

The manifest is a single JSON document with image paths relative to its own
location. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import glyph_mask, iou, load_image, save_image
from .synth import NOISE_TYPES, NoiseType, synth_glyph, synth_noise

MANIFEST_VERSION = 1
DEFAULT_GATE_THRESHOLD = 0.8
DEFAULT_MASK_THRESHOLD = 0.5


class ManifestError(ValueError):
    """Malformed manifest document; message carries a JSON-pointer-ish path."""


@dataclass
class AlignedPair:
    pair_id: str
    class_id: int
    glyph_path: str
    style_path: str
    noise_type: NoiseType
    iou: float | None = None

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "class_id": self.class_id,
            "glyph_path": self.glyph_path,
            "style_path": self.style_path,
            "noise_type": self.noise_type.value,
            "iou": self.iou,
        }


@dataclass
class DatasetManifest:
    resolution: int
    seed: int
    pairs: list[AlignedPair] = field(default_factory=list)
    splits: dict[str, list[str]] = field(default_factory=dict)
    mask_threshold: float = DEFAULT_MASK_THRESHOLD
    base_dir: Path = Path(".")

    def pair_by_id(self, pair_id: str) -> AlignedPair:
        for p in self.pairs:
            if p.pair_id == pair_id:
                return p
        raise KeyError(pair_id)

    def split_pairs(self, name: str) -> list[AlignedPair]:
        by_id = {p.pair_id: p for p in self.pairs}
        return [by_id[i] for i in self.splits.get(name, [])]

    def load_pair(self, pair: AlignedPair) -> tuple[np.ndarray, np.ndarray]:
        glyph = load_image(self.base_dir / pair.glyph_path)
        style = load_image(self.base_dir / pair.style_path)
        return glyph, style

    def stats(self) -> dict:
        counts: dict[int, int] = {}
        for p in self.pairs:
            counts[p.class_id] = counts.get(p.class_id, 0) + 1
        ious = [p.iou for p in self.pairs if p.iou is not None]
        return {
            "per_class_counts": counts,
            "mean_iou": float(np.mean(ious)) if ious else None,
            "n_pairs": len(self.pairs),
        }

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "resolution": self.resolution,
            "seed": self.seed,
            "mask_threshold": self.mask_threshold,
            "pairs": [p.to_json() for p in self.pairs],
            "splits": self.splits,
        }


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(manifest.to_json(), fh, indent=1)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ManifestError(f"missing key at {where}/{key}")
    return doc[key]


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ManifestError("manifest root must be an object at /")
    version = _require(doc, "version", "")
    if version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported version {version!r} at /version")
    pairs = []
    for i, pd in enumerate(_require(doc, "pairs", "")):
        where = f"/pairs/{i}"
        try:
            nt = NoiseType(_require(pd, "noise_type", where))
        except ValueError as exc:
            raise ManifestError(f"bad noise_type at {where}/noise_type") from exc
        pairs.append(
            AlignedPair(
                pair_id=str(_require(pd, "pair_id", where)),
                class_id=int(_require(pd, "class_id", where)),
                glyph_path=str(_require(pd, "glyph_path", where)),
                style_path=str(_require(pd, "style_path", where)),
                noise_type=nt,
                iou=pd.get("iou"),
            )
        )
    return DatasetManifest(
        resolution=int(_require(doc, "resolution", "")),
        seed=int(_require(doc, "seed", "")),
        pairs=pairs,
        splits={k: list(v) for k, v in doc.get("splits", {}).items()},
        mask_threshold=float(doc.get("mask_threshold", DEFAULT_MASK_THRESHOLD)),
        base_dir=path.parent,
    )


def synthesize_dataset(
    out_dir: str | Path,
    n_classes: int = 8,
    pairs_per_class: int = 60,
    resolution: int = 64,
    seed: int = 0,
) -> DatasetManifest:
    """Generate an aligned-pair dataset on disk and return its manifest.

    Noise types rotate round-robin within each class so every class covers
    all four degradation kinds.
    """
    out_dir = Path(out_dir)
    (out_dir / "glyphs").mkdir(parents=True, exist_ok=True)
    (out_dir / "styles").mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(resolution=resolution, seed=seed, base_dir=out_dir)
    for class_id in range(n_classes):
        for j in range(pairs_per_class):
            pair_seed = seed + 10_000 * class_id + j
            glyph = synth_glyph(class_id, pair_seed, resolution)
            noise_type = NOISE_TYPES[j % len(NOISE_TYPES)]
            style = synth_noise(glyph, noise_type, pair_seed)
            pair_id = f"c{class_id:03d}_p{j:04d}"
            gp = f"glyphs/{pair_id}.png"
            sp = f"styles/{pair_id}.png"
            save_image(out_dir / gp, glyph)
            save_image(out_dir / sp, style)
            manifest.pairs.append(
                AlignedPair(pair_id, class_id, gp, sp, noise_type)
            )
    save_manifest(manifest, out_dir / "manifest.json")
    manifest.base_dir = out_dir
    return manifest


def quality_gate(
    pair: AlignedPair,
    manifest: DatasetManifest,
    threshold: float = DEFAULT_GATE_THRESHOLD,
) -> bool:
    """Accept a pair iff the glyph-mask IoU of (glyph, style) >= threshold.

    The measured IoU is recorded on the pair either way.
    """
    glyph, style = manifest.load_pair(pair)
    t = manifest.mask_threshold
    pair.iou = iou(glyph_mask(glyph, t), glyph_mask(style, t))
    return pair.iou >= threshold


def validate_manifest(
    manifest: DatasetManifest,
    threshold: float = DEFAULT_GATE_THRESHOLD,
    qc_csv: str | Path | None = None,
) -> dict:
    """Run the quality gate over every pair; optionally emit the QC CSV.

    Returns summary stats including mean IoU of the accepted set.
    """
    rows = []
    for pair in manifest.pairs:
        accepted = quality_gate(pair, manifest, threshold)
        rows.append((pair.pair_id, pair.class_id, pair.iou, "accept" if accepted else "reject"))
    if qc_csv is not None:
        qc_csv = Path(qc_csv)
        qc_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(qc_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair_id", "class_id", "iou", "decision"])
            writer.writerows(rows)
    accepted_ious = [r[2] for r in rows if r[3] == "accept"]
    return {
        "n_pairs": len(rows),
        "n_accepted": len(accepted_ious),
        "n_rejected": len(rows) - len(accepted_ious),
        "mean_iou_accepted": float(np.mean(accepted_ious)) if accepted_ious else None,
        "mean_iou_all": float(np.mean([r[2] for r in rows])) if rows else None,
        "threshold": threshold,
    }


def accepted_pairs(manifest: DatasetManifest, threshold: float = DEFAULT_GATE_THRESHOLD) -> list[AlignedPair]:
    out = []
    for pair in manifest.pairs:
        if pair.iou is None:
            quality_gate(pair, manifest, threshold)
        if pair.iou >= threshold:
            out.append(pair)
    return out


def split_dataset(
    manifest: DatasetManifest,
    train_ratio: float = 0.8,
    seed: int = 0,
    test_classes: list[int] | None = None,
    min_per_class: int = 5,
    gate_threshold: float = DEFAULT_GATE_THRESHOLD,
) -> DatasetManifest:
    """Per-class stratified split of gate-accepted pairs into train/val.

    floor(n * train_ratio) of each class goes to train, the rest to val.
    Classes listed in test_classes are held out entirely as the test split,
    so test characters never overlap the train/val characters.
    """
    test_classes = set(test_classes or [])
    pool = accepted_pairs(manifest, gate_threshold)
    by_class: dict[int, list[AlignedPair]] = {}
    for p in pool:
        by_class.setdefault(p.class_id, []).append(p)
    for cid, items in sorted(by_class.items()):
        if cid not in test_classes and len(items) < min_per_class:
            raise ValueError(
                f"class {cid} has only {len(items)} accepted pairs (minimum {min_per_class})"
            )
    rng = np.random.default_rng(seed)
    train: list[str] = []
    val: list[str] = []
    test: list[str] = []
    for cid in sorted(by_class):
        ids = sorted(p.pair_id for p in by_class[cid])
        if cid in test_classes:
            test.extend(ids)
            continue
        perm = rng.permutation(len(ids))
        n_train = int(np.floor(len(ids) * train_ratio))
        train.extend(ids[i] for i in perm[:n_train])
        val.extend(ids[i] for i in perm[n_train:])
    manifest.splits = {"train": train, "val": val, "test": test}
    return manifest
