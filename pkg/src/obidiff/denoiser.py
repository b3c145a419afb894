"""Supervised denoising baseline: noisy rubbing in, clean glyph out.

Used to reproduce the denoising-as-preprocessing-for-recognition workflow.
Trained with a binary cross-entropy objective against the (near-binary)
clean glyph of each accepted pair; an L1 objective collapses to the
all-black solution on these sparse stroke targets. Validation is reported
as plain L1 either way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .images import validate_image
from .manifest import DatasetManifest
from .networks import DenoiserNet


@dataclass
class DenoiserConfig:
    base_channels: int = 16
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0


@dataclass
class DenoiserState:
    model: DenoiserNet
    resolution: int
    epochs_run: int
    seed: int
    loss_history: list[float] = field(default_factory=list)
    val_l1: float = float("nan")


def _split_tensors(manifest: DatasetManifest, split: str):
    pairs = manifest.split_pairs(split)
    if not pairs:
        raise ValueError(f"split {split!r} is empty")
    glyphs, styles = [], []
    for pair in pairs:
        g, s = manifest.load_pair(pair)
        glyphs.append(g)
        styles.append(s)
    to = lambda arrs: torch.from_numpy(np.stack(arrs)).float().unsqueeze(1)
    return to(styles), to(glyphs)


def train_denoiser(
    manifest: DatasetManifest, config: DenoiserConfig | None = None, log=None
) -> DenoiserState:
    """Minimize binary cross-entropy of model(style) against the glyph."""
    config = config or DenoiserConfig()
    torch.manual_seed(config.seed)
    x, y = _split_tensors(manifest, "train")
    model = DenoiserNet(config.base_channels)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    state = DenoiserState(model=model, resolution=manifest.resolution,
                          epochs_run=0, seed=config.seed)
    n = x.shape[0]
    model.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for i in range(0, n, config.batch_size):
            idx = perm[i : i + config.batch_size]
            pred = model(x[idx]).clamp(1e-6, 1.0 - 1e-6)
            loss = torch.nn.functional.binary_cross_entropy(pred, y[idx].clamp(0.0, 1.0))
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
        state.loss_history.append(epoch_loss / n)
        state.epochs_run = epoch + 1
        if log and (epoch + 1) % 10 == 0:
            log(f"denoiser epoch {epoch + 1}/{config.epochs} L1 {state.loss_history[-1]:.4f}")
    if manifest.splits.get("val"):
        state.val_l1 = validation_l1(state, manifest)
    return state


def validation_l1(state: DenoiserState, manifest: DatasetManifest, split: str = "val") -> float:
    x, y = _split_tensors(manifest, split)
    state.model.eval()
    with torch.no_grad():
        total = 0.0
        for i in range(0, x.shape[0], 32):
            sl = slice(i, i + 32)
            total += float(torch.sum(torch.abs(state.model(x[sl]) - y[sl]))) / x[sl][0].numel()
    return total / x.shape[0]


def identity_l1(manifest: DatasetManifest, split: str = "val") -> float:
    """L1 of the identity mapping style -> glyph; the do-nothing baseline."""
    x, y = _split_tensors(manifest, split)
    return float(torch.mean(torch.abs(x - y)))


def denoise(state: DenoiserState, img: np.ndarray) -> np.ndarray:
    """Single deterministic forward pass on one image."""
    img = validate_image(img)
    if img.shape != (state.resolution, state.resolution):
        raise ValueError(
            f"expected {state.resolution}x{state.resolution} input, got {img.shape}"
        )
    state.model.eval()
    with torch.no_grad():
        out = state.model(torch.from_numpy(img).float()[None, None])
    return out[0, 0].clamp(0.0, 1.0).numpy()


def save_denoiser(path: str | Path, state: DenoiserState) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state.model.state_dict(), path)
    base = state.model.enc1[0].out_channels
    sidecar = {
        "kind": "denoiser",
        "step": state.epochs_run,
        "seed": state.seed,
        "loss_ema": state.loss_history[-1] if state.loss_history else None,
        "config": {"base_channels": base, "resolution": state.resolution},
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=1)


def load_denoiser(path: str | Path) -> DenoiserState:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    if sidecar.get("kind") != "denoiser":
        raise ValueError(f"checkpoint at {path} is not a denoiser")
    model = DenoiserNet(sidecar["config"]["base_channels"])
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return DenoiserState(
        model=model,
        resolution=sidecar["config"]["resolution"],
        epochs_run=sidecar["step"],
        seed=sidecar["seed"],
    )
