"""obidiff command line: dataset, training, generation, evaluation, study.

Every command resolves its parameters from (defaults < --config JSON <
OBIDIFF_* environment < explicit flags) and writes the fully resolved
config beside its outputs so deterministic runs can be replayed.
"""

from __future__ import annotations

import contextlib
import csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import classifier as clf_mod
from . import denoiser as den_mod
from . import diffusion as diff_mod
from . import reports
from .experiments import augmentation_experiment, copy_style_generator
from .images import load_image, save_image
from .manifest import (
    DEFAULT_GATE_THRESHOLD,
    load_manifest,
    save_manifest,
    split_dataset,
    synthesize_dataset,
    validate_manifest,
)
from .metrics import feature_stats, fid_proxy, pair_metrics
from .study import make_bundle, score_study, session_from_log


def _resolve_config(defaults: dict, config_path: str | None, overrides: dict) -> dict:
    """defaults < JSON config file < OBIDIFF_* env < explicit CLI values."""
    resolved = dict(defaults)
    if config_path:
        with open(config_path) as fh:
            doc = json.load(fh)
        for k, v in doc.items():
            if k in resolved:
                resolved[k] = v
    for k in resolved:
        env = os.environ.get(f"OBIDIFF_{k.upper()}")
        if env is not None:
            cur = resolved[k]
            if isinstance(cur, bool):
                resolved[k] = env.lower() in ("1", "true", "yes")
            elif isinstance(cur, int):
                resolved[k] = int(env)
            elif isinstance(cur, float):
                resolved[k] = float(env)
            else:
                resolved[k] = env
    for k, v in overrides.items():
        if v is not None:
            resolved[k] = v
    return resolved


def _write_resolved(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{command}.config.json", "w") as fh:
        json.dump({"command": command, **resolved}, fh, indent=1)


@contextlib.contextmanager
def _exclusive_lock(out_dir: Path):
    """One long-running training per output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise click.ClickException(f"output directory {out_dir} is locked by another run")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@click.group()
def main():
    """Aligned-pair dataset tooling, diffusion generator, and evaluation."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--classes", "n_classes", type=int, default=None)
@click.option("--pairs-per-class", type=int, default=None)
@click.option("--resolution", type=int, default=None)
@click.option("--seed", type=int, default=None)
def synth(config_path, out, n_classes, pairs_per_class, resolution, seed):
    """Synthesize an aligned-pair dataset and write its manifest."""
    cfg = _resolve_config(
        {"n_classes": 8, "pairs_per_class": 60, "resolution": 64, "seed": 0},
        config_path,
        {"n_classes": n_classes, "pairs_per_class": pairs_per_class,
         "resolution": resolution, "seed": seed},
    )
    out = Path(out)
    _write_resolved(out, "synth", cfg)
    manifest = synthesize_dataset(out, **cfg)
    click.echo(f"wrote {len(manifest.pairs)} pairs to {out / 'manifest.json'}")


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--threshold", type=float, default=DEFAULT_GATE_THRESHOLD, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="directory for qc.csv")
def validate(manifest_path, threshold, out):
    """Run the IoU quality gate over every pair; emit the QC CSV."""
    manifest = load_manifest(manifest_path)
    qc_csv = Path(out) / "qc.csv" if out else Path(manifest_path).parent / "qc.csv"
    summary = validate_manifest(manifest, threshold, qc_csv)
    save_manifest(manifest, manifest_path)
    click.echo(json.dumps(summary, indent=1))
    if summary["mean_iou_accepted"] is not None:
        click.echo(f"mean IoU (accepted): {summary['mean_iou_accepted']:.4f}")
    click.echo(f"rejections: {summary['n_rejected']}")


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--train-ratio", type=float, default=0.8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--test-classes", default="", help="comma-separated held-out class ids")
def split(manifest_path, train_ratio, seed, test_classes):
    """Write stratified train/val (and held-out-class test) splits."""
    manifest = load_manifest(manifest_path)
    held_out = [int(x) for x in test_classes.split(",") if x.strip()]
    split_dataset(manifest, train_ratio=train_ratio, seed=seed, test_classes=held_out)
    save_manifest(manifest, manifest_path)
    sizes = {k: len(v) for k, v in manifest.splits.items()}
    click.echo(json.dumps(sizes))


@main.command("train-diffusion")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--masking/--no-masking", "masking", default=None)
@click.option("--cond-dropout", type=float, default=None,
              help="probability of zeroing the glyph channel per training sample")
@click.option("--freeze-glyph-encoder", is_flag=True, default=None)
@click.option("--freeze-style-encoder", is_flag=True, default=None)
def train_diffusion(config_path, manifest_path, out, steps, batch_size, lr, seed,
                    masking, cond_dropout, freeze_glyph_encoder, freeze_style_encoder):
    """Train the conditioned diffusion generator on the train split."""
    defaults = {
        "steps": 2000, "batch_size": 8, "lr": 1e-4, "seed": 0, "masking": True,
        "cond_dropout": 0.0,
        "freeze_glyph_encoder": False, "freeze_style_encoder": False,
        "base_channels": 16, "glyph_channels": 4, "n_style_tokens": 256,
        "ctx_dim": 128, "T": 1000, "beta_start": 1e-4, "beta_end": 0.02,
    }
    cfg = _resolve_config(defaults, config_path, {
        "steps": steps, "batch_size": batch_size, "lr": lr, "seed": seed,
        "masking": masking, "cond_dropout": cond_dropout,
        "freeze_glyph_encoder": freeze_glyph_encoder,
        "freeze_style_encoder": freeze_style_encoder,
    })
    out = Path(out)
    _write_resolved(out, "train-diffusion", cfg)
    manifest = load_manifest(manifest_path)
    model_cfg = diff_mod.ModelConfig(
        resolution=manifest.resolution,
        base_channels=cfg["base_channels"], glyph_channels=cfg["glyph_channels"],
        n_style_tokens=cfg["n_style_tokens"], ctx_dim=cfg["ctx_dim"],
        T=cfg["T"], beta_start=cfg["beta_start"], beta_end=cfg["beta_end"],
    )
    import torch

    torch.manual_seed(cfg["seed"])
    model = diff_mod.ConditionedDenoiser(model_cfg)
    train_cfg = diff_mod.TrainConfig(
        steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
        masking=cfg["masking"], cond_dropout=cfg["cond_dropout"],
        freeze_glyph_encoder=cfg["freeze_glyph_encoder"],
        freeze_style_encoder=cfg["freeze_style_encoder"],
    )
    with _exclusive_lock(out):
        state = diff_mod.train(model, manifest, train_cfg, out_dir=out, log=click.echo)
    reports.save_loss_curve(out / "loss.png", state.loss_history, "diffusion training loss")
    click.echo(f"final loss ema {state.loss_ema:.4f}; checkpoint at {out / 'checkpoint.pt'}")


def _generation_pairs(manifest, mode, rng):
    """(glyph, style, pair) conditioning triples for the requested setting."""
    if mode == "few-shot":
        pairs = manifest.split_pairs("val")
        return [(p, p) for p in pairs]
    if mode == "zero-shot":
        pairs = manifest.split_pairs("test")
        if not pairs:
            raise click.ClickException("zero-shot mode needs a held-out-class test split")
        return [(p, p) for p in pairs]
    if mode == "personalized":
        pairs = manifest.split_pairs("val")
        out = []
        for p in pairs:
            others = [q for q in pairs if q.class_id != p.class_id]
            if not others:
                continue
            out.append((p, others[int(rng.integers(len(others)))]))
        return out
    raise click.ClickException(f"unknown mode {mode}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), default=None)
@click.option("--mode", type=click.Choice(["few-shot", "zero-shot", "personalized"]),
              default="few-shot", show_default=True)
@click.option("--requests", "requests_path", type=click.Path(exists=True), default=None,
              help="JSONL batch: one {glyph_path, style_path, out_path, seed, dual_mask} per line")
@click.option("--limit", type=int, default=32, show_default=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--guidance", type=float, default=1.0, show_default=True,
              help="glyph-conditioning amplification; > 1 needs a cond-dropout-trained model")
def generate(checkpoint, out, manifest_path, mode, requests_path, limit, steps, seed, guidance):
    """Generate pseudo rubbings from a trained diffusion checkpoint."""
    model, _ = diff_mod.load_checkpoint(checkpoint)
    sched = diff_mod.make_schedule(model.config.T, model.config.beta_start, model.config.beta_end)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = []
    if requests_path:
        with open(requests_path) as fh:
            for line in fh:
                req = json.loads(line)
                glyph = load_image(req["glyph_path"])
                style = load_image(req["style_path"])
                img = diff_mod.generate_personalized(
                    model, glyph, style, sched,
                    dual=req.get("dual_mask", True),
                    steps=steps, seed=req.get("seed", seed), guidance=guidance,
                )
                save_image(req["out_path"], img)
                provenance.append(req)
    else:
        if not manifest_path:
            raise click.ClickException("--manifest is required without --requests")
        manifest = load_manifest(manifest_path)
        rng = np.random.default_rng(seed)
        triples = _generation_pairs(manifest, mode, rng)[:limit]
        for i, (gp, sp) in enumerate(triples):
            glyph, _ = manifest.load_pair(gp)
            _, style = manifest.load_pair(sp)
            img = diff_mod.generate_personalized(
                model, glyph, style, sched,
                dual=(mode == "personalized"), steps=steps, seed=seed + i,
                guidance=guidance,
            )
            out_path = out / f"gen_{gp.pair_id}_{sp.pair_id}.png"
            save_image(out_path, img)
            provenance.append({
                "glyph_pair": gp.pair_id, "style_pair": sp.pair_id,
                "class_id": gp.class_id, "mode": mode,
                "out_path": str(out_path), "seed": seed + i,
            })
    with open(out / "provenance.json", "w") as fh:
        json.dump(provenance, fh, indent=1)
    click.echo(f"wrote {len(provenance)} images to {out}")


@main.command("train-denoiser")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
def train_denoiser_cmd(config_path, manifest_path, out, epochs, seed):
    """Train the style->glyph denoising baseline."""
    cfg = _resolve_config(
        {"epochs": 50, "batch_size": 16, "lr": 1e-3, "seed": 0, "base_channels": 16},
        config_path, {"epochs": epochs, "seed": seed},
    )
    out = Path(out)
    _write_resolved(out, "train-denoiser", cfg)
    manifest = load_manifest(manifest_path)
    with _exclusive_lock(out):
        state = den_mod.train_denoiser(
            manifest,
            den_mod.DenoiserConfig(
                base_channels=cfg["base_channels"], epochs=cfg["epochs"],
                batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
            ),
            log=click.echo,
        )
    den_mod.save_denoiser(out / "denoiser.pt", state)
    reports.save_loss_curve(out / "loss.png", state.loss_history, "denoiser training L1")
    click.echo(f"val L1 {state.val_l1:.4f}; checkpoint at {out / 'denoiser.pt'}")


@main.command("train-classifier")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
def train_classifier_cmd(config_path, manifest_path, out, epochs, seed):
    """Train the recognition classifier on train-split rubbings."""
    cfg = _resolve_config(
        {"epochs": 30, "batch_size": 32, "lr": 1e-3, "weight_decay": 0.01, "seed": 0},
        config_path, {"epochs": epochs, "seed": seed},
    )
    out = Path(out)
    _write_resolved(out, "train-classifier", cfg)
    manifest = load_manifest(manifest_path)
    with _exclusive_lock(out):
        clf = clf_mod.train_classifier(
            manifest,
            clf_mod.ClassifierConfig(
                epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                weight_decay=cfg["weight_decay"], seed=cfg["seed"],
            ),
            log=click.echo,
        )
    clf_mod.save_classifier(out / "classifier.pt", clf)
    accs = clf_mod.eval_split(clf, manifest, "val", ks=(1, 3, 5))
    reports.save_loss_curve(out / "loss.png", clf.loss_history, "classifier training loss")
    click.echo(json.dumps({f"acc@{k}": v for k, v in accs.items()}))


@main.command("eval")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--generated", "generated_dir", required=True, type=click.Path(exists=True),
              help="directory produced by `obidiff generate` (provenance.json present)")
@click.option("--classifier", "classifier_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
def eval_cmd(manifest_path, generated_dir, classifier_path, out):
    """Pair metrics of generated images vs their target rubbings (+ Acc@k)."""
    manifest = load_manifest(manifest_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(Path(generated_dir) / "provenance.json") as fh:
        provenance = json.load(fh)
    rows = []
    gen_images, gen_labels, target_styles = [], [], []
    for rec in provenance:
        gen = load_image(rec["out_path"])
        target_pair = manifest.pair_by_id(rec.get("style_pair", rec.get("glyph_pair")))
        _, style = manifest.load_pair(target_pair)
        m = pair_metrics(gen, style)
        rows.append([rec["out_path"], str(manifest.base_dir / target_pair.style_path),
                     m.l1, m.rmse, m.psnr, m.ssim])
        gen_images.append(gen)
        gen_labels.append(rec.get("class_id", target_pair.class_id))
        target_styles.append(style)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_a", "image_b", "l1", "rmse", "psnr", "ssim"])
        writer.writerows(rows)
    summary = {
        "n": len(rows),
        "l1": float(np.mean([r[2] for r in rows])),
        "rmse": float(np.mean([r[3] for r in rows])),
        "psnr": float(np.mean([min(r[4], 1e9) for r in rows])),
        "ssim": float(np.mean([r[5] for r in rows])),
    }
    if classifier_path:
        clf = clf_mod.load_classifier(classifier_path)
        acc_rows = []
        for k in (1, 3, 5):
            if k <= clf.n_classes:
                acc_rows.append([k, clf_mod.acc_at_k(clf, list(zip(gen_images, gen_labels)), k)])
        with open(out / "acc.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "acc"])
            writer.writerows(acc_rows)
        summary["acc"] = {k: a for k, a in acc_rows}
        summary["fid_proxy"] = fid_proxy(gen_images, target_styles, clf.features)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    reports.save_sample_grid(
        out / "samples.png",
        [gen_images[:8], target_styles[:8]],
        ["generated", "target"],
    )
    click.echo(json.dumps(summary, indent=1))


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--split", "split_name", default="val", show_default=True)
def features(manifest_path, out, split_name):
    """Low-level feature CSV + kernel-density figure for glyphs vs styles."""
    manifest = load_manifest(manifest_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = manifest.split_pairs(split_name) or manifest.pairs
    groups = {"glyph": [], "style": []}
    rows = []
    for pair in pairs:
        glyph, style = manifest.load_pair(pair)
        for label, img, path in (("glyph", glyph, pair.glyph_path),
                                 ("style", style, pair.style_path)):
            st = feature_stats(img)
            groups[label].append(st)
            rows.append([path, st.brightness, st.contrast, st.sharpness, st.si])
    with open(out / "features.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "brightness", "contrast", "sharpness", "si"])
        writer.writerows(rows)
    reports.save_feature_distributions(out / "features.png", groups)
    click.echo(f"wrote {len(rows)} rows to {out / 'features.csv'}")


@main.command("augment-experiment")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help="diffusion checkpoint; omit to use the copy-style stub")
@click.option("--scales", default="1,5", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--out", required=True, type=click.Path())
def augment_experiment_cmd(manifest_path, checkpoint, scales, seed, steps, out):
    """Fig.-4-style study: duplicate vs generated augmentation arms."""
    manifest = load_manifest(manifest_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if checkpoint:
        model, _ = diff_mod.load_checkpoint(checkpoint)
        sched = diff_mod.make_schedule(
            model.config.T, model.config.beta_start, model.config.beta_end
        )

        def generator(glyph, style, gen_seed):
            return diff_mod.generate_personalized(
                model, glyph, style, sched, dual=True, steps=steps, seed=gen_seed
            )
    else:
        generator = copy_style_generator
    results = augmentation_experiment(
        manifest, generator, [int(s) for s in scales.split(",")],
        seed=seed, csv_path=out / "experiment.csv", log=click.echo,
    )
    reports.save_augmentation_curve(out / "experiment.png", results)
    click.echo(f"wrote {out / 'experiment.csv'}")


@main.command("study-bundle")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--n-real", type=int, default=50, show_default=True)
@click.option("--n-gen", type=int, default=50, show_default=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def study_bundle(manifest_path, checkpoint, out, n_real, n_gen, steps, seed):
    """Build a study bundle of real rubbings and freshly generated images."""
    manifest = load_manifest(manifest_path)
    model, _ = diff_mod.load_checkpoint(checkpoint)
    sched = diff_mod.make_schedule(model.config.T, model.config.beta_start, model.config.beta_end)
    out = Path(out)
    gen_dir = out / "generated_src"
    gen_dir.mkdir(parents=True, exist_ok=True)
    pairs = manifest.split_pairs("val") or manifest.pairs
    if len(pairs) < max(n_real, n_gen):
        raise click.ClickException(f"need at least {max(n_real, n_gen)} validation pairs")
    real_paths = [manifest.base_dir / p.style_path for p in pairs[:n_real]]
    gen_paths = []
    for i, pair in enumerate(pairs[:n_gen]):
        glyph, style = manifest.load_pair(pair)
        img = diff_mod.generate_personalized(
            model, glyph, style, sched, dual=True, steps=steps, seed=seed + i
        )
        p = gen_dir / f"{pair.pair_id}.png"
        save_image(p, img)
        gen_paths.append(p)
    make_bundle(out, real_paths, gen_paths, n_real=n_real, n_gen=n_gen, seed=seed)
    click.echo(f"bundle ready at {out}")


@main.command("study-serve")
@click.option("--bundle", required=True, type=click.Path(exists=True))
@click.option("--port", type=int, default=8765, show_default=True)
@click.option("--static", "static_dir", type=click.Path(exists=True), default=None)
def study_serve(bundle, port, static_dir):
    """Serve the study API (and UI assets) for a bundle."""
    import uvicorn

    from .server import create_app

    uvicorn.run(create_app(bundle, static_dir), host="127.0.0.1", port=port)


@main.command("study-score")
@click.option("--bundle", required=True, type=click.Path(exists=True))
@click.option("--session", "session_id", required=True)
def study_score(bundle, session_id):
    """Score a recorded session offline from its response log."""
    session = session_from_log(bundle, session_id)
    click.echo(json.dumps(score_study(session), indent=1))


if __name__ == "__main__":
    sys.exit(main())
