"""Human preference study: bundle building, session state, scoring.

A bundle directory holds the round images plus an items manifest whose
truth labels (real rubbing vs generated) stay server-side. Sessions append
responses to a JSONL log; the report is computed on read once every item
has an answer. The positive class for precision/recall/F1 is "generated".
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REAL = "real"
GENERATED = "generated"
DEFAULT_ROUNDS = 100


class IncompleteSessionError(ValueError):
    def __init__(self, unanswered: list[str]):
        self.unanswered = unanswered
        super().__init__(f"{len(unanswered)} items unanswered: {unanswered[:5]}...")


@dataclass
class StudyItem:
    item_id: str
    image_path: str
    truth: str  # REAL or GENERATED


@dataclass
class StudySession:
    session_id: str
    items: list[StudyItem]
    created_at: float
    responses: dict[str, dict] = field(default_factory=dict)  # item_id -> {choice, timestamp}

    def record(self, item_id: str, choice: str, timestamp: float) -> bool:
        """Record an answer; the first answer per item wins. Returns False
        if the item already had one (idempotent accept)."""
        if choice not in (REAL, GENERATED):
            raise ValueError(f"choice must be '{REAL}' or '{GENERATED}', got {choice!r}")
        if item_id not in {it.item_id for it in self.items}:
            raise KeyError(f"unknown item {item_id}")
        if item_id in self.responses:
            return False
        self.responses[item_id] = {"choice": choice, "timestamp": timestamp}
        return True

    @property
    def unanswered(self) -> list[str]:
        return [it.item_id for it in self.items if it.item_id not in self.responses]


def confusion_counts(session: StudySession) -> dict[str, int]:
    tp = fp = fn = tn = 0
    for it in session.items:
        choice = session.responses[it.item_id]["choice"]
        if it.truth == GENERATED and choice == GENERATED:
            tp += 1
        elif it.truth == REAL and choice == GENERATED:
            fp += 1
        elif it.truth == GENERATED and choice == REAL:
            fn += 1
        else:
            tn += 1
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn}


def prf_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def score_study(session: StudySession) -> dict:
    """Per-session report; raises IncompleteSessionError until all items
    are answered."""
    missing = session.unanswered
    if missing:
        raise IncompleteSessionError(missing)
    c = confusion_counts(session)
    precision, recall, f1 = prf_from_counts(c["tp"], c["fp"], c["fn"])
    timestamps = [r["timestamp"] for r in session.responses.values()]
    return {
        "session_id": session.session_id,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "duration_s": max(timestamps) - session.created_at if timestamps else 0.0,
        "n_items": len(session.items),
    }


def aggregate_reports(rows: list[tuple[float, float, float]]) -> tuple[float, float, float]:
    """Multi-session aggregate: unweighted mean of per-session metrics."""
    if not rows:
        raise ValueError("no reports to aggregate")
    arr = np.asarray(rows, dtype=np.float64)
    return tuple(float(v) for v in arr.mean(axis=0))


def make_bundle(
    out_dir: str | Path,
    real_paths: list[Path],
    generated_paths: list[Path],
    n_real: int = 50,
    n_gen: int = 50,
    seed: int = 0,
) -> Path:
    """Assemble a study bundle: images, shuffled item order, hidden truths.

    Item order is deterministic per seed; truth labels live only in
    items.json, which the server never exposes through the items endpoint.
    """
    if len(real_paths) < n_real:
        raise ValueError(f"need {n_real} real images, have {len(real_paths)}")
    if len(generated_paths) < n_gen:
        raise ValueError(f"need {n_gen} generated images, have {len(generated_paths)}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    chosen = [(p, REAL) for p in sorted(real_paths)[:n_real]]
    chosen += [(p, GENERATED) for p in sorted(generated_paths)[:n_gen]]
    order = rng.permutation(len(chosen))
    items = []
    for rank, j in enumerate(order):
        src, truth = chosen[j]
        item_id = f"item{rank:03d}"
        dst = img_dir / f"{item_id}.png"
        shutil.copyfile(src, dst)
        items.append({"item_id": item_id, "image_path": f"images/{item_id}.png", "truth": truth})
    with open(out_dir / "items.json", "w") as fh:
        json.dump({"seed": seed, "items": items}, fh, indent=1)
    return out_dir


def load_bundle_items(bundle_dir: str | Path) -> list[StudyItem]:
    with open(Path(bundle_dir) / "items.json") as fh:
        doc = json.load(fh)
    return [StudyItem(d["item_id"], d["image_path"], d["truth"]) for d in doc["items"]]


def session_from_log(bundle_dir: str | Path, session_id: str) -> StudySession:
    """Rebuild a session from its append-only response log."""
    log_path = Path(bundle_dir) / "sessions" / f"{session_id}.jsonl"
    if not log_path.exists():
        raise FileNotFoundError(f"no session log at {log_path}")
    items = load_bundle_items(bundle_dir)
    created_at = 0.0
    session = StudySession(session_id=session_id, items=items, created_at=created_at)
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("event") == "created":
                session.created_at = rec["timestamp"]
            elif rec.get("event") == "response":
                session.record(rec["item_id"], rec["choice"], rec["timestamp"])
    return session
