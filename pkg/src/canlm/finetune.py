"""Task adaptation: dataset assembly, full-parameter fine-tuning with
class-weighted loss, from-scratch controls, and the transfer-gain report.

Splits are trip-disjoint: a (vehicle, trip) pair never spans train/val/test.
Assignment is a seeded greedy fill that forces the first trip containing each
class into the training split, so rare impact sectors always remain learnable.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from canlm.datagen import IMPACT_CLASSES, EventLabel, rebalance
from canlm.errors import ComparisonError, HashMismatchError, StructureError, TaskError
from canlm.metrics import ConfusionMatrix, MetricReport, compute_metrics
from canlm.model import (
    Batch,
    CanEncoder,
    Checkpoint,
    ModelConfig,
    build_model,
    compute_loss,
    save_checkpoint,
    set_deterministic,
)
from canlm.tokenizer import TokenizedTrip
from canlm.vocab import CLS_ID

TRAIN, VAL, TEST = 0, 1, 2

TASK_COLLISION = "collision"
TASK_IMPACT = "impact"


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    seed: int
    imbalance_ratio: float | None = None  # binary only
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.kind not in (TASK_COLLISION, TASK_IMPACT):
            raise TaskError(f"unknown task kind {self.kind!r}")
        if abs(sum(self.splits) - 1.0) > 1e-9 or any(s <= 0 for s in self.splits):
            raise TaskError("split fractions must be positive and sum to 1")
        if self.kind == TASK_IMPACT and self.imbalance_ratio is not None:
            raise TaskError("imbalance_ratio applies to the binary task only")

    @property
    def n_classes(self) -> int:
        return 2 if self.kind == TASK_COLLISION else len(IMPACT_CLASSES)


@dataclass
class TaskDataset:
    task: TaskSpec
    X: np.ndarray  # int64 [n, 1 + window_length]; column 0 is <CLS>
    y: np.ndarray  # int64 [n]
    split: np.ndarray  # int8 [n] in {TRAIN, VAL, TEST}
    trip_keys: list[tuple[str, str]]
    class_weights: np.ndarray
    vocab_hash: str

    @property
    def n_classes(self) -> int:
        return self.task.n_classes

    def indices(self, part: int) -> np.ndarray:
        return np.flatnonzero(self.split == part)


def balanced_class_weights(y: np.ndarray, n_classes: int) -> np.ndarray:
    """w_c = N / (K * N_c) over the given labels; every class must appear."""
    counts = np.bincount(y, minlength=n_classes)
    if (counts == 0).any():
        empty = [c for c in range(n_classes) if counts[c] == 0]
        raise TaskError(f"unsatisfiable task: classes {empty} absent from the training split")
    return y.size / (n_classes * counts.astype(np.float64))


def _assign_splits(trip_keys, trip_classes, spec: TaskSpec) -> dict[tuple, int]:
    """Greedy trip-level assignment toward the target fractions.

    The first trip carrying a class not yet present in train is forced into
    train; otherwise the trip goes to the split furthest below target.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5917]))
    trips = sorted(trip_keys)
    order = rng.permutation(len(trips))
    counts = np.zeros(3)
    seen_in_train: set[int] = set()
    assignment: dict[tuple, int] = {}
    total = len(trips)
    for pos in order:
        key = trips[pos]
        classes = trip_classes.get(key, set())
        if classes - seen_in_train:
            part = TRAIN
        else:
            deficit = [spec.splits[p] - counts[p] / total for p in range(3)]
            part = int(np.argmax(deficit))
        assignment[key] = part
        counts[part] += 1
        if part == TRAIN:
            seen_in_train |= classes
    return assignment


def build_task_dataset(
    tokenized: list[TokenizedTrip], labels: list[EventLabel], spec: TaskSpec, vocab_hash: str | None = None
) -> TaskDataset:
    """Assemble (CLS + window) sequences with labels, rebalance, split by trip."""
    by_key: dict[tuple, TokenizedTrip] = {}
    for tt in tokenized:
        by_key[(tt.vehicle_id, tt.trip_id)] = tt
        if vocab_hash is not None and tt.vocab_hash != vocab_hash:
            raise HashMismatchError("token windows were produced under a different vocabulary")

    if spec.kind == TASK_COLLISION:
        used = rebalance(labels, spec.imbalance_ratio, spec.seed) if spec.imbalance_ratio else list(labels)
    else:
        used = [l for l in labels if l.is_collision]
        if not used:
            raise TaskError("impact task needs at least one collision window")
    used.sort(key=lambda l: (l.vehicle_id, l.trip_id, l.window_start))

    rows, ys, keys = [], [], []
    for l in used:
        tt = by_key.get((l.vehicle_id, l.trip_id))
        if tt is None:
            raise TaskError(f"label references unknown trip {(l.vehicle_id, l.trip_id)}")
        w = np.flatnonzero(tt.window_starts == l.window_start)
        if w.size != 1:
            raise TaskError(f"label references unknown window start {l.window_start}")
        rows.append(tt.ids[int(w[0])])
        ys.append(int(l.is_collision) if spec.kind == TASK_COLLISION else l.impact_class)
        keys.append((l.vehicle_id, l.trip_id))

    y = np.asarray(ys, dtype=np.int64)
    X = np.empty((len(rows), 1 + rows[0].size), dtype=np.int64)
    X[:, 0] = CLS_ID
    X[:, 1:] = np.stack(rows)

    trip_classes: dict[tuple, set] = {}
    for key, cls in zip(keys, ys):
        trip_classes.setdefault(key, set()).add(int(cls))
    assignment = _assign_splits(set(keys), trip_classes, spec)
    split = np.asarray([assignment[k] for k in keys], dtype=np.int8)

    train_y = y[split == TRAIN]
    if train_y.size == 0:
        raise TaskError("empty training split")
    weights = balanced_class_weights(train_y, spec.n_classes)
    return TaskDataset(
        task=spec,
        X=X,
        y=y,
        split=split,
        trip_keys=keys,
        class_weights=weights,
        vocab_hash=vocab_hash or tokenized[0].vocab_hash,
    )


@dataclass(frozen=True)
class FinetuneConfig:
    total_steps: int
    batch_size: int
    seed: int
    lr: float = 2e-4
    warmup_steps: int = 20
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_interval: int = 50
    deterministic: bool = True
    threads: int = 1

    def budget(self) -> dict:
        return {"total_steps": self.total_steps, "batch_size": self.batch_size, "lr": self.lr}


@dataclass
class FinetuneResult:
    arm: str  # "pretrained" | "scratch"
    task: TaskSpec
    seed: int
    budget: dict
    best_val_f1: float
    best_step: int
    test_report: MetricReport
    test_confusion: ConfusionMatrix
    metrics_rows: list[str]
    model: CanEncoder = field(repr=False, default=None)

    @property
    def test_f1(self) -> float:
        return self.test_report.positive_f1() if self.task.kind == TASK_COLLISION else self.test_report.macro_f1


def primary_f1(report: MetricReport, kind: str) -> float:
    return report.positive_f1() if kind == TASK_COLLISION else report.macro_f1


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _evaluate(model, dataset: TaskDataset, part: int, batch_size: int = 32):
    idx = dataset.indices(part)
    model.eval()
    preds = np.empty(idx.size, dtype=np.int64)
    with torch.no_grad():
        for lo in range(0, idx.size, batch_size):
            chunk = idx[lo : lo + batch_size]
            ids = torch.from_numpy(dataset.X[chunk])
            logits = model(ids)
            preds[lo : lo + chunk.size] = logits.argmax(dim=-1).numpy()
    model.train()
    return compute_metrics(dataset.y[idx], preds, dataset.n_classes)


def finetune(
    checkpoint: Checkpoint | None,
    dataset: TaskDataset,
    run_cfg: FinetuneConfig,
    model_cfg: ModelConfig | None = None,
    out_dir=None,
) -> FinetuneResult:
    """Full-parameter fine-tuning with a freshly initialized classification head.

    Pass a pretrained checkpoint for the transfer arm or ``checkpoint=None``
    with an explicit ``model_cfg`` for the from-scratch control. Returns the
    best-validation-F1 state evaluated on the test split.
    """
    if checkpoint is not None:
        base_cfg = checkpoint.config
    elif model_cfg is not None:
        base_cfg = model_cfg
    else:
        raise TaskError("scratch arm needs an explicit model config")
    cfg = replace(base_cfg, head="classifier", n_classes=dataset.n_classes)
    seq_len = dataset.X.shape[1]
    if cfg.max_seq_len < seq_len:
        raise StructureError(f"model max_seq_len {cfg.max_seq_len} < task sequence length {seq_len}")

    if run_cfg.deterministic:
        set_deterministic(run_cfg.seed, threads=run_cfg.threads)
    else:
        torch.manual_seed(run_cfg.seed)

    model = build_model(cfg, seed=run_cfg.seed)  # head initialized fresh here
    if checkpoint is not None:
        trunk = {
            k: torch.from_numpy(v.copy())
            for k, v in checkpoint.tensors.items()
            if not k.startswith("optim::") and not k.startswith("head.")
        }
        missing, unexpected = model.load_state_dict(trunk, strict=False)
        if unexpected or any(not m.startswith("head.") for m in missing):
            raise HashMismatchError(f"checkpoint does not match the encoder (missing={missing}, unexpected={unexpected})")

    optimizer = torch.optim.AdamW(model.parameters(), lr=run_cfg.lr, weight_decay=run_cfg.weight_decay)
    weights = torch.from_numpy(dataset.class_weights).float()
    train_idx = dataset.indices(TRAIN)
    arm = "scratch" if checkpoint is None else "pretrained"

    rows = ["step,loss,lr,val_f1"]
    best_f1, best_step, best_state = -1.0, -1, None
    model.train()
    for step in range(run_cfg.total_steps):
        lr = run_cfg.lr * min(1.0, (step + 1) / run_cfg.warmup_steps) if run_cfg.warmup_steps else run_cfg.lr
        for group in optimizer.param_groups:
            group["lr"] = lr
        pick = _rng(run_cfg.seed, 11, step)
        idx = train_idx[pick.choice(train_idx.size, size=run_cfg.batch_size, replace=train_idx.size < run_cfg.batch_size)]
        batch = Batch(
            input_ids=torch.from_numpy(dataset.X[idx]),
            attention_mask=torch.ones((idx.size, seq_len), dtype=torch.bool),
            labels=torch.from_numpy(dataset.y[idx]),
        )
        optimizer.zero_grad(set_to_none=True)
        loss, _ = compute_loss(model, batch, weights)
        if not torch.isfinite(loss):
            raise TaskError(f"non-finite fine-tuning loss at step {step}")
        loss.backward()
        if run_cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), run_cfg.grad_clip)
        optimizer.step()

        if (step + 1) % run_cfg.eval_interval == 0 or step + 1 == run_cfg.total_steps:
            report, _ = _evaluate(model, dataset, VAL)
            val_f1 = primary_f1(report, dataset.task.kind)
            rows.append(f"{step},{float(loss)!r},{lr!r},{val_f1!r}")
            if val_f1 > best_f1:
                best_f1, best_step = val_f1, step
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            rows.append(f"{step},{float(loss)!r},{lr!r},")

    if best_state is not None:
        model.load_state_dict(best_state)
    test_report, test_cm = _evaluate(model, dataset, TEST)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as f:
            f.write("\n".join(rows) + "\n")
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), model, step=run_cfg.total_steps)

    return FinetuneResult(
        arm=arm,
        task=dataset.task,
        seed=run_cfg.seed,
        budget=run_cfg.budget(),
        best_val_f1=best_f1,
        best_step=best_step,
        test_report=test_report,
        test_confusion=test_cm,
        metrics_rows=rows,
        model=model,
    )


def transfer_gain(pretrained: list[FinetuneResult], scratch: list[FinetuneResult]) -> dict:
    """Per-seed and mean F1 difference (pretrained - scratch) under equal budgets."""
    if len(pretrained) != len(scratch) or not pretrained:
        raise ComparisonError("need matching non-empty result lists")
    by_seed_p = {r.seed: r for r in pretrained}
    by_seed_s = {r.seed: r for r in scratch}
    if set(by_seed_p) != set(by_seed_s):
        raise ComparisonError("arms were trained on different seeds")
    per_seed = []
    for seed in sorted(by_seed_p):
        p, s = by_seed_p[seed], by_seed_s[seed]
        if p.budget != s.budget:
            raise ComparisonError(f"seed {seed}: unequal budgets {p.budget} vs {s.budget}")
        if p.task != s.task:
            raise ComparisonError(f"seed {seed}: arms ran different tasks")
        per_seed.append({"seed": seed, "pretrained_f1": p.test_f1, "scratch_f1": s.test_f1, "gain": p.test_f1 - s.test_f1})
    gains = [r["gain"] for r in per_seed]
    return {
        "task": pretrained[0].task.kind,
        "per_seed": per_seed,
        "mean_gain": float(np.mean(gains)),
        "std_gain": float(np.std(gains)),
        "mean_pretrained_f1": float(np.mean([r["pretrained_f1"] for r in per_seed])),
        "mean_scratch_f1": float(np.mean([r["scratch_f1"] for r in per_seed])),
    }
