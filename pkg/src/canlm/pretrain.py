"""Masked-token pretraining: the masking policy, the training loop, and the
embedding export.

Every random choice is keyed by (seed, purpose, step, slot) through its own
generator, so batch composition and masking are pure functions of the step.
Together with checkpointed torch RNG state (dropout) and optimizer state,
a resumed run continues bit-for-bit identically to an uninterrupted one in
deterministic mode.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from canlm.errors import HashMismatchError, StructureError, TaskError
from canlm.model import (
    MLM_IGNORE,
    Batch,
    CanEncoder,
    Checkpoint,
    ModelConfig,
    build_model,
    compute_loss,
    load_checkpoint,
    model_from_checkpoint,
    restore_optimizer,
    restore_torch_rng,
    save_checkpoint,
    set_deterministic,
)
from canlm.vocab import CLS_ID, PAD_ID, Vocabulary

RANDOM_POOL_START = 4  # random replacements draw from non-special ids (meta tokens included)


@dataclass(frozen=True)
class MaskingPolicy:
    select_fraction: float = 0.15
    mask_fraction: float = 0.8
    random_fraction: float = 0.1
    keep_fraction: float = 0.1
    non_maskable: frozenset = frozenset({PAD_ID, CLS_ID})

    def __post_init__(self):
        if not 0 <= self.select_fraction <= 1:
            raise TaskError("select_fraction must lie in [0, 1]")
        parts = (self.mask_fraction, self.random_fraction, self.keep_fraction)
        if any(not 0 <= p <= 1 for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
            raise TaskError("mask/random/keep fractions must be in [0,1] and sum to 1")


def apply_masking(
    ids: np.ndarray, policy: MaskingPolicy, rng: np.random.Generator, vocab_size: int, mask_id: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Select ~15% of maskable positions; replace 80/10/10; label selected only.

    Returns (input_ids, labels) as int64 arrays; labels hold the original id at
    selected positions and the ignore marker elsewhere.
    """
    ids = np.asarray(ids)
    inputs = ids.astype(np.int64)
    labels = np.full(ids.shape, MLM_IGNORE, dtype=np.int64)
    if policy.select_fraction == 0:
        return inputs, labels
    maskable = np.flatnonzero(~np.isin(inputs, list(policy.non_maskable)))
    if maskable.size == 0:
        return inputs, labels
    n_sel = max(1, round(policy.select_fraction * maskable.size))
    sel = maskable[rng.choice(maskable.size, size=n_sel, replace=False)]
    labels[sel] = inputs[sel]
    u = rng.random(n_sel)
    to_mask = sel[u < policy.mask_fraction]
    to_random = sel[(u >= policy.mask_fraction) & (u < policy.mask_fraction + policy.random_fraction)]
    inputs[to_mask] = mask_id
    if to_random.size:
        inputs[to_random] = rng.integers(RANDOM_POOL_START, vocab_size, size=to_random.size)
    return inputs, labels


@dataclass(frozen=True)
class TrainRunConfig:
    total_steps: int
    batch_size: int
    seed: int
    lr: float = 3e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_interval: int = 100
    eval_fraction: float = 0.05
    eval_max_windows: int = 256
    deterministic: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.total_steps <= 0 or self.batch_size <= 0:
            raise TaskError("total_steps and batch_size must be positive")
        if self.seed is None:
            raise TaskError("seed is mandatory")


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _lr_at(cfg: TrainRunConfig, step: int) -> float:
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


def _mask_batch(windows, idx, policy, seed, tag, step, vocab_size):
    inputs, labels = [], []
    for slot, w in enumerate(idx):
        i, l = apply_masking(windows[w], policy, _rng(seed, tag, step, slot), vocab_size)
        inputs.append(i)
        labels.append(l)
    return (
        torch.from_numpy(np.stack(inputs)),
        torch.from_numpy(np.stack(labels)),
    )


@dataclass
class PretrainResult:
    checkpoint_path: str
    metrics_path: str
    final_eval_ce: float
    final_eval_acc: float
    steps: int
    model: CanEncoder = field(repr=False, default=None)


def evaluate_masked(model, windows, eval_idx, policy, seed, vocab_size, batch_size=16):
    """Held-out masked cross-entropy and top-1 accuracy under fixed masking."""
    model.eval()
    total_ce, total_hits, total_n = 0.0, 0, 0
    with torch.no_grad():
        for lo in range(0, len(eval_idx), batch_size):
            chunk = eval_idx[lo : lo + batch_size]
            inputs, labels = [], []
            for w in chunk:
                i, l = apply_masking(windows[w], policy, _rng(seed, 3, int(w)), vocab_size)
                inputs.append(i)
                labels.append(l)
            ids = torch.from_numpy(np.stack(inputs))
            lab = torch.from_numpy(np.stack(labels))
            logits = model(ids)
            flat = logits.reshape(-1, vocab_size)
            flat_lab = lab.reshape(-1)
            live = flat_lab != MLM_IGNORE
            ce = torch.nn.functional.cross_entropy(flat[live], flat_lab[live], reduction="sum")
            total_ce += float(ce)
            total_hits += int((flat[live].argmax(dim=-1) == flat_lab[live]).sum())
            total_n += int(live.sum())
    model.train()
    return total_ce / max(total_n, 1), total_hits / max(total_n, 1)


def pretrain(
    windows: np.ndarray,
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    run_cfg: TrainRunConfig,
    out_dir,
    policy: MaskingPolicy = MaskingPolicy(),
    resume: str | None = None,
    expected_vocab_hash: str | None = None,
) -> PretrainResult:
    """Seeded MLM pretraining over tokenized windows.

    ``windows`` is a uint32 matrix [n_windows, window_length]. Logs one line
    per step to ``metrics.csv`` (step, loss, lr, and held-out masked CE /
    accuracy at eval steps) and writes the final checkpoint.
    """
    if windows.ndim != 2 or windows.shape[0] == 0:
        raise StructureError("pretraining corpus must be a non-empty window matrix")
    if expected_vocab_hash is not None and vocab.vocab_hash != expected_vocab_hash:
        raise HashMismatchError("token windows were produced under a different vocabulary")
    if model_cfg.vocab_size != vocab.size:
        raise HashMismatchError(f"model vocab_size {model_cfg.vocab_size} != vocabulary size {vocab.size}")
    if model_cfg.head != "mlm":
        raise TaskError("pretraining requires the MLM head")

    os.makedirs(out_dir, exist_ok=True)
    if run_cfg.deterministic:
        set_deterministic(run_cfg.seed, threads=run_cfg.threads)
    else:
        torch.manual_seed(run_cfg.seed)

    n = windows.shape[0]
    split = _rng(run_cfg.seed, 0).permutation(n)
    n_eval = min(max(1, round(run_cfg.eval_fraction * n)), run_cfg.eval_max_windows, n - 1)
    eval_idx, train_idx = split[:n_eval], split[n_eval:]

    start_step = 0
    if resume is None:
        model = build_model(model_cfg, seed=run_cfg.seed)
        optimizer = torch.optim.AdamW(model.parameters(), lr=run_cfg.lr, weight_decay=run_cfg.weight_decay)
    else:
        ckpt = load_checkpoint(resume)
        if ckpt.config != model_cfg:
            raise HashMismatchError("resume checkpoint was trained under a different model config")
        model = model_from_checkpoint(ckpt)
        optimizer = torch.optim.AdamW(model.parameters(), lr=run_cfg.lr, weight_decay=run_cfg.weight_decay)
        restore_optimizer(ckpt, model, optimizer)
        restore_torch_rng(ckpt)
        start_step = ckpt.step

    metrics_path = os.path.join(out_dir, "metrics.csv")
    mode = "a" if resume is not None and os.path.exists(metrics_path) else "w"
    log = open(metrics_path, mode, encoding="utf-8")
    if mode == "w":
        log.write("step,loss,lr,eval_ce,eval_acc\n")

    model.train()
    final_ce, final_acc = math.nan, math.nan
    try:
        for step in range(start_step, run_cfg.total_steps):
            lr = _lr_at(run_cfg, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            pick = _rng(run_cfg.seed, 1, step)
            idx = pick.choice(len(train_idx), size=run_cfg.batch_size, replace=len(train_idx) < run_cfg.batch_size)
            batch_windows = train_idx[idx]
            inputs, labels = _mask_batch(windows, batch_windows, policy, run_cfg.seed, 2, step, vocab.size)
            batch = Batch(input_ids=inputs, attention_mask=torch.ones_like(inputs, dtype=torch.bool), labels=labels)
            optimizer.zero_grad(set_to_none=True)
            loss, _ = compute_loss(model, batch)
            if not torch.isfinite(loss):
                dump = os.path.join(out_dir, f"diverged_step{step}.npz")
                np.savez(dump, input_ids=inputs.numpy(), labels=labels.numpy())
                raise TaskError(f"non-finite loss at step {step}; offending batch dumped to {dump}")
            loss.backward()
            if run_cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), run_cfg.grad_clip)
            optimizer.step()

            is_eval = (step + 1) % run_cfg.eval_interval == 0 or step + 1 == run_cfg.total_steps
            if is_eval:
                final_ce, final_acc = evaluate_masked(model, windows, eval_idx, policy, run_cfg.seed, vocab.size)
                log.write(f"{step},{float(loss)!r},{lr!r},{final_ce!r},{final_acc!r}\n")
            else:
                log.write(f"{step},{float(loss)!r},{lr!r},,\n")
    finally:
        log.close()

    ckpt_path = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(
        ckpt_path,
        model,
        step=run_cfg.total_steps,
        optimizer=optimizer,
        extra={"vocab_hash": vocab.vocab_hash, "schema_hash": vocab.schema_hash},
    )
    return PretrainResult(
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        final_eval_ce=final_ce,
        final_eval_acc=final_acc,
        steps=run_cfg.total_steps,
        model=model,
    )


# ---------------------------------------------------------------------------
# Embedding export + cluster statistic
# ---------------------------------------------------------------------------


def export_embeddings(model_or_ckpt, vocab: Vocabulary, path) -> tuple[float, float]:
    """Write the token embedding table as TSV (id, token, components).

    Returns (within_feature, across_feature) mean cosine similarity over bin
    tokens: trained models should separate the two; random initializations
    should not.
    """
    if isinstance(model_or_ckpt, Checkpoint):
        emb = model_or_ckpt.tensors["embeddings.token.weight"]
    else:
        emb = model_or_ckpt.embeddings.token.weight.detach().cpu().numpy()
    if emb.shape[0] != vocab.size:
        raise HashMismatchError("embedding table size does not match the vocabulary")
    with open(path, "w", encoding="utf-8") as f:
        for i in range(vocab.size):
            f.write(f"{i}\t{vocab.token_of(i)}\t" + "\t".join(repr(float(x)) for x in emb[i]) + "\n")
    return embedding_cluster_statistic(emb, vocab)


def read_embeddings(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            rows.append([float(x) for x in parts[2:]])
    return np.asarray(rows)


def embedding_cluster_statistic(emb: np.ndarray, vocab: Vocabulary, max_pairs: int = 20000) -> tuple[float, float]:
    """Mean cosine similarity among same-feature bin tokens vs across features."""
    unit = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    groups = {name: ids for name, ids in vocab.bin_ids_by_feature().items() if len(ids) >= 2}
    if len(groups) < 2:
        raise TaskError("need at least two multi-bin features for the cluster statistic")
    within = []
    for ids in groups.values():
        g = unit[ids]
        sims = g @ g.T
        iu = np.triu_indices(len(ids), k=1)
        within.append(float(sims[iu].mean()))
    rng = _rng(0xE3B)
    names = sorted(groups)
    across = []
    for _ in range(max_pairs):
        a, b = rng.choice(len(names), size=2, replace=False)
        ia = rng.choice(groups[names[a]])
        ib = rng.choice(groups[names[b]])
        across.append(float(unit[ia] @ unit[ib]))
    return float(np.mean(within)), float(np.mean(across))
