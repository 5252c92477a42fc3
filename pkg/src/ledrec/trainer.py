"""
Mini-batch training of the LED model.

Each step draws a batch of users, splits every timeline into input and
target, drops input items at random (denoising), scores the targets against
uniformly sampled negatives shared across the user's targets, and applies
Adam.  Project tuning trains ``{P, b}`` over frozen base embeddings; full
tuning trains ``{V, b}``.  Checkpoints are ranked by validation NDCG@k.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .data import TimelineSet, has_clicks, holdout_splits, split_timeline
from .losses import SAMPLED_LOSSES, sample_negatives
from .metrics import ndcg_at_k, top_k
from .model import LedModel, Mode, NormMode, encode_user, parameter_count
from .rsvd import EmbeddingMatrix

_log = logging.getLogger(__name__)

LOSSES = ("bpr", "ns", "css", "multinomial")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss: str = "bpr"
    negatives: int = 1000
    learning_rate: float = 0.001
    batch_size: int = 512
    max_steps: int = 50_000
    checkpoint_every: int = 230
    denoise: float = 0.5
    init: str = "svd"
    tuning: str = "project"
    dim: int = 600
    norm_mode: str = "over_t"
    input_fraction: float = 0.8
    click_targets: bool | None = None
    eval_k: int = 100
    eval_max_users: int | None = None
    dense_eval_max_items: int = 50_000
    eval_sample_items: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.init not in ("random", "svd") or self.tuning not in ("full", "project"):
            raise ValueError("init must be random|svd and tuning full|project")
        if self.norm_mode not in ("over_t", "over_sqrt_t"):
            raise ValueError("norm_mode must be over_t or over_sqrt_t")
        for name in ("negatives", "batch_size", "max_steps", "checkpoint_every", "dim", "eval_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.denoise < 1.0:
            raise ValueError("denoise probability must lie in [0, 1)")


def denoise(items, p: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each item with probability ``1 - p``; never return an empty list for a non-empty input."""
    items = np.asarray(items)
    if p <= 0.0 or len(items) == 0:
        return items
    keep = rng.random(len(items)) >= p
    if not keep.any():
        keep[rng.integers(len(items))] = True
    return items[keep]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    indices: np.ndarray | None = None,
) -> tuple[np.ndarray, AdamState]:
    """
    One bias-corrected Adam update, in place.

    With ``indices`` only those rows are touched (lazy variant: moments of
    other rows are left as they are); ``grad`` then holds just those rows.
    """
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    if indices is None:
        state.m *= beta1
        state.m += (1.0 - beta1) * grad
        state.v *= beta2
        state.v += (1.0 - beta2) * grad * grad
        param -= lr * (state.m / c1) / (np.sqrt(state.v / c2) + eps)
    else:
        m = beta1 * state.m[indices] + (1.0 - beta1) * grad
        v = beta2 * state.v[indices] + (1.0 - beta2) * grad * grad
        state.m[indices] = m
        state.v[indices] = v
        param[indices] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return param, state


@dataclass
class Example:
    inputs: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray | None


@dataclass
class BatchGradients:
    loss: float
    projection: np.ndarray | None
    rows: np.ndarray | None
    row_grads: np.ndarray | None
    bias_rows: np.ndarray
    bias_grads: np.ndarray
    scored: int
    gathered: int


def batch_objective(
    examples: list[Example],
    emb: np.ndarray,
    biases: np.ndarray,
    projection: np.ndarray | None,
    loss: str,
    norm_mode: NormMode = NormMode.OVER_T,
) -> BatchGradients:
    """
    Mean loss over a batch of users and its gradients.

    ``emb`` is the frozen base table when ``projection`` is given (project
    tuning) and the trainable table otherwise.  Scores in project mode use
    ``P^T P`` applied once per user.  The arithmetic runs in the dtype of the
    parameters.
    """
    n_items, d = emb.shape
    B = len(examples)
    dtype = emb.dtype
    denoms = np.array(
        [len(ex.inputs) if norm_mode == NormMode.OVER_T else np.sqrt(len(ex.inputs)) for ex in examples],
        dtype=np.float64,
    )
    A = np.stack([emb[ex.inputs].sum(axis=0, dtype=np.float64) for ex in examples])
    A = (A / denoms[:, None]).astype(dtype)
    gathered = int(sum(len(ex.inputs) for ex in examples))
    W = (A @ projection.T) @ projection if projection is not None else A

    bias_grad = np.zeros(n_items, dtype=np.float64)
    if loss == "multinomial":
        S = W @ emb.T + biases
        total = 0.0
        G = np.empty_like(S, dtype=np.float64)
        for b, ex in enumerate(examples):
            s = S[b].astype(np.float64)
            pos = ex.positives
            total += float(np.mean(logsumexp(s) - s[pos]))
            g = softmax(s)
            np.subtract.at(g, pos, 1.0 / len(pos))
            G[b] = g / B
        G = G.astype(dtype)
        R = G @ emb
        bias_grad += G.sum(axis=0)
        row_full = G.T @ A if projection is None else None
        scored = B * n_items
        loss_value = total / B
    else:
        fn = SAMPLED_LOSSES[loss]
        R = np.zeros((B, d), dtype=dtype)
        item_lists, grad_lists = [], []
        total = 0.0
        scored = 0
        for b, ex in enumerate(examples):
            items = np.concatenate([ex.positives, ex.negatives])
            Ei = emb[items]
            s = Ei @ W[b] + biases[items]
            n_pos = len(ex.positives)
            lv = fn(s[:n_pos], s[n_pos:], n_items)
            g = np.concatenate([lv.grad_pos, lv.grad_negs]) / B
            total += lv.loss
            scored += len(items)
            R[b] = g.astype(dtype) @ Ei
            item_lists.append(items)
            grad_lists.append(g)
        all_items = np.concatenate(item_lists)
        np.add.at(bias_grad, all_items, np.concatenate(grad_lists))
        loss_value = total / B
        row_full = None

    bias_rows = np.arange(n_items) if loss == "multinomial" else np.unique(all_items)

    if projection is not None:
        G2 = R.T @ A + A.T @ R
        return BatchGradients(
            loss_value,
            (projection @ G2).astype(dtype),
            None,
            None,
            bias_rows,
            bias_grad[bias_rows].astype(dtype),
            scored,
            gathered,
        )

    # full tuning: gradients reach scored rows and input rows
    if row_full is not None:
        rows = np.arange(n_items)
        acc = row_full.astype(np.float64)
    else:
        rows = np.unique(np.concatenate([all_items] + [ex.inputs for ex in examples]))
        acc = np.zeros((len(rows), d), dtype=np.float64)
        for b, items in enumerate(item_lists):
            acc[np.searchsorted(rows, items)] += np.outer(grad_lists[b], A[b])
    for b, ex in enumerate(examples):
        np.add.at(acc, np.searchsorted(rows, ex.inputs), R[b] / denoms[b])
    return BatchGradients(
        loss_value,
        None,
        rows,
        acc.astype(dtype),
        bias_rows,
        bias_grad[bias_rows].astype(dtype),
        scored,
        gathered,
    )


@dataclass
class Checkpoint:
    step: int
    ndcg: float
    wall_clock: float
    model: LedModel | None = field(default=None, repr=False)


@dataclass
class TrainResult:
    model: LedModel
    checkpoints: list[Checkpoint]
    best: Checkpoint
    skipped: dict
    score_evaluations: int
    input_gathers: int


def select_best(checkpoints: list[Checkpoint]) -> Checkpoint:
    """Highest validation NDCG; earliest step on ties; last checkpoint if none was scored."""
    scored = [c for c in checkpoints if np.isfinite(c.ndcg)]
    if not scored:
        return checkpoints[-1]
    return max(scored, key=lambda c: (c.ndcg, -c.step))


class Trainer:
    """Holds parameters and optimizer state for one training run."""

    def __init__(
        self,
        train: TimelineSet,
        validation: TimelineSet | None,
        base: EmbeddingMatrix | np.ndarray | None,
        cfg: TrainConfig,
        checkpoint_dir=None,
        log_path=None,
        dtype=np.float32,
    ):
        self.cfg = cfg
        self.train_set = train
        self.validation = validation
        self.n_items = train.n_items
        self.norm_mode = NormMode.OVER_T if cfg.norm_mode == "over_t" else NormMode.OVER_SQRT_T
        self.click_targets = cfg.click_targets if cfg.click_targets is not None else has_clicks(train)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.log_path = Path(log_path) if log_path else None
        self.rng = np.random.default_rng(cfg.seed)

        base_vectors = base.vectors if isinstance(base, EmbeddingMatrix) else base
        if cfg.init == "svd":
            if base_vectors is None:
                raise ValueError("init='svd' needs pre-trained embeddings; run the rsvd stage first")
            if base_vectors.shape[0] != self.n_items:
                raise ValueError(
                    f"embeddings cover {base_vectors.shape[0]} items, dataset has {self.n_items}"
                )
            emb = np.array(base_vectors, dtype=dtype)
        else:
            d = base_vectors.shape[1] if base_vectors is not None else cfg.dim
            lim = 1.0 / np.sqrt(d)
            emb = self.rng.uniform(-lim, lim, size=(self.n_items, d)).astype(dtype)
        d = emb.shape[1]
        self.emb = emb
        self.biases = np.zeros(self.n_items, dtype=dtype)
        if cfg.tuning == "project":
            self.emb.flags.writeable = False
            self.projection = (np.eye(d) + 0.01 * self.rng.standard_normal((d, d))).astype(dtype)
            self.opt_proj = AdamState.zeros_like(self.projection)
            self.opt_emb = None
        else:
            self.projection = None
            self.opt_proj = None
            self.opt_emb = AdamState.zeros_like(self.emb)
        self.opt_bias = AdamState.zeros_like(self.biases)

        self.users = np.flatnonzero(train.lengths() >= 2)
        if len(self.users) == 0:
            raise ValueError("no training timeline has at least two events")
        self.skipped: dict = {}
        self.score_evaluations = 0
        self.input_gathers = 0
        self._epoch = 0
        self._queue = np.zeros(0, dtype=np.int64)

        self._val = None
        if validation is not None and len(validation):
            users, splits, _ = holdout_splits(
                validation, cfg.input_fraction, cfg.seed + 1, self.click_targets
            )
            if cfg.eval_max_users is not None:
                splits = splits[: cfg.eval_max_users]
            self._val = splits

    # batches

    def _next_users(self, n: int) -> np.ndarray:
        out = []
        while n > 0:
            if len(self._queue) == 0:
                epoch_rng = np.random.default_rng([self.cfg.seed, self._epoch])
                self._queue = epoch_rng.permutation(self.users)
                self._epoch += 1
            take = self._queue[:n]
            self._queue = self._queue[n:]
            out.append(take)
            n -= len(take)
        return np.concatenate(out)

    def make_batch(self) -> list[Example]:
        cfg = self.cfg
        examples = []
        while len(examples) < cfg.batch_size:
            for u in self._next_users(cfg.batch_size - len(examples)):
                t = self.train_set.timeline(int(u))
                s = split_timeline(
                    t, cfg.input_fraction, self.rng, True, self.click_targets, self.skipped
                )
                if s is None:
                    continue
                inputs = denoise(s.input, cfg.denoise, self.rng)
                positives = np.unique(s.target)
                negs = None
                if cfg.loss != "multinomial":
                    n = min(cfg.negatives, self.n_items - len(positives))
                    if n < 1:
                        continue
                    negs = sample_negatives(self.n_items, n, positives, self.rng)
                examples.append(Example(inputs.astype(np.int64), positives.astype(np.int64), negs))
        return examples

    def step(self, examples: list[Example]) -> float:
        cfg = self.cfg
        grads = batch_objective(
            examples, self.emb, self.biases, self.projection, cfg.loss, self.norm_mode
        )
        self.score_evaluations += grads.scored
        self.input_gathers += grads.gathered
        if not np.isfinite(grads.loss):
            return grads.loss
        lr = cfg.learning_rate
        if self.projection is not None:
            adam_step(self.projection, grads.projection, self.opt_proj, lr)
        else:
            adam_step(self.emb, grads.row_grads, self.opt_emb, lr, indices=grads.rows)
        adam_step(self.biases, grads.bias_grads, self.opt_bias, lr, indices=grads.bias_rows)
        return grads.loss

    # evaluation / snapshots

    def snapshot(self) -> LedModel:
        if self.projection is not None:
            base = np.array(self.emb, dtype=np.float32)
            return LedModel(
                base,
                self.biases.astype(np.float32),
                Mode.PROJECT,
                self.projection.astype(np.float32),
                self.norm_mode,
            )
        return LedModel(
            self.emb.astype(np.float32), self.biases.astype(np.float32), Mode.FULL, None, self.norm_mode
        )

    def validation_ndcg(self, model: LedModel) -> float:
        if not self._val:
            return float("nan")
        return evaluate_ndcg(
            model,
            self._val,
            self.cfg.eval_k,
            dense_max_items=self.cfg.dense_eval_max_items,
            sample_items=self.cfg.eval_sample_items,
            seed=self.cfg.seed + 2,
            exclude_input=not self.click_targets,
        )

    def run(self) -> TrainResult:
        cfg = self.cfg
        t0 = time.perf_counter()
        checkpoints: list[Checkpoint] = []
        best: Checkpoint | None = None
        log_fh = open(self.log_path, "a") if self.log_path else None
        try:
            for step in range(1, cfg.max_steps + 1):
                ts = time.perf_counter()
                loss = self.step(self.make_batch())
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}; config: {json.dumps(asdict(cfg))}"
                    )
                if log_fh:
                    rec = {
                        "step": step,
                        "loss": loss,
                        "lr": cfg.learning_rate,
                        "wall_ms": (time.perf_counter() - ts) * 1e3,
                    }
                    log_fh.write(json.dumps(rec) + "\n")
                if step % cfg.checkpoint_every == 0 or step == cfg.max_steps:
                    model = self.snapshot()
                    ck = Checkpoint(step, self.validation_ndcg(model), time.perf_counter() - t0)
                    checkpoints.append(ck)
                    self._save_checkpoint(ck, model)
                    if best is None or select_best([best, ck]) is ck:
                        ck.model = model
                        if best is not None:
                            best.model = None
                        best = ck
                    _log.info("step %d loss %.4f val ndcg@%d %.4f", step, loss, cfg.eval_k, ck.ndcg)
        finally:
            if log_fh:
                log_fh.close()
        if not np.isfinite(best.ndcg):
            # nothing was validated: keep the final parameters
            best = checkpoints[-1]
            best.model = self.snapshot()
        return TrainResult(
            best.model,
            checkpoints,
            best,
            dict(self.skipped),
            self.score_evaluations,
            self.input_gathers,
        )

    def _save_checkpoint(self, ck: Checkpoint, model: LedModel) -> None:
        if self.checkpoint_dir is None:
            return
        out = self.checkpoint_dir / f"step-{ck.step}"
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "model")
        metrics = {"step": ck.step, "ndcg": ck.ndcg, "wall_clock": ck.wall_clock}
        metrics.update(parameter_count(model))
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2))


def train(
    train_set: TimelineSet,
    validation: TimelineSet | None,
    base: EmbeddingMatrix | np.ndarray | None,
    cfg: TrainConfig,
    checkpoint_dir=None,
    log_path=None,
) -> TrainResult:
    return Trainer(train_set, validation, base, cfg, checkpoint_dir, log_path).run()


def evaluate_ndcg(
    model: LedModel,
    splits,
    k: int = 100,
    dense_max_items: int = 50_000,
    sample_items: int = 10_000,
    seed: int = 0,
    exclude_input: bool = True,
) -> float:
    """
    Mean NDCG@k of held-out targets given inputs.

    Up to ``dense_max_items`` every item is scored; beyond, each user's
    targets are ranked among themselves plus ``sample_items`` random items.
    """
    eff, b = model.effective, model.biases
    n = model.n_items
    rng = np.random.default_rng(seed)
    vals = []
    for split in splits:
        u = encode_user(split.input, model)
        excl = split.input if exclude_input else None
        if n <= dense_max_items:
            ranked = top_k(eff @ u + b, k, excl)
        else:
            cand = np.union1d(split.target, rng.choice(n, size=min(sample_items, n), replace=False))
            if excl is not None:
                cand = np.setdiff1d(cand, excl)
            ranked = cand[top_k(eff[cand] @ u + b[cand], k)]
        vals.append(ndcg_at_k(ranked, split.target, k))
    return float(np.mean(vals))
