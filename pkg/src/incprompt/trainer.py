"""Task-sequential training and class-incremental evaluation.

Training a task (prompt-free pass -> keys -> key loss -> prompts -> prompted
pass -> cross-entropy) only ever updates that task's key learner, that task's
prompter and the shared classifier head. At test time the task is inferred by
key matching; no task id reaches the model.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, PromptSchedule, TokenBatch, VisionTransformer, pooled_feature
from .data import StreamCursor, TaskStream
from .errors import ConfigError, NoNegativeAvailable, ProtocolError
from .key_learner import KeyLearner, KeyLossConfig, key_loss, match_task, mine_negative
from .prompter import TaskPrompter, prompts_by_layer

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "incprompt-checkpoint"
CHECKPOINT_VERSION = 1
TASK_CSV_HEADER = ("task_trained", "task_evaluated", "accuracy", "selected_task_mode")
SUMMARY_CSV_HEADER = ("seed", "method", "avg_acc", "forgetting", "prompt_length", "prompt_depth")
METHODS = ("incprompt", "ftseq", "upper_bound")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    reduction: str = "mean"  # or "sum"
    mask_old_classes: bool = True
    similarity: str = "cosine"
    classifier_pool: str = "cls"
    key_pool: str = "mean"
    key_dim: int | None = None
    prompter_hidden: int | None = None
    activation: str = "gelu"
    ftseq_backbone: bool = False
    first_task_negative: str = "null"  # "null": zero key, "drop": skip the triplet term
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.similarity not in ("cosine", "euclidean"):
            raise ConfigError(f"similarity must be 'cosine' or 'euclidean', got {self.similarity!r}")
        for name in ("classifier_pool", "key_pool"):
            if getattr(self, name) not in ("cls", "mean"):
                raise ConfigError(f"{name} must be 'cls' or 'mean'")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"activation must be 'relu' or 'gelu', got {self.activation!r}")
        if self.first_task_negative not in ("null", "drop"):
            raise ConfigError(f"first_task_negative must be 'null' or 'drop', got {self.first_task_negative!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


def task_loss(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Cross-entropy between ``logits`` and integer ``labels``."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ConfigError(
            f"labels must lie in [0, {logits.shape[-1]}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels, reduction=reduction)


def total_loss(task_l: torch.Tensor, key_l: torch.Tensor) -> torch.Tensor:
    return task_l + key_l


class ClassifierHead(nn.Module):
    """Shared linear head over every class of the stream; unseen classes are masked."""

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(embed_dim, num_classes)

    def forward(self, feature, active: int | None = None, start: int = 0):
        logits = self.fc(feature)
        if active is not None or start:
            mask = torch.zeros(logits.shape[-1], dtype=torch.bool)
            mask[:start] = True
            if active is not None:
                mask[active:] = True
            logits = logits.masked_fill(mask, float("-inf"))
        return logits


class INCPrompt(nn.Module):
    """Frozen backbone + one (key learner, prompter) pair per task + shared head."""

    def __init__(self, backbone_cfg: BackboneConfig, schedule: PromptSchedule,
                 key_cfg: KeyLossConfig, num_classes: int, train_cfg: TrainConfig | None = None):
        super().__init__()
        schedule.validate(backbone_cfg)
        self.train_cfg = train_cfg or TrainConfig()
        if self.train_cfg.key_dim not in (None, backbone_cfg.embed_dim):
            # keys are compared against the pooled backbone feature
            raise ConfigError(
                f"key_dim must equal embed_dim ({backbone_cfg.embed_dim}), got {self.train_cfg.key_dim}"
            )
        self.schedule = schedule
        self.key_cfg = key_cfg
        self.backbone = VisionTransformer(backbone_cfg)
        self.learners = nn.ModuleList()
        self.prompters = nn.ModuleList()
        self.head = ClassifierHead(backbone_cfg.embed_dim, num_classes)
        self.to(self.train_cfg.torch_dtype)
        self.loss_history: list[float] = []

    @property
    def num_tasks(self) -> int:
        return len(self.learners)

    def add_task(self) -> tuple[KeyLearner, TaskPrompter]:
        cfg = self.train_cfg
        d = self.backbone.cfg.embed_dim
        task_id = self.num_tasks
        learner = KeyLearner(task_id, d, cfg.key_dim, pool=cfg.key_pool)
        prompter = TaskPrompter(task_id, d, self.schedule, cfg.prompter_hidden, cfg.activation)
        learner.to(cfg.torch_dtype)
        prompter.to(cfg.torch_dtype)
        self.learners.append(learner)
        self.prompters.append(prompter)
        return learner, prompter

    def prompt_free(self, images):
        """``(embedded tokens, final prompt-free tokens)``; never tracks gradients."""
        with torch.no_grad():
            emb = self.backbone.patch_embed(images.to(self.train_cfg.torch_dtype))
            free = self.backbone.encode(emb)
        return emb.tokens, free.tokens

    def classify(self, emb, P=None, active=None, start=0):
        prompts = prompts_by_layer(P, self.schedule) if P is not None and self.schedule.active_layers else None
        out = self.backbone.encode(TokenBatch(emb), prompts, self.schedule if prompts else None)
        return self.head(pooled_feature(out, self.train_cfg.classifier_pool), active, start)

    def batch_losses(self, emb, free, labels, task_id: int, *, start: int = 0, active: int | None = None):
        """Per-batch ``(task_loss, key_loss)`` for the training branch."""
        cfg = self.train_cfg
        learner, prompter = self.learners[task_id], self.prompters[task_id]
        feature = pooled_feature(free, cfg.key_pool)
        K_a = learner(free)
        try:
            K_n = mine_negative(task_id, free, self.learners[:task_id], kind=cfg.similarity, feature=feature)
        except NoNegativeAvailable:
            # A fresh learner's value projection is zero, so the zero key is
            # what "a different key learner" produces before it has trained.
            K_n = torch.zeros_like(K_a) if cfg.first_task_negative == "null" else None
        key_l = key_loss(feature, K_a, K_n, self.key_cfg)
        P = prompter(feature)
        logits = self.classify(emb, P, active, start)
        task_l = task_loss(logits, labels, "sum")
        if cfg.reduction == "mean":
            task_l, key_l = task_l / len(labels), key_l / len(labels)
        return task_l, key_l

    @torch.no_grad()
    def predict(self, images, active: int, *, forced_task: int | None = None, chunk: int = 256):
        """Class predictions and selected task per image.

        The task comes from key matching unless ``forced_task`` is given
        (oracle mode, for comparison only).
        """
        preds, selected = [], []
        for i in range(0, len(images), chunk):
            emb, free = self.prompt_free(images[i : i + chunk])
            feature = pooled_feature(free, self.train_cfg.key_pool)
            if forced_task is None:
                idx = match_task(free, list(self.learners), kind=self.train_cfg.similarity, feature=feature)
            else:
                idx = torch.full((len(free),), forced_task, dtype=torch.long)
            P_all = torch.stack([p(feature) for p in self.prompters])
            P = P_all[idx, torch.arange(len(free))]
            logits = self.classify(emb, P, active)
            preds.append(logits.argmax(-1))
            selected.append(idx)
        return torch.cat(preds), torch.cat(selected)


def _batches(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train_task(state: INCPrompt, stream: TaskStream, cursor: StreamCursor, task_id: int,
               generator: torch.Generator) -> INCPrompt:
    """Train task ``task_id``; everything from earlier tasks stays frozen."""
    if task_id != state.num_tasks or task_id != cursor.current:
        raise ProtocolError(
            f"task {task_id} out of order: model has {state.num_tasks} tasks, stream is at {cursor.current}"
        )
    cfg = state.train_cfg
    x, y = cursor.train_data(task_id)
    for module in (*state.learners, *state.prompters):
        module.requires_grad_(False)
    learner, prompter = state.add_task()
    classes = stream.classes(task_id)
    start = classes[0] if cfg.mask_old_classes else 0
    active = stream.seen_classes(task_id)
    emb, free = state.prompt_free(x)
    params = [*learner.parameters(), *prompter.parameters(), *state.head.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    for _ in range(cfg.epochs):
        for b in _batches(len(y), cfg.batch_size, generator):
            task_l, key_l = state.batch_losses(emb[b], free[b], y[b], task_id, start=start, active=active)
            loss = total_loss(task_l, key_l)
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.loss_history.append(loss.item())
    for module in (learner, prompter):
        module.requires_grad_(False)
    del x, y, emb, free
    cursor.finish(task_id)
    return state


class EvalRow(NamedTuple):
    accuracies: np.ndarray  # [upto + 1]
    selections: np.ndarray  # [upto + 1, num_tasks] counts of (true task, selected task)


def evaluate(state, stream: TaskStream, upto: int, *, oracle: bool = False) -> EvalRow:
    """Accuracy on the test set of every task ``0..upto`` without task ids."""
    active = stream.seen_classes(upto)
    acc = np.zeros(upto + 1)
    hist = np.zeros((upto + 1, stream.num_tasks), dtype=np.int64)
    for j in range(upto + 1):
        x, y = stream.test_split(j)
        if isinstance(state, INCPrompt):
            pred, sel = state.predict(x, active, forced_task=j if oracle else None)
            hist[j] = np.bincount(sel.numpy(), minlength=stream.num_tasks)
        else:
            pred = state.predict(x, active)
        acc[j] = (pred == y).double().mean().item()
    return EvalRow(acc, hist)


class ContinualMetrics(NamedTuple):
    avg_acc: float
    forgetting: float
    forgetting_defined: bool


def compute_metrics(acc_matrix) -> ContinualMetrics:
    """Average final accuracy and mean drop from each task's best accuracy.

    ``acc_matrix[t, j]`` is accuracy on task ``j`` after training task ``t``
    (only ``j <= t`` is read). With a single task forgetting is reported as 0
    and flagged undefined.
    """
    a = np.asarray(acc_matrix, dtype=float)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] < n:
        raise ConfigError(f"accuracy matrix must be [N, N], got {a.shape}")
    final = a[n - 1, :n]
    avg = float(final.mean())
    if n < 2:
        return ContinualMetrics(avg, 0.0, False)
    drops = [np.max(a[j:, j]) - a[n - 1, j] for j in range(n - 1)]
    return ContinualMetrics(avg, float(np.mean(drops)), True)


@dataclass
class ContinualReport:
    method: str
    seed: int
    acc_matrix: np.ndarray
    avg_acc: float
    forgetting: float | None
    forgetting_defined: bool
    selection_histogram: np.ndarray | None = None
    prompt_length: int = 0
    prompt_depth: int = 0
    oracle_acc_matrix: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def run_incprompt(stream: TaskStream, backbone_cfg: BackboneConfig, schedule: PromptSchedule,
                  key_cfg: KeyLossConfig, train_cfg: TrainConfig, seed: int,
                  *, oracle_eval: bool = False) -> tuple[INCPrompt, ContinualReport]:
    torch.manual_seed(seed)
    state = INCPrompt(backbone_cfg, schedule, key_cfg, stream.num_classes, train_cfg)
    gen = torch.Generator().manual_seed(seed)
    n = stream.num_tasks
    acc = np.full((n, n), np.nan)
    oracle_acc = np.full((n, n), np.nan) if oracle_eval else None
    hist = None
    cursor = stream.cursor()
    for t in range(n):
        train_task(state, stream, cursor, t, gen)
        row = evaluate(state, stream, t)
        acc[t, : t + 1] = row.accuracies
        hist = row.selections
        if oracle_eval:
            oracle_acc[t, : t + 1] = evaluate(state, stream, t, oracle=True).accuracies
        log.info("incprompt seed=%d task=%d acc=%s", seed, t, np.round(row.accuracies, 4))
    m = compute_metrics(acc)
    report = ContinualReport("incprompt", seed, acc, m.avg_acc, m.forgetting, m.forgetting_defined,
                             hist, schedule.prompt_length, len(schedule.active_layers), oracle_acc)
    return state, report


class SequentialClassifier(nn.Module):
    """Backbone + shared head, no prompts or keys; used by the reference baselines."""

    def __init__(self, backbone_cfg: BackboneConfig, num_classes: int, train_cfg: TrainConfig):
        super().__init__()
        self.train_cfg = train_cfg
        self.backbone = VisionTransformer(backbone_cfg)
        self.head = ClassifierHead(backbone_cfg.embed_dim, num_classes)
        self.to(train_cfg.torch_dtype)

    def logits(self, images, active=None):
        out = self.backbone(images.to(self.train_cfg.torch_dtype))
        return self.head(pooled_feature(out, self.train_cfg.classifier_pool), active)

    @torch.no_grad()
    def predict(self, images, active: int, chunk: int = 256):
        return torch.cat([self.logits(images[i : i + chunk], active).argmax(-1)
                          for i in range(0, len(images), chunk)])


def _fit(model: SequentialClassifier, x, y, active, generator, *, tune_backbone: bool):
    cfg = model.train_cfg
    if tune_backbone:
        model.backbone.requires_grad_(True)
        model.backbone.train()
        params = list(model.parameters())
    else:
        params = list(model.head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    for _ in range(cfg.epochs):
        for b in _batches(len(y), cfg.batch_size, generator):
            loss = task_loss(model.logits(x[b], active), y[b], cfg.reduction)
            opt.zero_grad()
            loss.backward()
            opt.step()
    if tune_backbone:
        model.backbone.freeze()


def run_baseline(stream: TaskStream, mode: str, backbone_cfg: BackboneConfig,
                 train_cfg: TrainConfig, seed: int) -> ContinualReport:
    """Sequential fine-tuning (``ftseq``) or joint training on all tasks (``upper_bound``)."""
    torch.manual_seed(seed)
    model = SequentialClassifier(backbone_cfg, stream.num_classes, train_cfg)
    gen = torch.Generator().manual_seed(seed)
    n = stream.num_tasks
    acc = np.full((n, n), np.nan)
    if mode == "ftseq":
        cursor = stream.cursor()
        for t in range(n):
            x, y = cursor.train_data(t)
            _fit(model, x, y, stream.seen_classes(t), gen, tune_backbone=train_cfg.ftseq_backbone)
            cursor.finish(t)
            acc[t, : t + 1] = evaluate(model, stream, t).accuracies
        m = compute_metrics(acc)
        return ContinualReport("ftseq", seed, acc, m.avg_acc, m.forgetting, m.forgetting_defined)
    if mode == "upper_bound":
        x, y = stream.joint_train()
        _fit(model, x, y, stream.num_classes, gen, tune_backbone=train_cfg.ftseq_backbone)
        acc[n - 1] = evaluate(model, stream, n - 1).accuracies
        return ContinualReport("upper_bound", seed, acc, float(acc[n - 1].mean()), None, False)
    raise ConfigError(f"unknown baseline mode {mode!r}")


# --- checkpoints and CSV output -------------------------------------------

def save_checkpoint(path, state: INCPrompt, config: dict, seed: int) -> None:
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "config": config,
        "backbone_config": asdict(state.backbone.cfg),
        "schedule": {"layers": list(state.schedule.layers), "prompt_length": state.schedule.prompt_length},
        "key_config": asdict(state.key_cfg),
        "train_config": asdict(state.train_cfg),
        "num_classes": state.head.fc.out_features,
        "num_tasks": state.num_tasks,
        "state_dict": state.state_dict(),
    }
    torch.save(blob, path)


def load_checkpoint(path) -> tuple[INCPrompt, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not an INCPrompt checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {blob.get('version')}")
    state = INCPrompt(BackboneConfig(**blob["backbone_config"]),
                      PromptSchedule(tuple(blob["schedule"]["layers"]), blob["schedule"]["prompt_length"]),
                      KeyLossConfig(**blob["key_config"]), blob["num_classes"],
                      TrainConfig(**blob["train_config"]))
    for _ in range(blob["num_tasks"]):
        state.add_task()
    state.load_state_dict(blob["state_dict"])
    state.requires_grad_(False)
    return state, blob


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "NA"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_task_csv(path, reports: Sequence[ContinualReport]) -> None:
    """Rows ``task_trained,task_evaluated,accuracy,selected_task_mode`` for every filled matrix entry."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TASK_CSV_HEADER)
        for r in reports:
            mode = {"incprompt": "matched"}.get(r.method, r.method)
            matrices = [(r.acc_matrix, mode)]
            if r.oracle_acc_matrix is not None:
                matrices.append((r.oracle_acc_matrix, "oracle"))
            for mat, label in matrices:
                n = mat.shape[0]
                for t in range(n):
                    for j in range(t + 1):
                        if not math.isnan(mat[t, j]):
                            w.writerow([t, j, _fmt(float(mat[t, j])), label])


def write_summary_csv(path, reports: Sequence[ContinualReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_CSV_HEADER)
        for r in reports:
            w.writerow([r.seed, r.method, _fmt(r.avg_acc),
                        _fmt(r.forgetting if r.forgetting_defined else None),
                        r.prompt_length, r.prompt_depth])


def write_histogram_csv(path, histogram: np.ndarray) -> None:
    """Counts of (true task, selected prompter) as ``true_task,selected_task,count``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("true_task", "selected_task", "count"))
        for i in range(histogram.shape[0]):
            for j in range(histogram.shape[1]):
                w.writerow([i, j, int(histogram[i, j])])
