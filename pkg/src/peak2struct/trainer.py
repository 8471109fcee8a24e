"""Training loop, k-fold splitting and classification metrics."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .elements import CLASS_INDEX, ELEMENT_CLASSES, NUM_ELEMENT_CLASSES
from .graph import NeighborGraph
from .model import IGNORE, ETModel, cloud_graph, collate, cross_entropy, node_labels, ranked_classes

MAX_WEIGHT_RATIO = 100.0


class TrainingDivergedError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-5
    seed: int = 0
    k: int = 10
    patience: int = 10
    class_weighting: bool = True
    schedule: str = "constant"  # or "cosine"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key = value")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"line {n}: unknown key {key!r}")
            kind = str(kinds[key])
            try:
                if key == "betas":
                    kw[key] = tuple(float(x) for x in val.split(","))
                elif "bool" in kind:
                    if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(val)
                    kw[key] = val.lower() in ("true", "1", "yes")
                elif "int" in kind:
                    kw[key] = int(val)
                elif "float" in kind:
                    kw[key] = float(val)
                else:
                    kw[key] = val
            except ValueError:
                raise ValueError(f"line {n}: bad value {val!r} for {key}") from None
        return cls(**kw)


# --------------------------------------------------------------------------
# data


@dataclass
class LabeledGraph:
    graph: NeighborGraph
    labels: np.ndarray  # class index per input point (real node)
    structure_id: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.graph.n_real:
            raise ValueError(f"{len(self.labels)} labels for {self.graph.n_real} real nodes")

    @property
    def node_labels(self) -> np.ndarray:
        return node_labels(self.graph, self.labels)


def element_examples(clouds, cutoff: float = 5.0) -> list[LabeledGraph]:
    """Graphs from labelled peak clouds (normalised height features)."""
    return [LabeledGraph(cloud_graph(lc.cloud, cutoff), lc.class_indices, lc.structure_id) for lc in clouds]


def hcount_examples(crystals, cutoff: float = 5.0, include_symmetry: bool = True, aux_radius: float = 3.2) -> list[LabeledGraph]:
    """Graphs from heavy-atom structures with per-site H counts (objects with ``structure`` and ``h_counts``)."""
    from .hydrogens import structure_graph

    out = []
    for x in crystals:
        g = structure_graph(x.structure, cutoff, include_symmetry, aux_radius)
        out.append(LabeledGraph(g, x.h_counts, x.structure.name))
    return out


def kfold_split(ids: Sequence, k: int, seed: int = 0) -> list[list]:
    """Seeded partition of ``ids`` into ``k`` folds whose sizes differ by at most one."""
    ids = list(ids)
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(ids) < k:
        raise ValueError(f"cannot split {len(ids)} items into {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [[ids[i] for i in part] for part in np.array_split(perm, k)]


def class_weights(data: Sequence[LabeledGraph], num_classes: int) -> np.ndarray:
    """Inverse-frequency weights, capped at ``MAX_WEIGHT_RATIO`` times the smallest weight."""
    counts = np.zeros(num_classes)
    for ex in data:
        counts += np.bincount(ex.labels, minlength=num_classes)[:num_classes]
    present = counts > 0
    w = np.zeros(num_classes)
    w[present] = counts.sum() / (present.sum() * counts[present])
    w_min = w[present].min()
    w = np.minimum(w, MAX_WEIGHT_RATIO * w_min)
    w[~present] = MAX_WEIGHT_RATIO * w_min
    return w


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: ETModel
    history: list[float]  # mean training loss per epoch
    val_history: list[float] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0


def _batches(data, order, size):
    for b in range(0, len(order), size):
        part = [data[i] for i in order[b : b + size]]
        yield part


def _batch_loss(model, part, weights):
    batch = collate([ex.graph for ex in part], model.dtype)
    y = torch.as_tensor(np.concatenate([ex.node_labels for ex in part]))
    out = model(batch)
    return cross_entropy(out.logits, y, weights), int((y != IGNORE).sum())


def mean_loss(model: ETModel, data: Sequence[LabeledGraph], batch_size: int = 16, weights=None) -> float:
    total, n = 0.0, 0
    with torch.no_grad():
        for part in _batches(data, np.arange(len(data)), batch_size):
            loss, m = _batch_loss(model, part, weights)
            total += float(loss) * m
            n += m
    return total / max(n, 1)


def train(
    model: ETModel,
    data: Sequence[LabeledGraph],
    cfg: TrainConfig = TrainConfig(),
    val: Sequence[LabeledGraph] | None = None,
    log: Callable[[str], None] | None = None,
    resample: Callable[[int], Sequence[LabeledGraph]] | None = None,
) -> TrainResult:
    """AdamW over seeded shuffles of structure batches; with ``val`` the best-validation parameters are returned.

    ``resample(epoch)``, when given, supplies fresh examples for every epoch after
    the first (for instance new noise draws over the same structures).
    """
    if not data:
        raise ValueError("no training data")
    C = model.config.num_classes
    for ex in data:
        if ex.labels.size and (ex.labels.min() < 0 or ex.labels.max() >= C):
            raise ValueError(f"{ex.structure_id}: label outside 0..{C - 1}")
    t0 = time.perf_counter()
    weights = torch.as_tensor(class_weights(data, C), dtype=model.dtype) if cfg.class_weighting else None
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)
    history, val_history = [], []
    best, best_state, best_epoch, stale = math.inf, None, -1, 0
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        if resample is not None and epoch > 0:
            data = resample(epoch)
        total, n = 0.0, 0
        for part in _batches(data, rng.permutation(len(data)), cfg.batch_size):
            if cfg.schedule == "cosine":
                for g in opt.param_groups:
                    g["lr"] = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            opt.zero_grad(set_to_none=True)
            loss, m = _batch_loss(model, part, weights)
            if not torch.isfinite(loss):
                ids = ", ".join(ex.structure_id for ex in part)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch + 1}, step {step + 1} (structures: {ids})")
            loss.backward()
            opt.step()
            step += 1
            total += float(loss.detach()) * m
            n += m
        history.append(total / max(n, 1))
        msg = f"epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.5f}"
        model.eval()
        if val:
            v = mean_loss(model, val, cfg.batch_size, weights)
            val_history.append(v)
            msg += f" val {v:.5f}"
            if v < best:
                best, best_state, best_epoch, stale = v, copy.deepcopy(model.state_dict()), epoch, 0
            else:
                stale += 1
        if log:
            log(msg)
        if val and stale >= cfg.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = len(history) - 1
    return TrainResult(model, history, val_history, best_epoch, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# evaluation


def auc_rank(scores, positive) -> float:
    """One-vs-rest AUC by the Mann-Whitney rank statistic (ties get average ranks); nan if a class is empty."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class Predictions:
    probs: np.ndarray  # (n_peaks, C)
    labels: np.ndarray  # (n_peaks,)
    structure: np.ndarray  # (n_peaks,) index of the owning structure

    @property
    def predicted(self) -> np.ndarray:
        return ranked_classes(self.probs)[:, 0]


def predict(model: ETModel, data: Sequence[LabeledGraph], batch_size: int = 16) -> Predictions:
    probs, labels, owner = [], [], []
    model.eval()
    with torch.no_grad():
        for b in range(0, len(data), batch_size):
            part = data[b : b + batch_size]
            batch = collate([ex.graph for ex in part], model.dtype)
            p = model(batch).probabilities().double().numpy()
            for j, ex in enumerate(part):
                real = batch.offsets[j] + np.flatnonzero(~ex.graph.is_aux)
                probs.append(p[real])
                labels.append(ex.labels)
                owner.append(np.full(len(real), b + j))
    C = model.config.num_classes
    return Predictions(
        np.concatenate(probs) if probs else np.zeros((0, C)),
        np.concatenate(labels) if labels else np.zeros(0, dtype=int),
        np.concatenate(owner) if owner else np.zeros(0, dtype=int),
    )


@dataclass
class EvalReport:
    class_names: list[str]
    confusion: np.ndarray  # rows true, columns predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    auc: np.ndarray
    micro_accuracy: float
    unit_cell_accuracy: float
    n_structures: int

    def active(self) -> list[int]:
        """Classes that occur as a label or a prediction."""
        return [c for c in range(len(self.class_names)) if self.support[c] or self.confusion[:, c].sum()]

    def to_table(self) -> str:
        rows = [f"{'class':<8}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}{'auc':>9}"]
        for c in self.active():
            auc = "-" if math.isnan(self.auc[c]) else f"{self.auc[c]:.4f}"
            rows.append(
                f"{self.class_names[c]:<8}{self.precision[c]:>10.4f}{self.recall[c]:>10.4f}"
                f"{self.f1[c]:>10.4f}{int(self.support[c]):>9d}{auc:>9}"
            )
        rows.append(f"micro accuracy      {self.micro_accuracy:.4f}")
        rows.append(f"unit-cell accuracy  {self.unit_cell_accuracy:.4f}  ({self.n_structures} structures)")
        return "\n".join(rows) + "\n"

    def to_json(self) -> str:
        act = self.active()
        rec = {
            "micro_accuracy": self.micro_accuracy,
            "unit_cell_accuracy": self.unit_cell_accuracy,
            "n_structures": self.n_structures,
            "classes": {
                self.class_names[c]: {
                    "precision": float(self.precision[c]),
                    "recall": float(self.recall[c]),
                    "f1": float(self.f1[c]),
                    "support": int(self.support[c]),
                    "auc": None if math.isnan(self.auc[c]) else float(self.auc[c]),
                }
                for c in act
            },
            "confusion": {
                "classes": [self.class_names[c] for c in act],
                "matrix": self.confusion[np.ix_(act, act)].astype(int).tolist(),
            },
        }
        return json.dumps(rec, sort_keys=True, indent=1)


def _safe_div(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def report_from_predictions(pred: Predictions, class_names: Sequence[str] | None = None) -> EvalReport:
    C = pred.probs.shape[1]
    names = list(class_names) if class_names is not None else (
        list(ELEMENT_CLASSES) if C == NUM_ELEMENT_CLASSES else [str(c) for c in range(C)]
    )
    y, p = pred.labels.astype(int), pred.predicted
    conf = np.zeros((C, C), dtype=np.int64)
    np.add.at(conf, (y, p), 1)
    tp = np.diag(conf).astype(float)
    support = conf.sum(axis=1)
    precision = _safe_div(tp, conf.sum(axis=0))
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    auc = np.array([auc_rank(pred.probs[:, c], y == c) for c in range(C)])
    total = conf.sum()
    micro = float(np.trace(conf) / total) if total else 0.0
    structures = np.unique(pred.structure)
    correct = [bool(np.all(y[pred.structure == s] == p[pred.structure == s])) for s in structures]
    cell_acc = float(np.mean(correct)) if correct else 0.0
    return EvalReport(names, conf, precision, recall, f1, support, auc, micro, cell_acc, len(structures))


def evaluate(model: ETModel, data: Sequence[LabeledGraph], class_names=None) -> EvalReport:
    if not data:
        raise ValueError("no evaluation data")
    return report_from_predictions(predict(model, data), class_names)


def select_best_fold(reports: Sequence[EvalReport]) -> int:
    """1-based id of the fold with the highest validation micro accuracy (ties: lowest id)."""
    if not reports:
        raise ValueError("no fold reports")
    accs = [r.micro_accuracy for r in reports]
    return int(np.argmax(accs)) + 1


@dataclass
class FoldResult:
    fold: int  # 1-based
    result: TrainResult
    report: EvalReport


def cross_validate(
    make_model: Callable[[int], ETModel],
    data: Sequence[LabeledGraph],
    cfg: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> tuple[list[FoldResult], int]:
    """Train one model per fold (that fold held out for validation); returns all folds and the best fold id."""
    folds = kfold_split(range(len(data)), cfg.k, cfg.seed)
    out = []
    for f, held in enumerate(folds, 1):
        held_set = set(held)
        tr = [data[i] for i in range(len(data)) if i not in held_set]
        va = [data[i] for i in held]
        res = train(make_model(f), tr, cfg, va, log)
        out.append(FoldResult(f, res, evaluate(res.model, va)))
    return out, select_best_fold([r.report for r in out])


def element_labels(elements: Sequence[str]) -> np.ndarray:
    return np.array([CLASS_INDEX[e] for e in elements], dtype=np.int64)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
