"""Attention rollout, class-activation weighting and embedding export."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .elements import ELEMENT_CLASSES, NUM_ELEMENT_CLASSES
from .model import ETModel, collate, ranked_classes


@dataclass
class RolloutMap:
    relevance: np.ndarray  # (n,) column mass of the rollout product / n, in [0, 1]
    edge_mass: np.ndarray  # (E,) head-averaged attention summed over layers
    product: np.ndarray  # (n, n) row-stochastic
    layers: list[np.ndarray]  # per-layer (n, n) row-stochastic matrices


def layer_matrix(attn, src, dst, n_nodes: int) -> np.ndarray:
    """Dense ``(A + I)`` row-normalised; ``A[i, j]`` is the head-averaged weight centre ``i`` puts on ``j``.

    Several edges between the same pair (different images) add up.
    """
    a = np.asarray(attn, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    A = np.zeros((n_nodes, n_nodes))
    np.add.at(A, (np.asarray(src), np.asarray(dst)), a.mean(axis=1))
    if np.any(A < 0):
        raise ValueError("attention weights must be nonnegative")
    A += np.eye(n_nodes)
    return A / A.sum(axis=1, keepdims=True)


def attention_rollout(layers: Sequence, src, dst, n_nodes: int) -> RolloutMap:
    """Rollout ``R = M_L ... M_2 M_1`` of per-layer matrices ``M_l = rownorm(mean_h A_l + I)``."""
    mats = [layer_matrix(a, src, dst, n_nodes) for a in layers]
    R = np.eye(n_nodes)
    for M in mats:
        R = M @ R
    mass = np.zeros(len(np.asarray(src)))
    for a in layers:
        a = np.asarray(a, dtype=float)
        mass += a.mean(axis=1) if a.ndim == 2 else a
    rel = R.sum(axis=0) / n_nodes if n_nodes else np.zeros(0)
    return RolloutMap(rel, mass, R, mats)


def rollout_for(model: ETModel, graph) -> tuple[RolloutMap, np.ndarray]:
    """Run ``model`` on one graph; returns its rollout and node class probabilities."""
    with torch.no_grad():
        out = model(collate([graph], model.dtype))
    attn = [a.double().numpy() for a in out.attention]
    return attention_rollout(attn, graph.src, graph.dst, graph.n_nodes), out.probabilities().double().numpy()


def class_weighted_rollout(rollout: RolloutMap, probs, target: int, normalize: bool = True) -> np.ndarray:
    """Per-node activation ``relevance_i * p_i(target)``, scaled to a maximum of 1 unless ``normalize`` is off."""
    p = np.asarray(probs, dtype=float)
    if p.shape[0] != len(rollout.relevance):
        raise ValueError("probabilities and rollout cover different node counts")
    act = rollout.relevance * p[:, int(target)]
    if normalize:
        top = act.max() if act.size else 0.0
        act = act / top if top > 0 else np.zeros_like(act)
    return act


@dataclass
class EmbeddingTable:
    embeddings: np.ndarray  # (rows, hidden)
    true: list[str]
    predicted: list[str]

    def __len__(self):
        return len(self.true)

    def to_text(self, delimiter: str = "\t") -> str:
        dim = self.embeddings.shape[1]
        head = [f"e{k}" for k in range(dim)] + ["true", "predicted"]
        lines = [delimiter.join(head)]
        for v, t, p in zip(self.embeddings, self.true, self.predicted):
            lines.append(delimiter.join([repr(float(x)) for x in v] + [t, p]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, delimiter: str = "\t") -> "EmbeddingTable":
        rows = [ln.split(delimiter) for ln in text.splitlines() if ln]
        body = rows[1:]
        emb = np.array([[float(x) for x in r[:-2]] for r in body]).reshape(len(body), len(rows[0]) - 2)
        return cls(emb, [r[-2] for r in body], [r[-1] for r in body])


def export_embeddings(model: ETModel, dataset: Sequence, class_names: Sequence[str] | None = None,
                      batch_size: int = 16) -> EmbeddingTable:
    """One row per real node of every example (``.graph`` and ``.labels``), in dataset order."""
    C = model.config.num_classes
    names = list(class_names) if class_names is not None else (
        list(ELEMENT_CLASSES) if C == NUM_ELEMENT_CLASSES else [str(c) for c in range(C)]
    )
    emb, true, pred = [], [], []
    with torch.no_grad():
        for b in range(0, len(dataset), batch_size):
            part = dataset[b : b + batch_size]
            batch = collate([ex.graph for ex in part], model.dtype)
            out = model(batch)
            e = out.embeddings.double().numpy()
            top = ranked_classes(out.probabilities().double().numpy())[:, 0]
            for j, ex in enumerate(part):
                real = batch.offsets[j] + np.flatnonzero(~ex.graph.is_aux)
                emb.append(e[real])
                true += [names[int(c)] for c in ex.labels]
                pred += [names[int(c)] for c in top[real]]
    dim = model.config.hidden_dim
    return EmbeddingTable(np.concatenate(emb) if emb else np.zeros((0, dim)), true, pred)
