"""Equivariant graph transformer over peak clouds and heavy-atom structures.

Every node carries invariant scalar channels ``x`` (n, F) and equivariant vector
channels ``vec`` (n, 3, F).  A layer computes per-head softmax attention over a
centre's incoming edges from ``q_i . (k_j * (1 + W_k rbf_ij))``, aggregates
value messages that mix neighbour scalars with neighbour vectors and the edge
unit vector, then updates ``x`` through invariant vector dot products and
``vec`` through scalar gating.  Only displacements enter, so the logits are
invariant to rigid motions of the input.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .elements import ELEMENT_CLASSES, NUM_ELEMENT_CLASSES, NUM_H_CLASSES
from .graph import DEFAULT_CUTOFF, NeighborGraph, build_cutoff_graph
from .peaks import PeakCloud, normalize_heights

IGNORE = -100
FEATURE_MODES = ("height", "onehot")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ETConfig:
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 8
    num_rbf: int = 32
    cutoff: float = DEFAULT_CUTOFF
    num_classes: int = NUM_ELEMENT_CLASSES
    feature_mode: str = "height"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.hidden_dim <= 0 or self.num_heads <= 0 or self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.num_layers < 0 or self.num_rbf < 1:
            raise ConfigError("num_layers must be >= 0 and num_rbf >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not self.cutoff > 0:
            raise ConfigError("cutoff must be positive")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}")

    @property
    def in_dim(self) -> int:
        return 1 if self.feature_mode == "height" else NUM_ELEMENT_CLASSES

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ETConfig":
        try:
            return cls(**json.loads(text))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def cosine_cutoff(d, cutoff: float):
    """0.5 (cos(pi d / cutoff) + 1) inside the cutoff, 0 outside."""
    if isinstance(d, torch.Tensor):
        return torch.where(d <= cutoff, 0.5 * (torch.cos(math.pi * d / cutoff) + 1.0), torch.zeros_like(d))
    d = np.asarray(d, dtype=float)
    return np.where(d <= cutoff, 0.5 * (np.cos(np.pi * d / cutoff) + 1.0), 0.0)


def rbf_params(cutoff: float, num_rbf: int) -> tuple[np.ndarray, np.ndarray]:
    start = math.exp(-cutoff)
    means = np.linspace(start, 1.0, num_rbf)
    betas = np.full(num_rbf, (2.0 / num_rbf * (1.0 - start)) ** -2)
    return means, betas


def rbf_expand(d, cutoff: float, num_rbf: int):
    """Exponential-normal radial basis times the cosine cutoff; ``d`` in Å."""
    means, betas = rbf_params(cutoff, num_rbf)
    if isinstance(d, torch.Tensor):
        if torch.any(d <= 0):
            raise ValueError("distances must be positive")
        mu = torch.as_tensor(means, dtype=d.dtype)
        beta = torch.as_tensor(betas, dtype=d.dtype)
        phi = torch.exp(-beta * (torch.exp(-d)[..., None] - mu) ** 2)
        return phi * cosine_cutoff(d, cutoff)[..., None]
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distances must be positive")
    phi = np.exp(-betas * (np.exp(-d)[..., None] - means) ** 2)
    return phi * cosine_cutoff(d, cutoff)[..., None]


def _padded(fn, x: torch.Tensor) -> torch.Tensor:
    """Apply an elementwise ``fn`` with the element count padded to a multiple of 64.

    torch's CPU kernels evaluate the ragged tail of a tensor with a scalar code
    path that can differ from the vectorised one in the last bit; padding keeps
    every real element on the vectorised path, so reordering rows reorders the
    output exactly.
    """
    n = x.numel()
    pad = (-n) % 64
    if pad == 0:
        return fn(x)
    flat = torch.cat([x.reshape(-1), x.new_zeros(pad)])
    return fn(flat)[:n].view_as(x)


class SiLU(nn.Module):
    def forward(self, x):
        return _padded(F.silu, x)


# --------------------------------------------------------------------------
# batching


@dataclass
class GraphBatch:
    features: torch.Tensor
    src: torch.Tensor
    dst: torch.Tensor
    disp: torch.Tensor
    is_aux: torch.Tensor
    graph_index: torch.Tensor
    offsets: list[int] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]


def collate(graphs: Sequence[NeighborGraph], dtype=torch.float64) -> GraphBatch:
    feats, src, dst, disp, aux, gidx, offsets = [], [], [], [], [], [], []
    off = 0
    for gi, g in enumerate(graphs):
        offsets.append(off)
        feats.append(g.features)
        src.append(g.src + off)
        dst.append(g.dst + off)
        disp.append(g.disp)
        aux.append(g.is_aux)
        gidx.append(np.full(g.n_nodes, gi))
        off += g.n_nodes
    return GraphBatch(
        features=torch.as_tensor(np.concatenate(feats), dtype=dtype),
        src=torch.as_tensor(np.concatenate(src), dtype=torch.long),
        dst=torch.as_tensor(np.concatenate(dst), dtype=torch.long),
        disp=torch.as_tensor(np.concatenate(disp).reshape(-1, 3), dtype=dtype),
        is_aux=torch.as_tensor(np.concatenate(aux), dtype=torch.bool),
        graph_index=torch.as_tensor(np.concatenate(gidx), dtype=torch.long),
        offsets=offsets,
    )


def _segment_softmax(logits: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax of (E, H) logits over edges sharing ``index``."""
    h = logits.shape[1]
    idx = index[:, None].expand(-1, h)
    top = torch.full((n, h), -torch.inf, dtype=logits.dtype).scatter_reduce(0, idx, logits, "amax")
    ex = _padded(torch.exp, logits - top.detach()[index])
    den = torch.zeros((n, h), dtype=logits.dtype).index_add_(0, index, ex)
    return ex / den[index]


# --------------------------------------------------------------------------
# layers


class AttentionLayer(nn.Module):
    def __init__(self, hidden: int, heads: int, num_rbf: int):
        super().__init__()
        self.hidden, self.heads = hidden, heads
        self.head_dim = hidden // heads
        self.norm = nn.LayerNorm(hidden)
        self.q_proj = nn.Linear(hidden, hidden)
        self.k_proj = nn.Linear(hidden, hidden)
        self.v_proj = nn.Linear(hidden, 3 * hidden)
        self.vec_proj = nn.Linear(hidden, 3 * hidden, bias=False)
        self.dk_proj = nn.Linear(num_rbf, hidden)
        self.dv_proj = nn.Linear(num_rbf, 3 * hidden)
        self.o_proj = nn.Linear(hidden, 3 * hidden)

    def forward(self, x, vec, src, dst, rbf, cut, unit):
        n, H, D, Fh = x.shape[0], self.heads, self.head_dim, self.hidden
        xn = self.norm(x)
        q = self.q_proj(xn).view(n, H, D)
        k = self.k_proj(xn).view(n, H, D)
        v = self.v_proj(xn).view(n, H, 3 * D)
        vec1, vec2, vec3 = torch.split(self.vec_proj(vec), Fh, dim=-1)
        vec_dot = (vec1 * vec2).sum(dim=1)

        dk = self.dk_proj(rbf).view(-1, H, D)
        logits = (q[src] * k[dst] * (1.0 + dk)).sum(-1) / math.sqrt(D)
        attn = _segment_softmax(logits, src, n)

        dv = _padded(F.silu, self.dv_proj(rbf)).view(-1, H, 3 * D) * cut[:, None, None]
        vx, s1, s2 = torch.split(v[dst] * dv, D, dim=-1)
        a = attn[..., None]
        msg_x = (vx * a).reshape(-1, Fh)
        s1 = (s1 * a).reshape(-1, 1, Fh)
        s2 = (s2 * a).reshape(-1, 1, Fh)
        msg_vec = vec[dst] * s1 + unit[:, :, None] * s2

        agg_x = torch.zeros((n, Fh), dtype=x.dtype).index_add_(0, src, msg_x)
        agg_vec = torch.zeros((n, 3, Fh), dtype=x.dtype).index_add_(0, src, msg_vec)

        o1, o2, o3 = torch.split(self.o_proj(agg_x), Fh, dim=-1)
        dx = vec_dot * o2 + o3
        dvec = vec3 * o1[:, None, :] + agg_vec
        return x + dx, vec + dvec, attn


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (n_nodes, C)
    embeddings: torch.Tensor  # (n_nodes, F)
    attention: list[torch.Tensor]  # per layer (n_edges, H)
    vectors: torch.Tensor  # (n_nodes, 3, F)
    batch: GraphBatch | None = None

    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)


class ETModel(nn.Module):
    def __init__(self, config: ETConfig = ETConfig(), seed: int = 0, dtype=torch.float64):
        super().__init__()
        config.validate()
        self.config = config
        Fh, K, din = config.hidden_dim, config.num_rbf, config.in_dim
        self.embedding = nn.Sequential(nn.Linear(din, Fh), SiLU(), nn.Linear(Fh, Fh))
        self.nbr_embedding = nn.Linear(din, Fh)
        self.nbr_filter = nn.Linear(K, Fh)
        self.nbr_combine = nn.Linear(2 * Fh, Fh)
        self.layers = nn.ModuleList(AttentionLayer(Fh, config.num_heads, K) for _ in range(config.num_layers))
        self.out_norm = nn.LayerNorm(Fh)
        self.head = nn.Sequential(nn.Linear(Fh, Fh // 2 or 1), SiLU(), nn.Linear(Fh // 2 or 1, config.num_classes))
        self.reset_parameters(seed)
        self.to(dtype)

    def reset_parameters(self, seed: int = 0):
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                    continue
                mod = self.get_submodule(name.rsplit(".", 1)[0])
                bound = 1.0 / math.sqrt(mod.in_features)
                p.copy_(torch.empty(p.shape, dtype=torch.float64).uniform_(-bound, bound, generator=gen))

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def forward(self, batch: GraphBatch | NeighborGraph | Sequence[NeighborGraph]) -> ForwardOutput:
        if isinstance(batch, NeighborGraph):
            batch = collate([batch], self.dtype)
        elif not isinstance(batch, GraphBatch):
            batch = collate(list(batch), self.dtype)
        cfg = self.config
        feats = batch.features.to(self.dtype)
        if feats.shape[1] != cfg.in_dim:
            raise ValueError(f"node features have width {feats.shape[1]}, model expects {cfg.in_dim} ({cfg.feature_mode})")
        src, dst = batch.src, batch.dst
        disp = batch.disp.to(self.dtype)
        n = feats.shape[0]
        dist = torch.linalg.norm(disp, dim=-1)
        if dist.numel():
            rbf = rbf_expand(dist, cfg.cutoff, cfg.num_rbf)
            unit = disp / dist[:, None]
        else:
            rbf = torch.zeros((0, cfg.num_rbf), dtype=self.dtype)
            unit = torch.zeros((0, 3), dtype=self.dtype)
        cut = cosine_cutoff(dist, cfg.cutoff)

        x = self.embedding(feats)
        nbr = self.nbr_filter(rbf) * cut[:, None] * self.nbr_embedding(feats)[dst]
        nbr_sum = torch.zeros_like(x).index_add_(0, src, nbr)
        x = self.nbr_combine(torch.cat([x, nbr_sum], dim=-1))
        vec = torch.zeros((n, 3, cfg.hidden_dim), dtype=self.dtype)

        attention = []
        for layer in self.layers:
            x, vec, attn = layer(x, vec, src, dst, rbf, cut, unit)
            attention.append(attn)
        emb = self.out_norm(x)
        return ForwardOutput(self.head(emb), emb, attention, vec, batch)


# --------------------------------------------------------------------------
# training objective


def node_labels(graph: NeighborGraph, labels) -> np.ndarray:
    """Per-node label array with auxiliary nodes set to ``IGNORE``."""
    lab = np.full(graph.n_nodes, IGNORE, dtype=np.int64)
    real = np.flatnonzero(~graph.is_aux)
    lab[real] = np.asarray(labels, dtype=np.int64)[graph.origin[real]]
    return lab


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, class_weights=None) -> torch.Tensor:
    mask = labels != IGNORE
    if not bool(mask.any()):
        raise ValueError("no labelled (non-ignored) node in batch")
    w = None if class_weights is None else torch.as_tensor(class_weights, dtype=logits.dtype)
    return F.cross_entropy(logits[mask], labels[mask], weight=w)


def loss_and_grad(model: ETModel, graph, labels, class_weights=None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over labelled nodes and its gradient for every parameter."""
    batch = graph if isinstance(graph, GraphBatch) else collate([graph] if isinstance(graph, NeighborGraph) else list(graph), model.dtype)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    model.zero_grad(set_to_none=True)
    loss = cross_entropy(model(batch).logits, y, class_weights)
    loss.backward()
    grads = {
        name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


# --------------------------------------------------------------------------
# inference


def ranked_classes(probs: np.ndarray) -> np.ndarray:
    """Class indices by descending probability; equal probabilities keep ascending index order."""
    return np.argsort(-np.asarray(probs), axis=-1, kind="stable")


@dataclass
class ElementPrediction:
    elements: list[str]
    probs: np.ndarray  # (n_peaks, n_classes)
    embeddings: np.ndarray
    graph: NeighborGraph | None = None
    attention: list[np.ndarray] | None = None

    def top(self, k: int = 2) -> list[list[tuple[str, float]]]:
        order = ranked_classes(self.probs)[:, :k]
        return [[(ELEMENT_CLASSES[c], float(p[c])) for c in row] for row, p in zip(order, self.probs)]


def cloud_graph(cloud: PeakCloud, cutoff: float, cell=None, symops=None) -> NeighborGraph:
    cell = cell or cloud.cell
    if cell is None:
        raise ValueError("peak cloud has no unit cell")
    return build_cutoff_graph(
        cloud.frac, cell, symops or cloud.symops, cutoff, include_symmetry=False,
        features=normalize_heights(cloud)[:, None],
    )


def predict_elements(model: ETModel, cloud: PeakCloud, cell=None, symops=None, single_precision: bool = False) -> ElementPrediction:
    if len(cloud) == 0:
        raise ValueError("empty peak cloud")
    if model.config.feature_mode != "height":
        raise ConfigError("element prediction needs a model in 'height' feature mode")
    graph = cloud_graph(cloud, model.config.cutoff, cell, symops)
    run = model
    dtype = torch.float64
    if single_precision:
        import copy

        run = copy.deepcopy(model).to(torch.float32)
        dtype = torch.float32
    with torch.no_grad():
        out = run(collate([graph], dtype))
    probs = out.probabilities().double().numpy()
    top = ranked_classes(probs)[:, 0]
    return ElementPrediction(
        [ELEMENT_CLASSES[c] for c in top], probs, out.embeddings.double().numpy(), graph,
        [a.double().numpy() for a in out.attention],
    )


def second_choice_correction(probs, k: int, assignment: Sequence[str] | None = None) -> list[str]:
    """Swap peak ``k`` to its second most probable class, leaving the others unchanged."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    if probs.shape[1] < 2:
        raise ValueError("need at least two classes")
    order = ranked_classes(probs)
    names = ELEMENT_CLASSES if probs.shape[1] == NUM_ELEMENT_CLASSES else [str(i) for i in range(probs.shape[1])]
    out = list(assignment) if assignment is not None else [names[r[0]] for r in order]
    out[k] = names[order[k, 1]]
    return out


def h_model_config(**kw) -> ETConfig:
    kw.setdefault("num_classes", NUM_H_CLASSES)
    kw.setdefault("feature_mode", "onehot")
    return ETConfig(**kw)
