"""The fine-to-coarse forecaster.

Three interaction stages sit between a linear patch embedding and the
prediction heads:

* token level: a bipartite patch/token graph built from thresholded cosine
  similarities, refreshed by one synchronous GraphSAGE round;
* feature level: multi-head cross-attention across variables with the
  pooled series as queries and the pooled text as keys and values;
* decision level: a sigmoid gate mixing the two modalities, two residual
  branches, and a second gate mixing the branches.

Every variable is processed with shared weights. Tensors are laid out with
``G = B * N`` series on the leading axis until the attention stage.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .data import ConfigError
from .numerics import Parameter, Tensor

GRAPH_KINDS = ("sage", "gcn")


@dataclass(frozen=True)
class ModelConfig:
    T_in: int
    M: int
    N: int
    patch_len: int = 16
    stride: int = 8
    d_model: int = 64
    n_heads: int = 4
    alpha: float = 0.5
    token_level: bool = True
    feature_level: bool = True
    decision_level: bool = True
    branch1: bool = True
    branch2: bool = True
    use_text: bool = True
    graph_kind: str = "sage"
    intra_modality_edges: bool = False
    homogeneous: bool = False
    instance_norm: bool = False
    ln_eps: float = 1e-5
    seed: int = 0

    def validate(self) -> None:
        if self.T_in < 1 or self.M < 1 or self.N < 1:
            raise ConfigError(f"T_in, M and N must be >= 1 (got {self.T_in}, {self.M}, {self.N})")
        if self.patch_len < 1 or self.patch_len > self.T_in:
            raise ConfigError(f"invariant patch_len <= T_in violated: patch_len={self.patch_len}, T_in={self.T_in}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if not math.isfinite(self.alpha):
            raise ConfigError("alpha must be finite")
        if self.graph_kind not in GRAPH_KINDS:
            raise ConfigError(f"graph_kind must be one of {GRAPH_KINDS}, got {self.graph_kind!r}")
        if not (self.branch1 or self.branch2):
            raise ConfigError("at least one decision branch must be enabled")

    @property
    def n_patches(self) -> int:
        return patch_count(self.T_in, self.patch_len, self.stride)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# patching
# ---------------------------------------------------------------------------


def patch_count(T_in: int, patch_len: int, stride: int) -> int:
    return -(-(T_in - patch_len) // stride) + 1


def patch_starts(T_in: int, patch_len: int, stride: int) -> np.ndarray:
    return np.arange(patch_count(T_in, patch_len, stride)) * stride


def extract_patches(series: np.ndarray, patch_len: int, stride: int) -> np.ndarray:
    """(..., T_in) -> (..., P, patch_len); overruns repeat the last value."""
    T_in = series.shape[-1]
    starts = patch_starts(T_in, patch_len, stride)
    idx = np.minimum(starts[:, None] + np.arange(patch_len)[None, :], T_in - 1)
    return series[..., idx]


# ---------------------------------------------------------------------------
# token-level alignment
# ---------------------------------------------------------------------------


def cosine_similarity_matrix(time: np.ndarray, text: np.ndarray) -> np.ndarray:
    """(..., P, d) x (..., Np, d) -> (..., P, Np); zero rows give 0."""
    tn = np.linalg.norm(time, axis=-1, keepdims=True)
    pn = np.linalg.norm(text, axis=-1, keepdims=True)
    tu = np.divide(time, tn, out=np.zeros_like(time), where=tn > 0)
    pu = np.divide(text, pn, out=np.zeros_like(text), where=pn > 0)
    return tu @ np.swapaxes(pu, -1, -2)


def dynamic_filter(S: np.ndarray, alpha: float, valid: np.ndarray | None = None) -> np.ndarray:
    """Keep S[i, j] >= mean_i + alpha * std_i, with population statistics of row i.

    ``valid`` marks real columns when rows are right-padded; padded entries are
    excluded from the statistics and never kept. Constant rows keep every
    entry (std is 0 and each entry equals the mean).
    """
    S = np.asarray(S, dtype=np.float64)
    if valid is None:
        valid = np.ones(S.shape, dtype=bool)
    valid = np.broadcast_to(valid, S.shape)
    n = valid.sum(axis=-1, keepdims=True)
    mu = np.where(valid, S, 0.0).sum(axis=-1, keepdims=True) / n
    sd = np.sqrt(np.where(valid, (S - mu) ** 2, 0.0).sum(axis=-1, keepdims=True) / n)
    # rounding can put the mean of c, c, ..., c one ulp above c
    constant = np.where(valid, S, np.inf).min(axis=-1, keepdims=True) == np.where(valid, S, -np.inf).max(
        axis=-1, keepdims=True
    )
    return ((S >= mu + alpha * sd) | constant) & valid


@dataclass
class HeteroGraph:
    """Patch nodes 0..n_time-1 and token nodes 0..n_text-1.

    ``edges`` holds cross-modal (time, text) pairs, each carrying messages
    both ways. ``time_pairs`` / ``text_pairs`` are optional intra-modal
    undirected pairs.
    """

    n_time: int
    n_text: int
    edges: np.ndarray
    time_pairs: np.ndarray
    text_pairs: np.ndarray

    @property
    def node_types(self) -> list[str]:
        return ["time"] * self.n_time + ["text"] * self.n_text

    def message_lists(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed (src, dst) over the stacked [time; text] node list."""
        t, p = self.edges[:, 0], self.edges[:, 1] + self.n_time
        a, b = self.time_pairs[:, 0], self.time_pairs[:, 1]
        c, d = self.text_pairs[:, 0] + self.n_time, self.text_pairs[:, 1] + self.n_time
        src = np.concatenate([p, t, a, b, c, d])
        dst = np.concatenate([t, p, b, a, d, c])
        return src.astype(np.intp), dst.astype(np.intp)


def _complete_pairs(sizes: list[int], offsets: np.ndarray) -> np.ndarray:
    out = []
    for n, off in zip(sizes, offsets):
        i, j = np.triu_indices(n, k=1)
        out.append(np.stack([i + off, j + off], axis=1))
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.intp)


def build_hetero_graph(mask: np.ndarray, intra_modality_edges: bool = False) -> HeteroGraph:
    """Single P x Np mask -> graph with one edge per nonzero entry."""
    mask = np.asarray(mask).astype(bool)
    return batched_graph(mask[None], np.array([mask.shape[1]]), intra_modality_edges)


def batched_graph(mask: np.ndarray, text_counts: np.ndarray, intra_modality_edges: bool = False) -> HeteroGraph:
    """Disjoint union of G graphs from a (G, P, Np_max) mask.

    Series g owns patch nodes g*P .. g*P+P-1 and the ``text_counts[g]`` token
    nodes that follow those of series g-1.
    """
    G, P, _ = mask.shape
    text_off = np.concatenate([[0], np.cumsum(text_counts)[:-1]]).astype(np.intp)
    g, i, j = np.nonzero(mask)
    edges = np.stack([g * P + i, text_off[g] + j], axis=1).astype(np.intp)
    if intra_modality_edges:
        time_pairs = _complete_pairs([P] * G, np.arange(G) * P)
        text_pairs = _complete_pairs(list(text_counts), text_off)
    else:
        time_pairs = text_pairs = np.zeros((0, 2), dtype=np.intp)
    return HeteroGraph(G * P, int(np.sum(text_counts)), edges, time_pairs, text_pairs)


def sage_update(
    graph: HeteroGraph,
    time: Tensor,
    text: Tensor,
    W_time: Tensor,
    W_text: Tensor,
    kind: str = "sage",
) -> tuple[Tensor, Tensor]:
    """One synchronous message-passing round; both sides read pre-update values.

    sage: relu(W @ [h ; mean of neighbours]), isolated nodes aggregate 0.
    gcn:  relu(W @ sum_j h_j / sqrt(deg_i deg_j)), no self term.
    """
    nodes = nx.concat([time, text], axis=0)
    n = graph.n_time + graph.n_text
    src, dst = graph.message_lists()
    if kind == "sage":
        agg = nx.scatter_mean(nodes, src, dst, n)
        agg_time, agg_text = nx.split(agg, [graph.n_time, graph.n_text], axis=0)
        new_time = nx.relu(nx.concat([time, agg_time], axis=-1) @ W_time.T)
        new_text = nx.relu(nx.concat([text, agg_text], axis=-1) @ W_text.T)
    elif kind == "gcn":
        deg = np.bincount(dst, minlength=n).astype(np.float64)
        w = 1.0 / np.sqrt(deg[src] * deg[dst]) if src.size else np.zeros(0)
        agg = nx.scatter_sum(nodes, src, dst, n, w)
        agg_time, agg_text = nx.split(agg, [graph.n_time, graph.n_text], axis=0)
        new_time = nx.relu(agg_time @ W_time.T)
        new_text = nx.relu(agg_text @ W_text.T)
    else:
        raise ConfigError(f"unknown graph kind {kind!r}")
    return new_time, new_text


def pool_global(time: Tensor, text_nodes: Tensor, last_index: np.ndarray) -> tuple[Tensor, Tensor]:
    """Mean over patches (axis -2) and the last token of each series."""
    return nx.mean(time, axis=-2), text_nodes[np.asarray(last_index, dtype=np.intp)]


# ---------------------------------------------------------------------------
# feature level
# ---------------------------------------------------------------------------


def _heads(x: Tensor, h: int) -> Tensor:
    B, N, d = x.shape
    return nx.transpose(nx.reshape(x, (B, N, h, d // h)), (0, 2, 1, 3))


def cross_attention(
    x_bar: Tensor,
    p_bar: Tensor,
    W_Q: Tensor,
    W_K: Tensor,
    W_V: Tensor,
    W_feature: Tensor,
    n_heads: int,
    trace: dict | None = None,
) -> Tensor:
    """Series queries attend over text keys/values; the N variables are the tokens.

    ``x_bar``, ``p_bar``: (B, N, d). Returns (B, N, d).
    """
    B, N, d = x_bar.shape
    dk = d // n_heads
    q = _heads(x_bar @ W_Q.T, n_heads)
    k = _heads(p_bar @ W_K.T, n_heads)
    v = _heads(p_bar @ W_V.T, n_heads)
    weights = nx.softmax_rows((q @ nx.transpose(k)) * (1.0 / math.sqrt(dk)))
    if trace is not None:
        trace["attention"] = weights.values
    out = nx.reshape(nx.transpose(weights @ v, (0, 2, 1, 3)), (B, N, d))
    return out @ W_feature.T


# ---------------------------------------------------------------------------
# decision level
# ---------------------------------------------------------------------------


def gated_mix(gate: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """gate * a + (1 - gate) * b."""
    return gate * a + (1.0 - gate) * b


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = x @ weight.T
    return y if bias is None else y + bias


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class FiCoTSModel:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.params: dict[str, Parameter] = {}
        c = config
        d, M, Lp, P = c.d_model, c.M, c.patch_len, c.n_patches
        rng = np.random.default_rng(c.seed)

        def weight(name, out_dim, in_dim):
            bound = math.sqrt(1.0 / in_dim)
            self._add(name, rng.uniform(-bound, bound, size=(out_dim, in_dim)))

        def bias(name, dim, value=0.0):
            self._add(name, np.full(dim, value))

        weight("patch.weight", d, Lp)
        bias("patch.bias", d)
        if c.graph_kind == "sage":
            weight("graph.W_time", d, 2 * d)
            if not c.homogeneous:
                weight("graph.W_text", d, 2 * d)
        else:
            weight("graph.W_time", d, d)
            if not c.homogeneous:
                weight("graph.W_text", d, d)
        for name in ("attn.W_Q", "attn.W_K", "attn.W_V", "attn.W_feature"):
            weight(name, d, d)
        bias("text_norm.gamma", d, 1.0)
        bias("text_norm.beta", d)
        weight("head.time.weight", M, d)
        bias("head.time.bias", M)
        weight("head.text.weight", M, d)
        bias("head.text.bias", M)
        weight("head.original.weight", M, P * Lp)
        bias("head.original.bias", M)
        weight("gate.W_gate", M, 2 * M)
        bias("gate.b_gate", M)
        weight("fuse1.weight", M, M)
        bias("fuse1.bias", M)
        weight("fuse2.weight", M, M)
        bias("fuse2.bias", M)
        weight("decision.W_decision", M, 2 * M)
        bias("decision.b_decision", M)

    def _add(self, name: str, values: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = Parameter(name, values)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"parameter {k!r} has shape {v.shape}, expected {self.params[k].shape}")
            self.params[k].values = np.array(v, dtype=np.float64)

    # ---------------------------------------------------------------------

    def _check_inputs(self, x: np.ndarray, texts) -> None:
        c = self.config
        if x.ndim != 3 or x.shape[1:] != (c.T_in, c.N):
            raise ConfigError(f"input batch has shape {x.shape}, expected (B, {c.T_in}, {c.N})")
        if len(texts) != x.shape[0]:
            raise ConfigError(f"got text for {len(texts)} windows, batch has {x.shape[0]}")
        for b, row in enumerate(texts):
            if len(row) != c.N:
                raise ConfigError(f"window {b}: {len(row)} text matrices for {c.N} variables")
            for n, t in enumerate(row):
                if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] != c.d_model:
                    raise ConfigError(
                        f"window {b}, variable {n}: text matrix shape {t.shape}, expected (N_p>=1, {c.d_model})"
                    )

    def forward(self, x: np.ndarray, texts: list[list[np.ndarray]], trace: dict | None = None) -> Tensor:
        """(B, T_in, N) inputs and B x N token matrices -> (B, M, N) predictions."""
        x = np.asarray(x, dtype=np.float64)
        self._check_inputs(x, texts)
        c, p = self.config, self.params
        B, _, N = x.shape
        G, P, d = B * N, c.n_patches, c.d_model

        if c.instance_norm:
            loc = x.mean(axis=1, keepdims=True)
            scale = x.std(axis=1, keepdims=True)
            scale = np.where(scale < 1e-8, 1.0, scale)
            x = (x - loc) / scale

        series = x.transpose(0, 2, 1).reshape(G, c.T_in)
        patches = extract_patches(series, c.patch_len, c.stride)  # G, P, Lp
        emb = linear(Tensor(patches), p["patch.weight"], p["patch.bias"])  # G, P, d

        flat_texts = [t for row in texts for t in row]
        counts = np.array([t.shape[0] for t in flat_texts])
        if not c.use_text:
            flat_texts = [np.zeros_like(t) for t in flat_texts]
        text_nodes = Tensor(np.concatenate(flat_texts, axis=0))
        last = np.cumsum(counts) - 1

        if c.token_level:
            width = counts.max()
            padded = np.zeros((G, width, d))
            for g, t in enumerate(flat_texts):
                padded[g, : t.shape[0]] = t
            valid = np.arange(width)[None, :] < counts[:, None]
            S = cosine_similarity_matrix(emb.values, padded)
            mask = dynamic_filter(S, c.alpha, valid[:, None, :])
            graph = batched_graph(mask, counts, c.intra_modality_edges)
            W_time = p["graph.W_time"]
            W_text = W_time if c.homogeneous else p["graph.W_text"]
            new_time, new_text = sage_update(
                graph, nx.reshape(emb, (G * P, d)), text_nodes, W_time, W_text, c.graph_kind
            )
            time_tok = nx.reshape(new_time, (G, P, d))
            text_tok = new_text
            if trace is not None:
                trace["mask"] = mask
                trace["graph"] = graph
        else:
            time_tok, text_tok = emb, text_nodes
        if trace is not None:
            trace["pre_align"] = emb.values.reshape(B, N, P, d)
            trace["post_align"] = time_tok.values.reshape(B, N, P, d)

        x_bar, p_bar = pool_global(time_tok, text_tok, last)
        x_bar = nx.reshape(x_bar, (B, N, d))
        p_bar = nx.reshape(p_bar, (B, N, d))
        p_feat = nx.layer_norm(p_bar, p["text_norm.gamma"], p["text_norm.beta"], c.ln_eps)
        if c.feature_level:
            x_feat = cross_attention(
                x_bar, p_bar, p["attn.W_Q"], p["attn.W_K"], p["attn.W_V"], p["attn.W_feature"], c.n_heads, trace
            )
        else:
            x_feat = x_bar

        x_hat = linear(x_feat, p["head.time.weight"], p["head.time.bias"])  # B, N, M
        p_hat = linear(p_feat, p["head.text.weight"], p["head.text.bias"])
        x_orig = linear(
            Tensor(patches.reshape(B, N, P * c.patch_len)), p["head.original.weight"], p["head.original.bias"]
        )
        gate = nx.sigmoid(linear(nx.concat([x_hat, p_hat], axis=-1), p["gate.W_gate"], p["gate.b_gate"]))
        fused = gated_mix(gate, x_hat, p_hat)
        branch1 = linear(fused, p["fuse1.weight"], p["fuse1.bias"]) + x_hat
        branch2 = linear(fused, p["fuse2.weight"], p["fuse2.bias"]) + x_orig
        if c.branch1 and c.branch2:
            if c.decision_level:
                dgate = nx.sigmoid(
                    linear(nx.concat([branch1, branch2], axis=-1), p["decision.W_decision"], p["decision.b_decision"])
                )
                out = gated_mix(dgate, branch1, branch2)
            else:
                dgate = None
                out = (branch1 + branch2) * 0.5
        else:
            dgate = None
            out = branch1 if c.branch1 else branch2

        if trace is not None:
            trace.update(
                x_hat=x_hat.values, p_hat=p_hat.values, x_orig=x_orig.values, gate=gate.values,
                fused=fused.values, branch1=branch1.values, branch2=branch2.values,
                decision_gate=None if dgate is None else dgate.values, output=out.values,
            )

        out = nx.transpose(out, (0, 2, 1))  # B, M, N
        if c.instance_norm:
            out = out * scale + loc
        return out

    __call__ = forward
