"""Forecast models over masked attribute grids.

The main model embeds each observed attribute value with its own affine
map, runs stacked graph-attention layers over the timestep's active
nodes (the dynamic graph: every observed attribute connects to every
other observed attribute, self-loops included), flattens the node
features, aggregates them across time with a GRU, and maps the final
hidden state to a scalar prediction.

Variants:
  gam               - the graph-attentive memory model
  gam_ta            - gam plus a time-aware attention readout over all
                      hidden states instead of the last one
  lstm              - baseline: raw masked attribute columns feed an LSTM
  gru_glucose_only  - baseline: the target attribute's raw series feeds a GRU
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ContractError
from .ingest import RegularSample
from .tensorcore import ParameterSet, Tensor

VARIANTS = ("gam", "gam_ta", "lstm", "gru_glucose_only")

SECONDS_PER_DAY = 86400.0


@dataclass
class GamConfig:
    n_attributes: int = 6
    history: int = 12          # input timesteps, 5 minutes each
    horizon: int = 6           # prediction offset in 5-minute steps
    embed_dim: int = 32        # per-node embedding width
    gat_dim: int = 32          # per-node width after each attention layer
    heads: int = 1
    gat_layers: int = 1
    hidden_size: int = 256     # recurrent state width
    gat_nonlinearity: str = "elu"  # or "sigmoid"
    leaky_slope: float = 0.2
    embed_depth: int = 1       # stacked affine maps per attribute (tanh between)
    head_depth: int = 1        # stacked affine maps in the output head
    target_index: int = 0      # catalog row of the predicted attribute

    def validate(self) -> None:
        for name in ("n_attributes", "history", "horizon", "embed_dim",
                     "gat_dim", "heads", "gat_layers", "hidden_size",
                     "embed_depth", "head_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.gat_nonlinearity not in ("elu", "sigmoid"):
            raise ConfigError(f"unknown gat_nonlinearity: {self.gat_nonlinearity}")
        if not 0 <= self.target_index < self.n_attributes:
            raise ConfigError(f"target_index {self.target_index} out of range")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class GraphSnapshot:
    """Per-timestep explainability payload of the dynamic graph."""

    t: int
    active: tuple[int, ...]
    adjacency: np.ndarray  # (N, N) bool, True iff both endpoints active
    # (layer, head) -> {(dst, src): weight}; rows over incoming edges sum to 1
    attention: dict[tuple[int, int], dict[tuple[int, int], float]] = field(
        default_factory=dict)


@dataclass
class ForwardResult:
    y_hat: Tensor                       # (1, 1) prediction in normalized space
    snapshots: list[GraphSnapshot] | None = None
    beta: np.ndarray | None = None      # time-attention weights, gam_ta only


# ---------------------------------------------------------------------------
# parameter construction


def build_parameters(cfg: GamConfig, variant: str = "gam",
                     rng: np.random.Generator | None = None) -> ParameterSet:
    """Fresh parameters for a variant, Glorot-uniform matrices, zero biases.

    The insertion order below is the canonical flat layout used by
    checkpoints and federated averaging.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown model variant: {variant}")
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(0)
    params = ParameterSet()

    def mat(name, shape):
        params.add(name, Tensor(tc.glorot_uniform(rng, shape)))

    def bias(name, rows):
        params.add(name, Tensor(np.zeros((rows, 1))))

    n, e, ep, h = cfg.n_attributes, cfg.embed_dim, cfg.gat_dim, cfg.hidden_size

    def stack(prefix: str, depth: int, in_dim: int, mid: int, out_dim: int):
        for d in range(depth):
            rows = out_dim if d == depth - 1 else mid
            mat(f"{prefix}.{d}.w", (rows, in_dim))
            bias(f"{prefix}.{d}.b", rows)
            in_dim = rows

    if variant in ("gam", "gam_ta"):
        for i in range(n):
            stack(f"embed.{i}", cfg.embed_depth, 1, e, e)
        for layer in range(cfg.gat_layers):
            in_dim = e if layer == 0 else ep
            for head in range(cfg.heads):
                mat(f"gat.{layer}.{head}.W", (ep, in_dim))
                mat(f"gat.{layer}.{head}.a", (2 * ep, 1))
        _add_gru(params, mat, bias, in_dim=ep * n, hidden=h)
        stack("head", cfg.head_depth, h, h, 1)
        if variant == "gam_ta":
            mat("ta.time.w", (ep, 1))
            bias("ta.time.b", ep)
            mat("ta.W", (ep, ep))
    elif variant == "gru_glucose_only":
        _add_gru(params, mat, bias, in_dim=1, hidden=h)
        stack("head", cfg.head_depth, h, h, 1)
    else:  # lstm
        for gate in ("i", "f", "j", "o"):
            mat(f"lstm.Wx{gate}", (h, n))
            bias(f"lstm.bx{gate}", h)
            mat(f"lstm.Wh{gate}", (h, h))
            bias(f"lstm.bh{gate}", h)
        stack("head", cfg.head_depth, h, h, 1)
    return params


def _add_gru(params, mat, bias, in_dim: int, hidden: int) -> None:
    for i in (1, 3, 5):
        mat(f"gru.W{i}", (hidden, in_dim))
    for i in (2, 4, 6):
        mat(f"gru.W{i}", (hidden, hidden))
    for i in range(1, 7):
        bias(f"gru.b{i}", hidden)


# ---------------------------------------------------------------------------
# building blocks


def apply_stack(params: ParameterSet, prefix: str, depth: int, x: Tensor) -> Tensor:
    """Stacked affine maps with tanh between layers (none after the last)."""
    for d in range(depth):
        x = tc.add(tc.matmul(params[f"{prefix}.{d}.w"], x),
                   params[f"{prefix}.{d}.b"])
        if d < depth - 1:
            x = tc.tanh(x)
    return x


def embed_timestep(x_col: np.ndarray, mask_col: np.ndarray,
                   params: ParameterSet, cfg: GamConfig,
                   zero_col: Tensor | None = None) -> tuple[Tensor, tuple[int, ...]]:
    """Per-attribute embeddings of one timestep's observed values.

    Active (observed) nodes get their embedding column; inactive nodes get
    a zero column that never touches the stored raw value.
    """
    if zero_col is None:
        zero_col = tc.constant(np.zeros((cfg.embed_dim, 1)))
    cols = []
    active = []
    for i in range(cfg.n_attributes):
        if mask_col[i]:
            x = tc.constant([[float(x_col[i])]])
            cols.append(apply_stack(params, f"embed.{i}", cfg.embed_depth, x))
            active.append(i)
        else:
            cols.append(zero_col)
    return tc.concat(cols, axis=1), tuple(active)


def _head_cache(params: ParameterSet, cfg: GamConfig):
    """Hoist per-(layer, head) projections that do not depend on t."""
    cache = {}
    ep = cfg.gat_dim
    for layer in range(cfg.gat_layers):
        for head in range(cfg.heads):
            w = params[f"gat.{layer}.{head}.W"]
            a = params[f"gat.{layer}.{head}.a"]
            a_self = tc.transpose(tc.slice_(a, np.s_[:ep, :]))   # (1, ep)
            a_neigh = tc.transpose(tc.slice_(a, np.s_[ep:, :]))  # (1, ep)
            cache[(layer, head)] = (w, a_self, a_neigh)
    return cache


def gat_layer(e_in: Tensor, active: tuple[int, ...], layer: int,
              head_cache: dict, cfg: GamConfig,
              snapshot: GraphSnapshot | None = None) -> Tensor:
    """One multi-head attention layer over the timestep's active nodes.

    Scores use LeakyReLU(a^T [W e_dst ; W e_src]) softmax-normalized over
    each receiver's active neighbors; head outputs are averaged before the
    output nonlinearity.  Inactive nodes stay zero columns.  An empty
    active set short-circuits to all zeros.
    """
    n = cfg.n_attributes
    active_mask = np.zeros(n, dtype=bool)
    active_mask[list(active)] = True
    if not active:
        if snapshot is not None:
            for head in range(cfg.heads):
                snapshot.attention[(layer, head)] = {}
        return tc.constant(np.zeros((cfg.gat_dim, n)))
    acc = None
    for head in range(cfg.heads):
        w, a_self, a_neigh = head_cache[(layer, head)]
        msgs = tc.matmul(w, e_in)                       # (ep, N) neural messages
        s_self = tc.matmul(a_self, msgs)                # (1, N)
        s_neigh = tc.matmul(a_neigh, msgs)              # (1, N)
        scores = tc.leaky_relu(tc.pairwise_sum(s_self, s_neigh), cfg.leaky_slope)
        alpha = tc.masked_row_softmax(scores, active_mask)
        if snapshot is not None:
            weights = {}
            for i in active:
                for j in active:
                    weights[(i, j)] = float(alpha.data[i, j])
            snapshot.attention[(layer, head)] = weights
        g = tc.matmul(msgs, tc.transpose(alpha))        # col i = sum_j alpha[i,j] msg_j
        acc = g if acc is None else tc.add(acc, g)
    if cfg.heads > 1:
        acc = tc.scale(acc, 1.0 / cfg.heads)
    out = tc.elu(acc) if cfg.gat_nonlinearity == "elu" else tc.sigmoid(acc)
    if len(active) < n:
        colmask = np.zeros((cfg.gat_dim, n))
        colmask[:, list(active)] = 1.0
        out = tc.hadamard(out, tc.constant(colmask))
    return out


def gru_step(x: Tensor, h_prev: Tensor, params: ParameterSet,
             ones: Tensor | None = None) -> Tensor:
    """Reset/update-gated recurrence; gates from current input and history."""
    if ones is None:
        ones = tc.constant(np.ones(h_prev.shape))

    def affine(wi, bi, v):
        return tc.add(tc.matmul(params[f"gru.W{wi}"], v), params[f"gru.b{bi}"])

    r = tc.sigmoid(tc.add(affine(1, 1, x), affine(2, 2, h_prev)))
    z = tc.sigmoid(tc.add(affine(3, 3, x), affine(4, 4, h_prev)))
    q = tc.tanh(tc.add(affine(5, 5, x), tc.hadamard(r, affine(6, 6, h_prev))))
    return tc.add(tc.hadamard(tc.sub(ones, z), q), tc.hadamard(z, h_prev))


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              params: ParameterSet) -> tuple[Tensor, Tensor]:
    """Input/forget/output-gated recurrence with a cell-state accumulator."""

    def gate(name, fn):
        pre = tc.add(
            tc.add(tc.matmul(params[f"lstm.Wx{name}"], x), params[f"lstm.bx{name}"]),
            tc.add(tc.matmul(params[f"lstm.Wh{name}"], h_prev), params[f"lstm.bh{name}"]))
        return fn(pre)

    i = gate("i", tc.sigmoid)
    f = gate("f", tc.sigmoid)
    j = gate("j", tc.tanh)
    o = gate("o", tc.sigmoid)
    c = tc.add(tc.hadamard(f, c_prev), tc.hadamard(i, j))
    h = tc.hadamard(o, tc.tanh(c))
    return h, c


def time_aware_head(hidden_states: list[Tensor], seconds: np.ndarray,
                    target_seconds: float, params: ParameterSet) -> tuple[Tensor, np.ndarray]:
    """Attention over all hidden states keyed by time-of-day similarity.

    Each timestamp (seconds of day) is embedded by one affine map; the
    score of step t against the prediction time is a bilinear form; the
    softmax-weighted sum of hidden states replaces the last state.
    """

    def embed_time(d: float) -> Tensor:
        return tc.add(tc.matmul(params["ta.time.w"], tc.constant([[float(d)]])),
                      params["ta.time.b"])

    key = tc.matmul(params["ta.W"], embed_time(target_seconds))  # (ep, 1)
    scores = [tc.matmul(tc.transpose(embed_time(d)), key) for d in seconds]
    score_vec = tc.concat(scores, axis=0)                        # (T, 1)
    beta = tc.softmax_over_subset(score_vec, range(len(hidden_states)))
    h_all = tc.concat(hidden_states, axis=1)                     # (H, T)
    return tc.matmul(h_all, beta), beta.data.reshape(-1).copy()


# ---------------------------------------------------------------------------
# full forward passes


def forward(sample: RegularSample, params: ParameterSet, cfg: GamConfig,
            variant: str = "gam", collect_snapshots: bool = False) -> ForwardResult:
    """Run one sample through the chosen variant.

    The prediction is in normalized space.  Only observed cells influence
    the output: raw values under a false mask never enter the graph.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown model variant: {variant}")
    x, mask = sample.X, sample.mask
    if x.shape != (cfg.n_attributes, cfg.history) or mask.shape != x.shape:
        raise ContractError(
            f"sample shape {x.shape} does not match config "
            f"({cfg.n_attributes}, {cfg.history})")

    if variant == "lstm":
        return _forward_lstm(sample, params, cfg)
    if variant == "gru_glucose_only":
        return _forward_target_gru(sample, params, cfg)

    head_cache = _head_cache(params, cfg)
    zero_col = tc.constant(np.zeros((cfg.embed_dim, 1)))
    h = tc.constant(np.zeros((cfg.hidden_size, 1)))
    ones_h = tc.constant(np.ones((cfg.hidden_size, 1)))
    snapshots: list[GraphSnapshot] | None = [] if collect_snapshots else None
    hidden_states: list[Tensor] = []

    for t in range(cfg.history):
        e_t, active = embed_timestep(x[:, t], mask[:, t], params, cfg, zero_col)
        snap = None
        if snapshots is not None:
            adjacency = np.zeros((cfg.n_attributes, cfg.n_attributes), dtype=bool)
            if active:
                sel = np.array(active)
                adjacency[np.ix_(sel, sel)] = True
            snap = GraphSnapshot(t=t, active=active, adjacency=adjacency)
        g = e_t
        for layer in range(cfg.gat_layers):
            g = gat_layer(g, active, layer, head_cache, cfg, snap)
        h = gru_step(tc.flatten(g), h, params, ones_h)
        hidden_states.append(h)
        if snapshots is not None:
            snapshots.append(snap)

    beta = None
    h_out = h
    if variant == "gam_ta":
        end = sample.window_end_time
        seconds = np.array([(end - (cfg.history - 1 - k) * 300.0) % SECONDS_PER_DAY
                            for k in range(cfg.history)])
        target_seconds = (end + cfg.horizon * 300.0) % SECONDS_PER_DAY
        h_out, beta = time_aware_head(hidden_states, seconds, target_seconds, params)
    y_hat = apply_stack(params, "head", cfg.head_depth, h_out)
    return ForwardResult(y_hat, snapshots, beta)


def _forward_lstm(sample: RegularSample, params: ParameterSet,
                  cfg: GamConfig) -> ForwardResult:
    h = tc.constant(np.zeros((cfg.hidden_size, 1)))
    c = tc.constant(np.zeros((cfg.hidden_size, 1)))
    fed = np.where(sample.mask, sample.X, 0.0)  # zero padding regardless of storage
    for t in range(cfg.history):
        x_t = tc.constant(fed[:, t:t + 1])
        h, c = lstm_step(x_t, h, c, params)
    return ForwardResult(apply_stack(params, "head", cfg.head_depth, h))


def _forward_target_gru(sample: RegularSample, params: ParameterSet,
                        cfg: GamConfig) -> ForwardResult:
    row = cfg.target_index
    fed = np.where(sample.mask[row], sample.X[row], 0.0)
    h = tc.constant(np.zeros((cfg.hidden_size, 1)))
    ones_h = tc.constant(np.ones((cfg.hidden_size, 1)))
    for t in range(cfg.history):
        h = gru_step(tc.constant([[float(fed[t])]]), h, params, ones_h)
    return ForwardResult(apply_stack(params, "head", cfg.head_depth, h))
