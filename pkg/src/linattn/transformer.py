"""Transformer backbone: embedding tables, multi-head attention blocks with
residual/norm/FFN, the final projection, and checkpoint IO.

Forward passes are built on an autograd Tape so training gets exact
gradients; eval mode skips dropout sampling and is a pure function of
(inputs, params, config).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import matrix as mx
from .autograd import Tape
from .matrix import Matrix, Rng

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int            # real items; ids 1..vocab_size, 0 is padding
    hidden: int = 64
    seq_len: int = 200
    layers: int = 2
    heads: int = 8
    inner: int = 256
    dropout: float = 0.2
    mechanism: str = "linrec"
    epsilon: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.heads < 1 or self.hidden % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide hidden ({self.hidden})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.mechanism not in ("standard", "linrec", "softmax_twice"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class EmbeddingTables:
    item_table: Matrix      # (vocab_size + 1) x hidden, row 0 all zeros
    position_table: Matrix  # seq_len x hidden


@dataclass
class LayerParams:
    w_q: list[Matrix]       # per head, hidden x head_dim
    w_k: list[Matrix]
    w_v: list[Matrix]
    w_o: Matrix             # hidden x hidden
    ffn_w1: Matrix          # hidden x inner
    ffn_b1: Matrix          # 1 x inner
    ffn_w2: Matrix          # inner x hidden
    ffn_b2: Matrix          # 1 x hidden
    ln1_gain: Matrix        # 1 x hidden
    ln1_bias: Matrix
    ln2_gain: Matrix
    ln2_bias: Matrix


@dataclass
class ModelParams:
    tables: EmbeddingTables
    layers: list[LayerParams]
    final_w: Matrix         # hidden x hidden
    final_b: Matrix         # 1 x hidden

    def named(self) -> list[tuple[str, Matrix]]:
        """Flat (name, matrix) view in a fixed order."""
        out = [("item_table", self.tables.item_table), ("pos_table", self.tables.position_table)]
        for l, lp in enumerate(self.layers):
            for i in range(len(lp.w_q)):
                out.append((f"layer{l}.head{i}.w_q", lp.w_q[i]))
                out.append((f"layer{l}.head{i}.w_k", lp.w_k[i]))
                out.append((f"layer{l}.head{i}.w_v", lp.w_v[i]))
            out.append((f"layer{l}.w_o", lp.w_o))
            out.append((f"layer{l}.ffn_w1", lp.ffn_w1))
            out.append((f"layer{l}.ffn_b1", lp.ffn_b1))
            out.append((f"layer{l}.ffn_w2", lp.ffn_w2))
            out.append((f"layer{l}.ffn_b2", lp.ffn_b2))
            out.append((f"layer{l}.ln1_gain", lp.ln1_gain))
            out.append((f"layer{l}.ln1_bias", lp.ln1_bias))
            out.append((f"layer{l}.ln2_gain", lp.ln2_gain))
            out.append((f"layer{l}.ln2_bias", lp.ln2_bias))
        out.append(("final_w", self.final_w))
        out.append(("final_b", self.final_b))
        return out

    def to_dict(self) -> dict[str, Matrix]:
        return dict(self.named())

    @staticmethod
    def from_dict(cfg: ModelConfig, values: dict[str, Matrix]) -> "ModelParams":
        def take(name: str) -> Matrix:
            if name not in values:
                raise KeyError(f"missing parameter {name!r}")
            return values[name]

        layers = []
        for l in range(cfg.layers):
            layers.append(LayerParams(
                w_q=[take(f"layer{l}.head{i}.w_q") for i in range(cfg.heads)],
                w_k=[take(f"layer{l}.head{i}.w_k") for i in range(cfg.heads)],
                w_v=[take(f"layer{l}.head{i}.w_v") for i in range(cfg.heads)],
                w_o=take(f"layer{l}.w_o"),
                ffn_w1=take(f"layer{l}.ffn_w1"),
                ffn_b1=take(f"layer{l}.ffn_b1"),
                ffn_w2=take(f"layer{l}.ffn_w2"),
                ffn_b2=take(f"layer{l}.ffn_b2"),
                ln1_gain=take(f"layer{l}.ln1_gain"),
                ln1_bias=take(f"layer{l}.ln1_bias"),
                ln2_gain=take(f"layer{l}.ln2_gain"),
                ln2_bias=take(f"layer{l}.ln2_bias"),
            ))
        return ModelParams(
            tables=EmbeddingTables(take("item_table"), take("pos_table")),
            layers=layers,
            final_w=take("final_w"),
            final_b=take("final_b"),
        )


def init_params(cfg: ModelConfig, rng: Rng) -> ModelParams:
    """Gaussian init (mean 0, small std); padding row of the item table is zero."""
    d, dh = cfg.hidden, cfg.head_dim

    def g(rows: int, cols: int) -> Matrix:
        return mx.gaussian_init(rng, rows, cols, 0.0, cfg.init_std)

    items = rng.normal(cfg.vocab_size + 1, d, 0.0, cfg.init_std)
    items[0, :] = 0.0
    layers = []
    for _ in range(cfg.layers):
        layers.append(LayerParams(
            w_q=[g(d, dh) for _ in range(cfg.heads)],
            w_k=[g(d, dh) for _ in range(cfg.heads)],
            w_v=[g(d, dh) for _ in range(cfg.heads)],
            w_o=g(d, d),
            ffn_w1=g(d, cfg.inner),
            ffn_b1=Matrix.zeros(1, cfg.inner),
            ffn_w2=g(cfg.inner, d),
            ffn_b2=Matrix.zeros(1, d),
            ln1_gain=Matrix.full(1, d, 1.0),
            ln1_bias=Matrix.zeros(1, d),
            ln2_gain=Matrix.full(1, d, 1.0),
            ln2_bias=Matrix.zeros(1, d),
        ))
    return ModelParams(
        tables=EmbeddingTables(Matrix(items, copy=False), g(cfg.seq_len, d)),
        layers=layers,
        final_w=g(d, d),
        final_b=Matrix.zeros(1, d),
    )


# ---------------------------------------------------------------------------
# tape-staged forward pass
# ---------------------------------------------------------------------------

def stage_params(tape: Tape, params: ModelParams) -> dict[str, int]:
    """Register every parameter as a gradient-carrying leaf on the tape."""
    return {name: tape.leaf(m) for name, m in params.named()}


def embed(tape: Tape, pnodes: dict[str, int], ids, true_len: int, cfg: ModelConfig) -> int:
    """Sum of item and positional embeddings for one padded id sequence.

    Item rows are gathered with a constant one-hot selector so the scatter
    adjoint falls out of the matmul rule; positional rows at padded slots
    are suppressed, keeping padding rows exactly zero.
    """
    ids = list(ids)
    if len(ids) != cfg.seq_len:
        raise mx.ShapeError(f"sequence must be padded to {cfg.seq_len}, got {len(ids)}")
    if not 1 <= true_len <= cfg.seq_len:
        raise ValueError(f"true_len {true_len} out of range [1, {cfg.seq_len}]")
    selector = np.zeros((cfg.seq_len, cfg.vocab_size + 1))
    for t, item in enumerate(ids):
        if not 0 <= item <= cfg.vocab_size:
            raise ValueError(f"item id {item} out of vocabulary [0, {cfg.vocab_size}]")
        selector[t, item] = 1.0
    pos_keep = np.zeros((cfg.seq_len, cfg.seq_len))
    for t in range(true_len):
        pos_keep[t, t] = 1.0

    e_items = tape.matmul(tape.constant(Matrix(selector, copy=False)), pnodes["item_table"])
    e_pos = tape.matmul(tape.constant(Matrix(pos_keep, copy=False)), pnodes["pos_table"])
    return tape.add(e_items, e_pos)


def _head_attention(tape: Tape, q: int, k: int, v: int, cfg: ModelConfig) -> int:
    dh = cfg.head_dim
    if cfg.mechanism == "standard":
        logits = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / np.sqrt(dh))
        return tape.matmul(tape.softmax_rows(logits), v)
    if cfg.mechanism == "linrec":
        qn = tape.l2_normalize_rows(tape.elu(q), dh, cfg.epsilon)
        kn = tape.l2_normalize_cols(tape.elu(k), cfg.seq_len, cfg.epsilon)
        return tape.matmul(qn, tape.matmul(tape.transpose(kn), v))
    # softmax_twice: column softmax composed from transposes
    qs = tape.softmax_rows(q)
    ks = tape.transpose(tape.softmax_rows(tape.transpose(k)))
    return tape.matmul(qs, tape.matmul(tape.transpose(ks), v))


def multi_head(tape: Tape, h: int, layer: int, pnodes: dict[str, int], cfg: ModelConfig,
               capture: dict | None = None) -> int:
    """Per-head attention over projected Q/K/V, concatenated then mixed by w_o."""
    heads = []
    for i in range(cfg.heads):
        q = tape.matmul(h, pnodes[f"layer{layer}.head{i}.w_q"])
        k = tape.matmul(h, pnodes[f"layer{layer}.head{i}.w_k"])
        v = tape.matmul(h, pnodes[f"layer{layer}.head{i}.w_v"])
        if capture is not None:
            capture[(layer, i)] = (tape.value(q), tape.value(k))
        heads.append(_head_attention(tape, q, k, v, cfg))
    return tape.matmul(tape.concat_cols(heads), pnodes[f"layer{layer}.w_o"])


def encoder_layer(tape: Tape, h: int, layer: int, pnodes: dict[str, int], cfg: ModelConfig,
                  mode: str, rng: Rng | None, capture: dict | None = None) -> int:
    def maybe_dropout(node: int) -> int:
        if mode == "train" and cfg.dropout > 0.0:
            shape = tape.value(node).shape
            return tape.dropout(node, mx.dropout_mask(rng, shape[0], shape[1], cfg.dropout))
        return node

    mh = maybe_dropout(multi_head(tape, h, layer, pnodes, cfg, capture))
    s = tape.layer_norm(tape.add(h, mh),
                        pnodes[f"layer{layer}.ln1_gain"], pnodes[f"layer{layer}.ln1_bias"],
                        cfg.epsilon)
    f1 = tape.gelu(tape.add_bias(tape.matmul(s, pnodes[f"layer{layer}.ffn_w1"]),
                                 pnodes[f"layer{layer}.ffn_b1"]))
    f2 = tape.add_bias(tape.matmul(f1, pnodes[f"layer{layer}.ffn_w2"]),
                       pnodes[f"layer{layer}.ffn_b2"])
    f2 = maybe_dropout(f2)
    return tape.layer_norm(tape.add(s, f2),
                           pnodes[f"layer{layer}.ln2_gain"], pnodes[f"layer{layer}.ln2_bias"],
                           cfg.epsilon)


def encode_hidden(tape: Tape, e: int, pnodes: dict[str, int], cfg: ModelConfig,
                  mode: str, rng: Rng | None = None, capture: dict | None = None) -> int:
    """Run the layer stack from an embedded sequence node, then the final affine."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and cfg.dropout > 0.0 and rng is None:
        raise ValueError("train mode with dropout needs an Rng")
    h = e
    for l in range(cfg.layers):
        h = encoder_layer(tape, h, l, pnodes, cfg, mode, rng, capture)
    return tape.add_bias(tape.matmul(h, pnodes["final_w"]), pnodes["final_b"])


def encode(tape: Tape, pnodes: dict[str, int], ids, true_len: int, cfg: ModelConfig,
           mode: str = "eval", rng: Rng | None = None, capture: dict | None = None) -> int:
    """Full forward for one sequence: embed, layer stack, final projection."""
    e = embed(tape, pnodes, ids, true_len, cfg)
    return encode_hidden(tape, e, pnodes, cfg, mode, rng, capture)


def encode_eval(params: ModelParams, ids, true_len: int, cfg: ModelConfig,
                capture: dict | None = None) -> Matrix:
    """Deterministic eval-mode representation, no gradient bookkeeping kept."""
    tape = Tape()
    pnodes = stage_params(tape, params)
    out = encode(tape, pnodes, ids, true_len, cfg, mode="eval", capture=capture)
    return tape.value(out)


# ---------------------------------------------------------------------------
# checkpoint container (versioned NPZ: named float64 arrays + a JSON meta entry)
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: ModelParams, cfg: ModelConfig) -> None:
    arrays = {name: np.asarray(m.array) for name, m in params.named()}
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": {
            "vocab_size": cfg.vocab_size, "hidden": cfg.hidden, "seq_len": cfg.seq_len,
            "layers": cfg.layers, "heads": cfg.heads, "inner": cfg.inner,
            "dropout": cfg.dropout, "mechanism": cfg.mechanism,
            "epsilon": cfg.epsilon, "init_std": cfg.init_std,
        },
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
             **arrays)


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig]:
    with np.load(path) as bundle:
        if "__meta__" not in bundle:
            raise ValueError(f"{path}: not a model checkpoint (missing meta entry)")
        meta = json.loads(bytes(bundle["__meta__"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        cfg = ModelConfig(**meta["config"])
        values = {name: Matrix(bundle[name]) for name in bundle.files if name != "__meta__"}
    return ModelParams.from_dict(cfg, values), cfg
