"""Hierarchical document classifier: embed, convolve, encode, attend, classify.

Per sentence, token vectors pass through an optional convolutional feature
stack (plain multi-window CNN or causal dilated residual TCN), then a
bidirectional GRU produces token annotations that word attention pools into a
sentence vector. A second bidirectional GRU plus attention pools sentence
vectors into a document vector feeding a two-class softmax head.

Batched forwards are time-major: a sequence is a list of ``[rows x dim]``
tensors, so the whole model composes from matmul/elementwise primitives and
every step stays gradient-checkable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import EmbeddingTable, EncodedDocument, Vocabulary

VARIANTS = ("none", "cnn", "tcn")


class ConfigError(ValueError):
    pass


@dataclass
class HanConfig:
    embed_dim: int = 200
    gru_hidden: int = 50  # per direction; annotations are twice this
    variant: str = "cnn"
    cnn_windows: tuple[int, ...] = (2, 3, 4)
    cnn_maps: int = 64  # feature maps per window size
    tcn_levels: int = 3
    tcn_kernel: int = 3
    tcn_channels: int = 64
    dropout: float = 0.5
    n_classes: int = 2
    s_max: int = 30
    t_max: int = 50
    embed_buckets: int = 100_000
    embed_n_min: int = 3
    embed_n_max: int = 6

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("embed_dim", "gru_hidden", "tcn_levels", "tcn_kernel",
                     "tcn_channels", "cnn_maps", "s_max", "t_max", "embed_buckets"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.variant == "cnn" and max(self.cnn_windows) > self.t_max:
            raise ConfigError(
                f"cnn window {max(self.cnn_windows)} exceeds t_max {self.t_max}"
            )
        if self.n_classes != 2:
            raise ConfigError("only the two-class head is supported")

    @property
    def feature_dim(self) -> int:
        """Channel count the word encoder sees."""
        if self.variant == "cnn":
            return len(self.cnn_windows) * self.cnn_maps
        if self.variant == "tcn":
            return self.tcn_channels
        return self.embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_windows"] = list(self.cnn_windows)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HanConfig":
        d = dict(d)
        if "cnn_windows" in d:
            d["cnn_windows"] = tuple(d["cnn_windows"])
        return cls(**d)


@dataclass
class GruParams:
    """One direction's gate projections: update z, reset r, candidate h."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor


@dataclass
class Dropout:
    """Per-forward dropout plan; (seed, step) plus a running site salt."""

    p: float = 0.0
    seed: int = 0
    step: int = 0
    training: bool = False
    _salt: int = 0

    def apply(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        self._salt += 1
        return ad.dropout(
            x, self.p, seed=self.seed, step=self.step, salt=self._salt, training=True
        )


NO_DROPOUT = Dropout(p=0.0, training=False)


def gru_cell(x: Tensor, h_prev: Tensor, gates: GruParams) -> Tensor:
    """Single GRU step on row-major batches: ``[rows x in] -> [rows x hidden]``."""
    if x.shape[-1] != gates.w_z.shape[0] or h_prev.shape[-1] != gates.u_z.shape[0]:
        raise ad.ShapeError(
            f"gru_cell got x{x.shape}, h{h_prev.shape} for gates "
            f"w{gates.w_z.shape}, u{gates.u_z.shape}"
        )
    z = ad.sigmoid(x @ gates.w_z + h_prev @ gates.u_z + gates.b_z)
    r = ad.sigmoid(x @ gates.w_r + h_prev @ gates.u_r + gates.b_r)
    h_cand = ad.tanh(x @ gates.w_h + ad.mul(r, h_prev) @ gates.u_h + gates.b_h)
    return ad.add(ad.mul(1.0 - z, h_prev), ad.mul(z, h_cand))


def _masked_step(x, h_prev, gates, m_col):
    h_new = gru_cell(x, h_prev, gates)
    if m_col is None:
        return h_new
    return ad.add(ad.mul(h_new, m_col), ad.mul(h_prev, 1.0 - m_col))


def bigru_encode(
    seq: Sequence[Tensor],
    mask: np.ndarray | None,
    forward: GruParams,
    backward: GruParams,
) -> list[Tensor]:
    """Annotations ``[fwd_state; bwd_state]`` per step; masked steps hold state."""
    if len(seq) == 0:
        raise ad.ShapeError("bigru_encode needs at least one step")
    rows = seq[0].shape[0]
    hidden = forward.u_z.shape[0]
    cols = None
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        cols = [m[:, t : t + 1] for t in range(len(seq))]

    h = Tensor(np.zeros((rows, hidden)))
    fwd = []
    for t in range(len(seq)):
        h = _masked_step(seq[t], h, forward, None if cols is None else cols[t])
        fwd.append(h)
    h = Tensor(np.zeros((rows, hidden)))
    bwd: list[Tensor | None] = [None] * len(seq)
    for t in reversed(range(len(seq))):
        h = _masked_step(seq[t], h, backward, None if cols is None else cols[t])
        bwd[t] = h
    return [ad.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]


def attention_pool(
    annotations: Sequence[Tensor],
    mask: np.ndarray | None,
    w: Tensor,
    b: Tensor,
    context: Tensor,
    empty: str = "error",
) -> tuple[Tensor, Tensor]:
    """Score each step against a trained context vector and pool by softmax.

    Returns the pooled rows and the attention weight matrix ``[rows x steps]``.
    """
    if len(annotations) == 0:
        raise ad.ShapeError("attention_pool needs at least one annotation")
    ctx_col = ad.reshape(context, (context.size, 1))
    score_cols = [ad.tanh(h @ w + b) @ ctx_col for h in annotations]
    scores = ad.concat(score_cols, axis=1) if len(score_cols) > 1 else score_cols[0]
    alpha = ad.masked_softmax(scores, mask, empty=empty)
    pooled = None
    for t, h in enumerate(annotations):
        term = ad.mul(ad.take_cols(alpha, [t]), h)
        pooled = term if pooled is None else ad.add(pooled, term)
    return pooled, alpha


def conv_feature_stack(
    seq: Sequence[Tensor],
    params: dict[str, Tensor],
    windows: tuple[int, ...],
    drop: Dropout = NO_DROPOUT,
) -> list[Tensor]:
    """Multi-window same-padded convolutions over the token axis, ReLU, concat."""
    steps = len(seq)
    per_window: list[list[Tensor]] = []
    for w in windows:
        left = (w - 1) // 2
        taps = [params[f"cnn.w{w}.tap{i}"] for i in range(w)]
        bias = params[f"cnn.w{w}.bias"]
        outs = []
        for t in range(steps):
            acc = None
            for i in range(w):
                src = t - left + i
                if src < 0 or src >= steps:
                    continue  # zero padding: out-of-range taps contribute nothing
                term = seq[src] @ taps[i]
                acc = term if acc is None else ad.add(acc, term)
            acc = bias if acc is None else ad.add(acc, bias)
            outs.append(ad.relu(acc))
        per_window.append(outs)
    features = []
    for t in range(steps):
        cat = (
            ad.concat([outs[t] for outs in per_window], axis=1)
            if len(per_window) > 1
            else per_window[0][t]
        )
        features.append(drop.apply(cat))
    return features


def tcn_stack(
    seq: Sequence[Tensor],
    params: dict[str, Tensor],
    levels: int,
    kernel: int,
    drop: Dropout = NO_DROPOUT,
) -> list[Tensor]:
    """Stacked causal dilated conv blocks (dilation doubling) with residuals."""
    steps = len(seq)
    current = list(seq)
    for lvl in range(levels):
        d = 2**lvl
        taps = [params[f"tcn.block{lvl}.tap{i}"] for i in range(kernel)]
        bias = params[f"tcn.block{lvl}.bias"]
        proj = params.get(f"tcn.block{lvl}.proj")
        nxt = []
        for t in range(steps):
            acc = None
            for i in range(kernel):
                src = t - d * i
                if src < 0:
                    continue  # causal left padding
                term = current[src] @ taps[i]
                acc = term if acc is None else ad.add(acc, term)
            acc = bias if acc is None else ad.add(acc, bias)
            y = drop.apply(ad.relu(acc))
            res = current[t] if proj is None else current[t] @ proj
            nxt.append(ad.add(y, res))
        current = nxt
    return current


@dataclass
class Batch:
    """Padded, masked, model-ready arrays for a group of documents."""

    labels: np.ndarray  # [B]
    sent_mask: np.ndarray  # [B, S] bool
    tok_mask: np.ndarray  # [B*S, T] bool
    word_ids: np.ndarray  # [B*S, T]
    word_w: np.ndarray  # [B*S, T]
    bucket_flat: list[np.ndarray]  # per step t: concatenated bucket ids
    bucket_offs: list[np.ndarray]  # per step t: CSR offsets, length B*S+1
    doc_ids: list[str] = field(default_factory=list)

    @property
    def n_docs(self) -> int:
        return self.labels.shape[0]

    @property
    def n_sentences(self) -> int:
        return self.sent_mask.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.tok_mask.shape[1]


def collate(docs: Sequence[EncodedDocument]) -> Batch:
    if not docs:
        raise ValueError("cannot collate an empty batch")
    for doc in docs:
        if doc.n_sentences == 0:
            raise ValueError(f"document {doc.doc_id!r} is empty")
    b = len(docs)
    s = max(d.n_sentences for d in docs)
    t = max(len(ids) for d in docs for ids in d.word_ids)

    labels = np.array([d.label for d in docs], dtype=np.intp)
    sent_mask = np.zeros((b, s), dtype=bool)
    tok_mask = np.zeros((b * s, t), dtype=bool)
    word_ids = np.zeros((b * s, t), dtype=np.intp)
    word_w = np.zeros((b * s, t))
    buckets: list[list[tuple[int, ...]]] = [[() for _ in range(b * s)] for _ in range(t)]

    for di, doc in enumerate(docs):
        for si in range(doc.n_sentences):
            row = di * s + si
            ids = doc.word_ids[si]
            n_tok = len(ids)
            sent_mask[di, si] = True
            tok_mask[row, :n_tok] = True
            word_ids[row, :n_tok] = ids
            word_w[row, :n_tok] = doc.word_weight[si]
            for ti in range(n_tok):
                buckets[ti][row] = doc.bucket_ids[si][ti]

    bucket_flat, bucket_offs = [], []
    for ti in range(t):
        counts = np.array([len(buckets[ti][r]) for r in range(b * s)], dtype=np.intp)
        offs = np.concatenate([[0], np.cumsum(counts)])
        flat = np.fromiter(
            (bid for r in range(b * s) for bid in buckets[ti][r]), dtype=np.intp, count=offs[-1]
        )
        bucket_flat.append(flat)
        bucket_offs.append(offs)

    return Batch(
        labels=labels,
        sent_mask=sent_mask,
        tok_mask=tok_mask,
        word_ids=word_ids,
        word_w=word_w,
        bucket_flat=bucket_flat,
        bucket_offs=bucket_offs,
        doc_ids=[d.doc_id for d in docs],
    )


@dataclass
class AttentionTrace:
    """Attention weights for one document, trimmed to real lengths."""

    word_weights: list[np.ndarray]
    sentence_weights: np.ndarray


def init_params(config: HanConfig, table: EmbeddingTable, seed: int = 0) -> dict[str, Tensor]:
    """All trainable tensors keyed by name, in a fixed construction order."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x4A11])))
    scale = 0.05
    params: dict[str, Tensor] = {
        "embed.word": table.word,
        "embed.bucket": table.bucket,
    }

    def mat(name, rows, cols):
        params[name] = Tensor(rng.uniform(-scale, scale, (rows, cols)), requires_grad=True, name=name)

    def vec_zero(name, n):
        params[name] = Tensor(np.zeros(n), requires_grad=True, name=name)

    def vec_uniform(name, n):
        params[name] = Tensor(rng.uniform(-scale, scale, n), requires_grad=True, name=name)

    if config.variant == "cnn":
        for w in config.cnn_windows:
            for i in range(w):
                mat(f"cnn.w{w}.tap{i}", config.embed_dim, config.cnn_maps)
            vec_zero(f"cnn.w{w}.bias", config.cnn_maps)
    elif config.variant == "tcn":
        for lvl in range(config.tcn_levels):
            cin = config.embed_dim if lvl == 0 else config.tcn_channels
            for i in range(config.tcn_kernel):
                mat(f"tcn.block{lvl}.tap{i}", cin, config.tcn_channels)
            vec_zero(f"tcn.block{lvl}.bias", config.tcn_channels)
            if cin != config.tcn_channels:
                mat(f"tcn.block{lvl}.proj", cin, config.tcn_channels)

    u = config.gru_hidden
    for level, in_dim in (("word", config.feature_dim), ("sent", 2 * u)):
        for direction in ("fw", "bw"):
            for gate in ("z", "r", "h"):
                mat(f"{level}_gru.{direction}.w_{gate}", in_dim, u)
                mat(f"{level}_gru.{direction}.u_{gate}", u, u)
                vec_zero(f"{level}_gru.{direction}.b_{gate}", u)
        mat(f"{level}_attn.w", 2 * u, 2 * u)
        vec_zero(f"{level}_attn.b", 2 * u)
        vec_uniform(f"{level}_attn.u", 2 * u)

    mat("head.w", 2 * u, config.n_classes)
    vec_zero("head.b", config.n_classes)
    return params


def _gru_params(params: dict[str, Tensor], level: str, direction: str) -> GruParams:
    p = lambda k: params[f"{level}_gru.{direction}.{k}"]
    return GruParams(
        w_z=p("w_z"), u_z=p("u_z"), b_z=p("b_z"),
        w_r=p("w_r"), u_r=p("u_r"), b_r=p("b_r"),
        w_h=p("w_h"), u_h=p("u_h"), b_h=p("b_h"),
    )


class HanModel:
    """Config + vocabulary + embedding table + named parameters."""

    def __init__(
        self,
        config: HanConfig,
        vocab: Vocabulary,
        table: EmbeddingTable | None = None,
        seed: int = 0,
        params: dict[str, Tensor] | None = None,
    ):
        if table is None:
            table = EmbeddingTable(
                vocab,
                dim=config.embed_dim,
                n_min=config.embed_n_min,
                n_max=config.embed_n_max,
                buckets=config.embed_buckets,
                seed=seed,
            )
        if table.dim != config.embed_dim:
            raise ConfigError(f"table dim {table.dim} != config embed_dim {config.embed_dim}")
        self.config = config
        self.vocab = vocab
        self.table = table
        self.seed = seed
        self.params = params if params is not None else init_params(config, table, seed=seed)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.params.items() if t.requires_grad]

    def encode(self, docs) -> list[EncodedDocument]:
        from .vocab import encode_document

        return [encode_document(d, self.vocab, self.table) for d in docs]

    # --- forward -------------------------------------------------------------

    def forward_batch(
        self, batch: Batch, training: bool = False, step: int = 0
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Class probabilities ``[docs x 2]`` plus word/sentence attention maps."""
        cfg = self.config
        drop = (
            Dropout(p=cfg.dropout, seed=self.seed, step=step, training=True)
            if training and cfg.dropout > 0
            else NO_DROPOUT
        )
        t_steps = batch.n_tokens
        tok_mask_f = batch.tok_mask.astype(np.float64)

        embedded = []
        for t in range(t_steps):
            x = ad.embedding_lookup(
                self.params["embed.word"],
                self.params["embed.bucket"],
                batch.word_ids[:, t],
                batch.word_w[:, t],
                batch.bucket_flat[t],
                batch.bucket_offs[t],
            )
            # zero padded positions so conv windows cannot leak padding rows
            embedded.append(ad.mul(x, tok_mask_f[:, t : t + 1]))

        if cfg.variant == "cnn":
            word_seq = conv_feature_stack(embedded, self.params, cfg.cnn_windows, drop)
        elif cfg.variant == "tcn":
            word_seq = tcn_stack(embedded, self.params, cfg.tcn_levels, cfg.tcn_kernel, drop)
        else:
            word_seq = embedded

        word_ann = bigru_encode(
            word_seq,
            batch.tok_mask,
            _gru_params(self.params, "word", "fw"),
            _gru_params(self.params, "word", "bw"),
        )
        sent_vec, alpha_w = attention_pool(
            word_ann,
            batch.tok_mask,
            self.params["word_attn.w"],
            self.params["word_attn.b"],
            self.params["word_attn.u"],
            empty="zero",  # padding-only sentence rows; masked out downstream
        )

        b, s = batch.n_docs, batch.n_sentences
        sent_seq = [
            ad.take_rows(sent_vec, np.arange(b) * s + i) for i in range(s)
        ]
        sent_ann = bigru_encode(
            sent_seq,
            batch.sent_mask,
            _gru_params(self.params, "sent", "fw"),
            _gru_params(self.params, "sent", "bw"),
        )
        doc_vec, alpha_s = attention_pool(
            sent_ann,
            batch.sent_mask,
            self.params["sent_attn.w"],
            self.params["sent_attn.b"],
            self.params["sent_attn.u"],
            empty="error",
        )

        logits = doc_vec @ self.params["head.w"] + self.params["head.b"]
        probs = ad.masked_softmax(logits, None)
        return probs, alpha_w, alpha_s

    def forward_document(self, doc: EncodedDocument) -> tuple[np.ndarray, AttentionTrace]:
        """Evaluation-mode probabilities and attention trace for one document."""
        if doc.n_sentences == 0:
            raise ValueError(f"document {doc.doc_id!r} is empty")
        batch = collate([doc])
        probs, alpha_w, alpha_s = self.forward_batch(batch, training=False)
        words = [
            alpha_w.data[i, : len(doc.word_ids[i])].copy() for i in range(doc.n_sentences)
        ]
        trace = AttentionTrace(
            word_weights=words,
            sentence_weights=alpha_s.data[0, : doc.n_sentences].copy(),
        )
        return probs.data[0].copy(), trace

    def score(self, docs: Sequence[EncodedDocument], batch_size: int = 64) -> np.ndarray:
        """Spam-class probability per document (evaluation mode)."""
        out = np.empty(len(docs))
        for lo in range(0, len(docs), batch_size):
            chunk = docs[lo : lo + batch_size]
            probs, _, _ = self.forward_batch(collate(chunk), training=False)
            out[lo : lo + len(chunk)] = probs.data[:, 1]
        return out

    # --- checkpointing -------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        save_checkpoint(path, self, extra=extra)

    @classmethod
    def load(cls, path: str | Path) -> "HanModel":
        return load_checkpoint(path)


_MAGIC = b"HANCKPT\x01"


def save_checkpoint(path: str | Path, model: HanModel, extra: dict | None = None) -> None:
    """Versioned binary container; identical models serialize byte-identically."""
    names = list(model.params.keys())
    header = {
        "format": "hanspam-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "vocab": {
            "tokens": model.vocab.index_to_token[2:],
            "freqs": model.vocab.freqs[2:],
            "min_count": model.vocab.min_count,
        },
        "embed": {
            "dim": model.table.dim,
            "n_min": model.table.n_min,
            "n_max": model.table.n_max,
            "buckets": model.table.buckets,
            "trainable": model.table.trainable,
        },
        "params": [
            {"name": k, "shape": list(model.params[k].shape)} for k in names
        ],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(model.params[name].data).tobytes())


def load_checkpoint(path: str | Path) -> HanModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = HanConfig.from_dict(header["config"])
        vocab = Vocabulary(
            header["vocab"]["tokens"], header["vocab"]["freqs"], header["vocab"]["min_count"]
        )
        emb = header["embed"]
        table = EmbeddingTable(
            vocab,
            dim=emb["dim"],
            n_min=emb["n_min"],
            n_max=emb["n_max"],
            buckets=emb["buckets"],
            seed=header["seed"],
            trainable=emb["trainable"],
        )
        params: dict[str, Tensor] = {}
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
            if spec["name"] == "embed.word":
                table.word.data = data
                params[spec["name"]] = table.word
            elif spec["name"] == "embed.bucket":
                table.bucket.data = data
                params[spec["name"]] = table.bucket
            else:
                params[spec["name"]] = Tensor(data, requires_grad=True, name=spec["name"])
    model = HanModel(config, vocab, table=table, seed=header["seed"], params=params)
    return model


def checkpoint_extra(path: str | Path) -> dict:
    """Read just the metadata block of a checkpoint."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8"))["extra"]
