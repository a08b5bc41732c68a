"""Encoder-decoder sequence model over item token sets.

The encoder reads a user's history, one pooled position per item (the sum
of that item's per-codebook token embeddings plus codebook-id embeddings,
so the item representation is order-free in the token set). The decoder
generates the next item's tokens one codebook at a time, conditioned on the
already-generated prefix and the encoder memory, with a separate D-way
output head per codebook and an auxiliary category head at every step.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .numerics import (
    Adam,
    ParamStore,
    Tensor,
    add_const,
    concat,
    gather_last,
    log_softmax_t,
    named_stream,
    no_grad,
    softmax,
    softmax_t,
    take_rows,
)
from .tokenizer import TokenSet

SEQMODEL_MAGIC = b"SEQ1"
_NEG = -1e9


@dataclass(frozen=True)
class CategoryVocab:
    labels: tuple[str, ...]

    def __init__(self, labels: Iterable[str]):
        labels = tuple(labels)
        if len(labels) < 2:
            raise ValueError("category vocabulary needs at least 2 labels")
        if len(set(labels)) != len(labels):
            raise ValueError("category labels must be unique")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


@dataclass(frozen=True)
class UserSequence:
    """Items in timestamp order, each with its token set and category index."""

    user_id: str
    item_ids: tuple[str, ...]
    token_sets: tuple[TokenSet, ...]
    categories: tuple[int, ...]

    def __post_init__(self):
        t = len(self.item_ids)
        if t < 1 or len(self.token_sets) != t or len(self.categories) != t:
            raise ValueError("sequence needs >= 1 item with aligned tokens/categories")
        ms = {ts.n_codebooks for ts in self.token_sets}
        if len(ms) != 1:
            raise ValueError("all token sets in a sequence must share M")

    def __len__(self) -> int:
        return len(self.item_ids)

    def prefix(self, length: int) -> "UserSequence":
        return UserSequence(self.user_id, self.item_ids[:length],
                            self.token_sets[:length], self.categories[:length])


@dataclass
class SeqModelConfig:
    n_codebooks: int = 4
    codebook_size: int = 16
    n_categories: int = 4
    embed_dim: int = 32
    hidden_dim: int = 64
    n_heads: int = 2
    enc_layers: int = 1
    dec_layers: int = 2
    max_context: int = 50
    category_weight: float = 0.5
    epochs: int = 5
    steps_per_epoch: int = 100
    learning_rate: float = 3e-3
    batch_size: int = 16
    seed: int = 0


@dataclass(frozen=True)
class EncoderMemory:
    states: np.ndarray      # (T, E)
    truncated: bool


@dataclass(frozen=True)
class DecoderState:
    """Immutable decode cursor: encoder memory plus the generated prefix."""

    memory: np.ndarray             # (T, E)
    prefix: tuple[tuple[int, int], ...] = ()

    @property
    def used_codebooks(self) -> frozenset[int]:
        return frozenset(r for r, _ in self.prefix)


class SequenceModel:
    def __init__(self, config: SeqModelConfig):
        self.config = config
        cfg = config
        if cfg.embed_dim % cfg.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        stream = named_stream(cfg.seed, "seqmodel", "init")
        e = cfg.embed_dim
        scale = 1.0 / np.sqrt(e)
        p = self.params = ParamStore()
        for r in range(1, cfg.n_codebooks + 1):
            p.add(f"embed.token{r}.w", stream.normal(size=(cfg.codebook_size, e)) * scale)
        p.add("embed.codebook.w", stream.normal(size=(cfg.n_codebooks, e)) * scale)
        p.add("embed.pos_enc.w", stream.normal(size=(cfg.max_context, e)) * scale)
        p.add("embed.pos_dec.w", stream.normal(size=(cfg.n_codebooks, e)) * scale)
        p.add("embed.bos.w", stream.normal(size=(e,)) * scale)
        for i in range(cfg.enc_layers):
            self._add_attn_block(stream, f"enc.{i}.attn")
            self._add_ffn_block(stream, f"enc.{i}")
        for i in range(cfg.dec_layers):
            self._add_attn_block(stream, f"dec.{i}.self")
            self._add_attn_block(stream, f"dec.{i}.cross")
            self._add_ffn_block(stream, f"dec.{i}")
        for r in range(1, cfg.n_codebooks + 1):
            # zero-init output heads: an untrained model scores uniformly
            p.add(f"head.token{r}.w", np.zeros((e, cfg.codebook_size)))
            p.add(f"head.token{r}.b", np.zeros(cfg.codebook_size))
        p.add("head.cate.w", np.zeros((e, cfg.n_categories)))
        p.add("head.cate.b", np.zeros(cfg.n_categories))

    def _add_attn_block(self, stream, prefix: str) -> None:
        e = self.config.embed_dim
        scale = 1.0 / np.sqrt(e)
        for leaf in ("wq", "wk", "wv", "wo"):
            self.params.add(f"{prefix}.{leaf}", stream.normal(size=(e, e)) * scale)

    def _add_ffn_block(self, stream, prefix: str) -> None:
        e, h = self.config.embed_dim, self.config.hidden_dim
        self.params.add(f"{prefix}.ffn.w1", stream.normal(size=(e, h)) / np.sqrt(e))
        self.params.add(f"{prefix}.ffn.b1", np.zeros(h))
        self.params.add(f"{prefix}.ffn.w2", stream.normal(size=(h, e)) / np.sqrt(h))
        self.params.add(f"{prefix}.ffn.b2", np.zeros(e))
        for ln in ("ln1", "ln2", "ln3") if prefix.startswith("dec") else ("ln1", "ln2"):
            self.params.add(f"{prefix}.{ln}.g", np.ones(e))
            self.params.add(f"{prefix}.{ln}.b", np.zeros(e))

    # -- building blocks (tape) -------------------------------------------

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        xn = xc * ((var + 1e-5) ** -0.5)
        return xn * self.params[f"{prefix}.g"] + self.params[f"{prefix}.b"]

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor,
                   mask: np.ndarray | None) -> Tensor:
        cfg = self.config
        h, dh = cfg.n_heads, cfg.embed_dim // cfg.n_heads
        b, lq = q_in.data.shape[0], q_in.data.shape[1]
        lk = kv_in.data.shape[1]

        def split(x: Tensor, length: int) -> Tensor:
            return x.reshape(b, length, h, dh).swapaxes(1, 2)  # (B, h, L, dh)

        q = split(q_in @ self.params[f"{prefix}.wq"], lq)
        k = split(kv_in @ self.params[f"{prefix}.wk"], lk)
        v = split(kv_in @ self.params[f"{prefix}.wv"], lk)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        if mask is not None:
            scores = add_const(scores, mask)
        attn = softmax_t(scores, axis=-1) @ v                   # (B, h, Lq, dh)
        merged = attn.swapaxes(1, 2).reshape(b, lq, cfg.embed_dim)
        return merged @ self.params[f"{prefix}.wo"]

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return (x @ p[f"{prefix}.ffn.w1"] + p[f"{prefix}.ffn.b1"]).relu() \
            @ p[f"{prefix}.ffn.w2"] + p[f"{prefix}.ffn.b2"]

    # -- embeddings ---------------------------------------------------------

    def _check_tokens(self, token_sets: Sequence[TokenSet]) -> None:
        cfg = self.config
        for ts in token_sets:
            if ts.n_codebooks != cfg.n_codebooks:
                raise ValueError("unknown-token: codebook count mismatch")
            for _, c in ts.tokens:
                if c > cfg.codebook_size:
                    raise ValueError(f"unknown-token: codeword {c} out of vocabulary")

    def _item_embeddings(self, tok_idx: np.ndarray) -> Tensor:
        """Pooled item embeddings from 0-based codeword indices (..., M)."""
        total = None
        for r in range(1, self.config.n_codebooks + 1):
            part = take_rows(self.params[f"embed.token{r}.w"], tok_idx[..., r - 1])
            part = part + self.params["embed.codebook.w"][r - 1]
            total = part if total is None else total + part
        return total

    def embed_token_set(self, tokens: TokenSet) -> np.ndarray:
        """Permutation-invariant pooled embedding of one item's token set."""
        self._check_tokens([tokens])
        with no_grad():
            idx = tokens.as_indices() - 1
            return self._item_embeddings(idx[None, :][None, :]).data[0, 0]

    # -- encoder ------------------------------------------------------------

    def _encode_batch(self, token_idx: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Encoder memory for padded histories.

        token_idx: (B, T, M) 0-based codeword per codebook, pad rows zero.
        """
        b, t, _ = token_idx.shape
        x = self._item_embeddings(token_idx)
        x = x + self.params["embed.pos_enc.w"][:t]
        pad = np.arange(t)[None, :] >= lengths[:, None]          # (B, T)
        key_mask = np.where(pad, _NEG, 0.0)[:, None, None, :]    # (B,1,1,T)
        for i in range(self.config.enc_layers):
            x = self._layer_norm(x + self._attention(f"enc.{i}.attn", x, x, key_mask), f"enc.{i}.ln1")
            x = self._layer_norm(x + self._ffn(x, f"enc.{i}"), f"enc.{i}.ln2")
        return x

    def encode_history(self, seq: UserSequence) -> EncoderMemory:
        """Position-encoded memory over the (possibly truncated) history."""
        self._check_tokens(seq.token_sets)
        cfg = self.config
        token_sets = seq.token_sets
        truncated = len(token_sets) > cfg.max_context
        if truncated:
            token_sets = token_sets[-cfg.max_context:]
        idx = np.stack([ts.as_indices() - 1 for ts in token_sets])[None, :, :]
        with no_grad():
            mem = self._encode_batch(idx, np.array([len(token_sets)]))
        return EncoderMemory(mem.data[0], truncated)

    # -- decoder ------------------------------------------------------------

    def _decode_batch(self, prefix_emb: Tensor, memory: Tensor,
                      mem_mask: np.ndarray | None) -> Tensor:
        """Decoder trunk over embedded prefixes; returns hidden states (B,L,E)."""
        l = prefix_emb.data.shape[1]
        causal = np.where(np.tril(np.ones((l, l), dtype=bool)), 0.0, _NEG)[None, None]
        x = prefix_emb + self.params["embed.pos_dec.w"][:l]
        for i in range(self.config.dec_layers):
            x = self._layer_norm(x + self._attention(f"dec.{i}.self", x, x, causal), f"dec.{i}.ln1")
            x = self._layer_norm(x + self._attention(f"dec.{i}.cross", x, memory, mem_mask), f"dec.{i}.ln2")
            x = self._layer_norm(x + self._ffn(x, f"dec.{i}"), f"dec.{i}.ln3")
        return x

    def _prefix_embeddings(self, prefixes: Sequence[Sequence[tuple[int, int]]]) -> Tensor:
        """BOS followed by embedded (codebook, token) pairs, batched.

        All prefixes must share one length; token tables are concatenated so
        mixed codebooks across the batch reduce to a single flat gather.
        """
        cfg = self.config
        b = len(prefixes)
        lengths = {len(p) for p in prefixes}
        if len(lengths) != 1:
            raise ValueError("prefixes in one batch must share length")
        l = lengths.pop()
        bos = self.params["embed.bos.w"].reshape(1, 1, -1) * Tensor(np.ones((b, 1, 1)))
        if l == 0:
            return bos
        rs = np.array([[r for r, _ in p] for p in prefixes], dtype=np.int64)
        cs = np.array([[c for _, c in p] for p in prefixes], dtype=np.int64)
        flat = concat([self.params[f"embed.token{r}.w"]
                       for r in range(1, cfg.n_codebooks + 1)], axis=0)
        tok = take_rows(flat, (rs - 1) * cfg.codebook_size + (cs - 1))  # (B, L, E)
        tok = tok + take_rows(self.params["embed.codebook.w"], rs - 1)
        return concat([bos, tok], axis=1)

    def start_decode(self, seq: UserSequence) -> DecoderState:
        return DecoderState(self.encode_history(seq).states)

    def step_scores(self, state: DecoderState) -> tuple[list[np.ndarray], np.ndarray]:
        """Logits for every codebook head plus the category distribution.

        All heads read the same hidden state, so the category distribution is
        a property of the step, not of the codebook queried.
        """
        if len(state.prefix) >= self.config.n_codebooks:
            raise ValueError("prefix already complete")
        with no_grad():
            emb = self._prefix_embeddings([state.prefix])
            h = self._decode_batch(emb, Tensor(state.memory[None]), None)
            last = h.data[0, -1]
        logits = [last @ self.params[f"head.token{r}.w"].data
                  + self.params[f"head.token{r}.b"].data
                  for r in range(1, self.config.n_codebooks + 1)]
        cate = softmax(last @ self.params["head.cate.w"].data
                       + self.params["head.cate.b"].data)
        return logits, cate

    def decode_step(self, state: DecoderState, codebook: int) -> tuple[np.ndarray, np.ndarray]:
        """Token logits for one not-yet-used codebook plus category dist."""
        if codebook in state.used_codebooks:
            raise ValueError("codebook-consumed")
        logits, cate = self.step_scores(state)
        return logits[codebook - 1], cate

    def advance(self, state: DecoderState, codebook: int, token: int) -> DecoderState:
        if codebook in state.used_codebooks:
            raise ValueError("codebook-consumed")
        return DecoderState(state.memory, state.prefix + ((codebook, token),))

    # group decoding: one shared memory, G prefixes advancing in lockstep

    def group_step_scores(self, memory: np.ndarray,
                          prefixes: Sequence[Sequence[tuple[int, int]]]
                          ) -> tuple[np.ndarray, np.ndarray]:
        """(G, M, D) head logits and (G, C) category dists for G prefixes."""
        g = len(prefixes)
        with no_grad():
            emb = self._prefix_embeddings(prefixes)
            mem = Tensor(np.broadcast_to(memory[None], (g,) + memory.shape).copy())
            h = self._decode_batch(emb, mem, None)
            last = h.data[:, -1]
        logits = np.stack([last @ self.params[f"head.token{r}.w"].data
                           + self.params[f"head.token{r}.b"].data
                           for r in range(1, self.config.n_codebooks + 1)], axis=1)
        cate = softmax(last @ self.params["head.cate.w"].data
                       + self.params["head.cate.b"].data)
        return logits, cate

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, SEQMODEL_MAGIC, self.params.state_dict(),
                        meta={"config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "SequenceModel":
        arrays, meta = load_checkpoint(path, SEQMODEL_MAGIC)
        model = cls(SeqModelConfig(**meta["config"]))
        model.params.load_state_dict(arrays)
        return model

    def snapshot(self, version: str = "") -> "PolicySnapshot":
        return PolicySnapshot.of(self, version)


@dataclass(frozen=True)
class PolicySnapshot:
    """Frozen copy of model parameters; the reference policy for post-training."""

    model: SequenceModel
    version: str

    @classmethod
    def of(cls, model: SequenceModel, version: str = "") -> "PolicySnapshot":
        frozen = SequenceModel(model.config)
        frozen.params.load_state_dict(model.params.state_dict())
        return cls(frozen, version)


# -- pretraining ---------------------------------------------------------------


@dataclass(frozen=True)
class NextItemExample:
    history: tuple[TokenSet, ...]
    target_tokens: TokenSet
    target_category: int


def training_examples(corpus: Sequence[UserSequence]) -> list[NextItemExample]:
    """All (history prefix -> next item) pairs from the corpus."""
    out = []
    for seq in corpus:
        for t in range(1, len(seq)):
            out.append(NextItemExample(seq.token_sets[:t], seq.token_sets[t],
                                       seq.categories[t]))
    return out


def _pad_histories(model: SequenceModel, histories: Sequence[Sequence[TokenSet]]
                   ) -> tuple[np.ndarray, np.ndarray]:
    cfg = model.config
    clipped = [h[-cfg.max_context:] for h in histories]
    lengths = np.array([len(h) for h in clipped])
    t_max = int(lengths.max())
    idx = np.zeros((len(clipped), t_max, cfg.n_codebooks), dtype=np.int64)
    for i, h in enumerate(clipped):
        for t, ts in enumerate(h):
            idx[i, t] = ts.as_indices() - 1
    return idx, lengths


def pretrain_loss_tape(model: SequenceModel, batch: Sequence[NextItemExample]
                       ) -> dict[str, Tensor]:
    """Teacher-forced loss in canonical codebook order 1..M.

    token part: sum over codebooks of next-token NLL; category part: NLL of
    the target item's category at every decoding step, weighted by
    ``category_weight``. Both averaged over the batch.
    """
    cfg = model.config
    for ex in batch:
        model._check_tokens(list(ex.history) + [ex.target_tokens])
    tok_idx, lengths = _pad_histories(model, [ex.history for ex in batch])
    memory = model._encode_batch(tok_idx, lengths)
    t_max = tok_idx.shape[1]
    pad = np.arange(t_max)[None, :] >= lengths[:, None]
    mem_mask = np.where(pad, _NEG, 0.0)[:, None, None, :]

    # teacher forcing: BOS + tokens of codebooks 1..M-1 in canonical order
    prefixes = [[(r, ex.target_tokens.codeword(r)) for r in range(1, cfg.n_codebooks)]
                for ex in batch]
    h = model._decode_batch(model._prefix_embeddings(prefixes), memory, mem_mask)

    token_loss = None
    for r in range(1, cfg.n_codebooks + 1):
        logits = h[:, r - 1] @ model.params[f"head.token{r}.w"] + model.params[f"head.token{r}.b"]
        logp = log_softmax_t(logits, axis=-1)
        targets = np.array([ex.target_tokens.codeword(r) - 1 for ex in batch])
        nll = -gather_last(logp, targets)
        token_loss = nll if token_loss is None else token_loss + nll

    cate_logits = h @ model.params["head.cate.w"] + model.params["head.cate.b"]
    cate_logp = log_softmax_t(cate_logits, axis=-1)
    cate_targets = np.repeat(np.array([ex.target_category for ex in batch])[:, None],
                             cfg.n_codebooks, axis=1)
    cate_loss = (-gather_last(cate_logp, cate_targets)).sum(axis=1)

    token_mean = token_loss.mean()
    cate_mean = cate_loss.mean()
    total = token_mean + cate_mean * cfg.category_weight
    return {"token": token_mean, "cate": cate_mean, "total": total}


@dataclass
class PretrainResult:
    model: SequenceModel
    metrics: list[dict] = field(default_factory=list)  # per-epoch rows


def pretrain(corpus: Sequence[UserSequence], config: SeqModelConfig) -> PretrainResult:
    """Fit next-item token prediction plus the auxiliary category head."""
    examples = training_examples(corpus)
    if not examples:
        raise ValueError("empty corpus: no trainable (history, next-item) pairs")
    model = SequenceModel(config)
    opt = Adam(model.params, lr=config.learning_rate)
    stream = named_stream(config.seed, "seqmodel", "pretrain")
    result = PretrainResult(model)
    for epoch in range(config.epochs):
        tok_sum = cate_sum = tot_sum = 0.0
        for _ in range(config.steps_per_epoch):
            pick = stream.integers(len(examples), size=min(config.batch_size, len(examples)))
            batch = [examples[i] for i in pick]
            losses = pretrain_loss_tape(model, batch)
            if not np.isfinite(losses["total"].item()):
                raise ValueError("pretrain-diverged")
            model.params.zero_grad()
            losses["total"].backward()
            opt.step()
            tok_sum += losses["token"].item()
            cate_sum += losses["cate"].item()
            tot_sum += losses["total"].item()
        n = config.steps_per_epoch
        result.metrics.append({"epoch": epoch, "token_loss": tok_sum / n,
                               "cate_loss": cate_sum / n, "total": tot_sum / n})
    return result


def token_accuracy(model: SequenceModel, corpus: Sequence[UserSequence]) -> float:
    """Teacher-forced next-token accuracy in canonical order."""
    examples = training_examples(corpus)
    hits = total = 0
    for ex in examples:
        tok_idx, lengths = _pad_histories(model, [ex.history])
        with no_grad():
            memory = model._encode_batch(tok_idx, lengths)
            prefix = [(r, ex.target_tokens.codeword(r))
                      for r in range(1, model.config.n_codebooks)]
            h = model._decode_batch(model._prefix_embeddings([prefix]), memory, None)
        for r in range(1, model.config.n_codebooks + 1):
            logits = h.data[0, r - 1] @ model.params[f"head.token{r}.w"].data \
                + model.params[f"head.token{r}.b"].data
            hits += int(np.argmax(logits) == ex.target_tokens.codeword(r) - 1)
            total += 1
    return hits / total
