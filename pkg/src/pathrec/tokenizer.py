"""Multi-codebook item tokenizer.

Items are encoded by M parallel expert encoders, each owning a codebook of D
codewords. Every expert projects the item feature vector into latent space
and picks its nearest codeword (L2), so each item becomes an unordered set
of M (codebook, codeword) tokens. A softmax gate mixes the selected
codewords into a single vector that a shared decoder reconstructs from.

Codebook and codeword indices are 1-based everywhere in the public API and
in the token-map file format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .numerics import Adam, ParamStore, Tensor, named_stream, no_grad, softmax, softmax_t


@dataclass(frozen=True)
class TokenSet:
    """Exactly one (codebook, codeword) token per codebook; set semantics."""

    tokens: tuple[tuple[int, int], ...]

    def __init__(self, tokens: Iterable[tuple[int, int]], codebook_size: int | None = None):
        pairs = sorted((int(r), int(c)) for r, c in tokens)
        m = len(pairs)
        if [r for r, _ in pairs] != list(range(1, m + 1)):
            raise ValueError("token set must cover codebooks 1..M exactly once")
        for r, c in pairs:
            if c < 1 or (codebook_size is not None and c > codebook_size):
                raise ValueError(f"codeword index {c} out of range for codebook {r}")
        object.__setattr__(self, "tokens", tuple(pairs))

    @property
    def n_codebooks(self) -> int:
        return len(self.tokens)

    def codeword(self, codebook: int) -> int:
        return self.tokens[codebook - 1][1]

    def as_indices(self) -> np.ndarray:
        """Codeword index per codebook in canonical order, shape (M,)."""
        return np.array([c for _, c in self.tokens], dtype=np.int64)


@dataclass
class TokenizerConfig:
    n_codebooks: int = 4
    codebook_size: int = 16
    feature_dim: int = 32
    latent_dim: int = 16
    orth_weight: float = 0.001  # contribution of the projection-orthogonality loss
    commit_weight: float = 0.25
    ema_decay: float = 0.99
    epochs: int = 30
    learning_rate: float = 1e-2
    batch_size: int = 64
    seed: int = 0
    kmeans_init: bool = True


class ItemTokenizer:
    """Trainable tokenizer model: M expert encoders, gate, shared decoder."""

    def __init__(self, config: TokenizerConfig):
        self.config = config
        cfg = config
        stream = named_stream(cfg.seed, "tokenizer", "init")
        scale_e = 1.0 / np.sqrt(cfg.feature_dim)
        scale_d = 1.0 / np.sqrt(cfg.latent_dim)
        self.params = ParamStore()
        for r in range(1, cfg.n_codebooks + 1):
            self.params.add(f"expert.{r}.w", stream.normal(size=(cfg.feature_dim, cfg.latent_dim)) * scale_e)
            self.params.add(f"expert.{r}.b", np.zeros(cfg.latent_dim))
        self.params.add("gate.w", stream.normal(size=(cfg.feature_dim, cfg.n_codebooks)) * scale_e)
        self.params.add("gate.b", np.zeros(cfg.n_codebooks))
        self.params.add("decoder.w", stream.normal(size=(cfg.latent_dim, cfg.feature_dim)) * scale_d)
        self.params.add("decoder.b", np.zeros(cfg.feature_dim))
        self.codebooks: list[np.ndarray] = [
            stream.normal(size=(cfg.codebook_size, cfg.latent_dim)) * scale_d
            for _ in range(cfg.n_codebooks)
        ]

    # -- plain-array forward pieces ----------------------------------------

    def expert_latents(self, features: np.ndarray) -> np.ndarray:
        """Latents per expert, shape (M, latent_dim) or (M, B, latent_dim)."""
        v = np.asarray(features, dtype=np.float64)
        outs = []
        for r in range(1, self.config.n_codebooks + 1):
            outs.append(v @ self.params[f"expert.{r}.w"].data + self.params[f"expert.{r}.b"].data)
        return np.stack(outs, axis=0)

    def gate_weights(self, features: np.ndarray) -> np.ndarray:
        v = np.asarray(features, dtype=np.float64)
        return softmax(v @ self.params["gate.w"].data + self.params["gate.b"].data)

    def decode(self, q: np.ndarray) -> np.ndarray:
        return np.asarray(q, dtype=np.float64) @ self.params["decoder.w"].data + self.params["decoder.b"].data

    def projections(self) -> list[np.ndarray]:
        return [self.params[f"expert.{r}.w"].data for r in range(1, self.config.n_codebooks + 1)]


def quantize_nearest(latent: np.ndarray, codebook: np.ndarray) -> tuple[int, float]:
    """Index (1-based) of the L2-nearest codeword and its distance.

    Ties break toward the lowest index (argmin takes the first minimum).
    """
    cb = np.asarray(codebook, dtype=np.float64)
    if cb.ndim != 2 or cb.shape[0] == 0:
        raise ValueError("empty-codebook")
    lat = np.asarray(latent, dtype=np.float64)
    if lat.shape != cb.shape[1:]:
        raise ValueError(f"latent dim {lat.shape} does not match codeword dim {cb.shape[1:]}")
    d2 = ((cb - lat) ** 2).sum(axis=1)
    j = int(np.argmin(d2))
    return j + 1, float(np.sqrt(d2[j]))


@dataclass(frozen=True)
class EncodedItem:
    token_set: TokenSet
    gates: np.ndarray       # (M,), nonnegative, sums to 1
    mixed: np.ndarray       # gate-weighted sum of the selected codewords


def encode_item(features: np.ndarray, model: ItemTokenizer) -> EncodedItem:
    """Tokenize one item: nearest codeword per expert, gate-mixed vector."""
    v = np.asarray(features, dtype=np.float64)
    if v.ndim != 1 or not np.all(np.isfinite(v)):
        raise ValueError("invalid-features")
    latents = model.expert_latents(v)
    gates = model.gate_weights(v)
    pairs = []
    selected = []
    for r in range(1, model.config.n_codebooks + 1):
        c, _ = quantize_nearest(latents[r - 1], model.codebooks[r - 1])
        pairs.append((r, c))
        selected.append(model.codebooks[r - 1][c - 1])
    mixed = np.einsum("r,rl->l", gates, np.stack(selected))
    return EncodedItem(TokenSet(pairs, model.config.codebook_size), gates, mixed)


def recon_loss(features: np.ndarray, mixed: np.ndarray, decoder) -> float:
    """Squared L2 reconstruction error ||v - decoder(q)||^2."""
    v = np.asarray(features, dtype=np.float64)
    recon = np.asarray(decoder(mixed), dtype=np.float64)
    if recon.shape != v.shape:
        raise ValueError("decoder-shape")
    return float(((v - recon) ** 2).sum())


def orth_loss(projections: list[np.ndarray]) -> float:
    """Frobenius deviation of the normalized concatenated projections from I."""
    shapes = {w.shape for w in projections}
    if len(shapes) != 1:
        raise ValueError("projection shapes disagree")
    w_bar = np.concatenate([np.asarray(w, dtype=np.float64) for w in projections], axis=1)
    norms = np.linalg.norm(w_bar, axis=0)
    if np.any(norms == 0.0):
        raise ValueError("degenerate-projection")
    w_bar = w_bar / norms
    gram = w_bar.T @ w_bar
    eye = np.eye(gram.shape[0])
    return float(((gram - eye) ** 2).sum())


def total_loss(features: np.ndarray, model: ItemTokenizer, orth_weight: float) -> float:
    """Reconstruction loss plus weighted orthogonality loss for one item."""
    if orth_weight < 0:
        raise ValueError("orth_weight must be nonnegative")
    enc = encode_item(features, model)
    return recon_loss(features, enc.mixed, model.decode) + orth_weight * orth_loss(model.projections())


# -- differentiable training objective --------------------------------------


def _selections_for_batch(model: ItemTokenizer, batch: np.ndarray) -> np.ndarray:
    """Nearest-codeword indices (0-based) per expert, shape (M, B)."""
    latents = model.expert_latents(batch)  # (M, B, L)
    out = np.empty((model.config.n_codebooks, batch.shape[0]), dtype=np.int64)
    for r in range(model.config.n_codebooks):
        d2 = ((latents[r][:, None, :] - model.codebooks[r][None, :, :]) ** 2).sum(-1)
        out[r] = d2.argmin(axis=1)
    return out


def batch_loss_tape(model: ItemTokenizer, batch: np.ndarray, selections: np.ndarray,
                    orth_weight: float, commit_weight: float,
                    ste_consts: list[np.ndarray] | None = None) -> dict[str, Tensor]:
    """Build the differentiable training loss for a batch.

    Codeword choice is held fixed (``selections``); the mixed vector uses the
    straight-through surrogate q = e + const(z - e), so gradients reach the
    experts and the gate while codewords themselves are EMA-updated outside
    the tape. ``ste_consts`` pins the surrogate constant to values captured
    at a base point, which a finite-difference check needs (otherwise the
    constant would move with the perturbed parameters). Returns recon / orth
    / commit pieces plus the total.
    """
    cfg = model.config
    v = Tensor(batch)
    m = cfg.n_codebooks
    mixed_parts = []
    commit_terms = []
    for r in range(1, m + 1):
        w = model.params[f"expert.{r}.w"]
        b = model.params[f"expert.{r}.b"]
        e_r = v @ w + b  # (B, L)
        z_sel = model.codebooks[r - 1][selections[r - 1]]  # (B, L)
        const = ste_consts[r - 1] if ste_consts is not None else z_sel - e_r.data
        ste = e_r + Tensor(const)  # value z, gradient to e
        mixed_parts.append(ste)
        commit_terms.append(((e_r - Tensor(z_sel)) ** 2.0).sum(axis=1))
    gates_logits = v @ model.params["gate.w"] + model.params["gate.b"]
    gates = softmax_t(gates_logits)  # (B, M)
    stacked = None
    for r in range(m):
        contrib = mixed_parts[r] * gates[:, r].reshape(-1, 1)
        stacked = contrib if stacked is None else stacked + contrib
    recon = stacked @ model.params["decoder.w"] + model.params["decoder.b"]
    recon_term = ((v - recon) ** 2.0).sum(axis=1).mean()

    w_cat = concat_projections(model)
    col_norm = ((w_cat ** 2.0).sum(axis=0, keepdims=True) + 0.0) ** 0.5
    w_bar = w_cat * (col_norm ** -1.0)
    gram = w_bar.T @ w_bar
    eye = np.eye(gram.data.shape[0])
    orth_term = ((gram - Tensor(eye)) ** 2.0).sum()

    commit = None
    for term in commit_terms:
        commit = term if commit is None else commit + term
    commit_term = commit.mean()

    total = recon_term + orth_term * orth_weight + commit_term * commit_weight
    return {"recon": recon_term, "orth": orth_term, "commit": commit_term, "total": total}


def concat_projections(model: ItemTokenizer) -> Tensor:
    from .numerics import concat

    ws = [model.params[f"expert.{r}.w"] for r in range(1, model.config.n_codebooks + 1)]
    return concat(ws, axis=1)


# -- training ----------------------------------------------------------------


def _kmeans(points: np.ndarray, k: int, stream: np.random.Generator, iters: int = 15) -> np.ndarray:
    idx = stream.choice(points.shape[0], size=k, replace=False)
    centers = points[idx].copy()
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(axis=1)
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
    return centers


@dataclass
class TokenizerTraining:
    model: ItemTokenizer
    loss_curve: list[float] = field(default_factory=list)


def mean_total_loss(model: ItemTokenizer, features: np.ndarray) -> float:
    return float(np.mean([total_loss(v, model, model.config.orth_weight) for v in features]))


def train_tokenizer(items: Mapping[str, np.ndarray] | np.ndarray,
                    config: TokenizerConfig) -> TokenizerTraining:
    """Fit the tokenizer on an item corpus; records mean loss per epoch."""
    if isinstance(items, Mapping):
        if not items:
            raise ValueError("empty corpus")
        feats = np.stack([np.asarray(items[k], dtype=np.float64) for k in sorted(items)])
    else:
        feats = np.asarray(items, dtype=np.float64)
    if feats.size == 0:
        raise ValueError("empty corpus")
    if feats.shape[1] != config.feature_dim:
        raise ValueError(f"feature dim {feats.shape[1]} != config.feature_dim {config.feature_dim}")

    model = ItemTokenizer(config)
    cfg = config
    stream = named_stream(cfg.seed, "tokenizer", "train")

    first = feats[:min(len(feats), max(cfg.batch_size, cfg.codebook_size))]
    latents = model.expert_latents(first)  # (M, B, L)
    for r in range(cfg.n_codebooks):
        if cfg.kmeans_init and first.shape[0] >= cfg.codebook_size:
            model.codebooks[r] = _kmeans(latents[r], cfg.codebook_size,
                                         named_stream(cfg.seed, "tokenizer", "kmeans", r))
        else:
            raw = named_stream(cfg.seed, "tokenizer", "cbinit", r).normal(
                size=(cfg.codebook_size, cfg.latent_dim))
            model.codebooks[r] = raw / np.linalg.norm(raw, axis=1, keepdims=True)

    ema_count = [np.ones(cfg.codebook_size) for _ in range(cfg.n_codebooks)]
    ema_sum = [model.codebooks[r] * ema_count[r][:, None] for r in range(cfg.n_codebooks)]

    opt = Adam(model.params, lr=cfg.learning_rate)
    training = TokenizerTraining(model)
    training.loss_curve.append(mean_total_loss(model, feats))  # at-init value
    n = feats.shape[0]

    for epoch in range(cfg.epochs):
        order = stream.permutation(n)
        used = np.zeros((cfg.n_codebooks, cfg.codebook_size), dtype=bool)
        epoch_latents: list[np.ndarray] | None = None
        for start in range(0, n, cfg.batch_size):
            batch = feats[order[start:start + cfg.batch_size]]
            with no_grad():
                selections = _selections_for_batch(model, batch)
            losses = batch_loss_tape(model, batch, selections,
                                     cfg.orth_weight, cfg.commit_weight)
            if not np.isfinite(losses["total"].item()):
                raise ValueError("tokenizer-diverged")
            model.params.zero_grad()
            losses["total"].backward()
            opt.step()

            # EMA codeword update from the (pre-step) batch latents
            with no_grad():
                latents = model.expert_latents(batch)
            decay = cfg.ema_decay
            for r in range(cfg.n_codebooks):
                onehot = np.zeros((batch.shape[0], cfg.codebook_size))
                onehot[np.arange(batch.shape[0]), selections[r]] = 1.0
                counts = onehot.sum(axis=0)
                sums = onehot.T @ latents[r]
                ema_count[r] = decay * ema_count[r] + (1 - decay) * counts
                ema_sum[r] = decay * ema_sum[r] + (1 - decay) * sums
                model.codebooks[r] = ema_sum[r] / np.maximum(ema_count[r][:, None], 1e-8)
                used[r][selections[r]] = True
            epoch_latents = [latents[r] for r in range(cfg.n_codebooks)] if epoch_latents is None else [
                np.concatenate([epoch_latents[r], latents[r]]) for r in range(cfg.n_codebooks)]

        # reseed codewords unused for the whole epoch to a random encoder output
        reseed = named_stream(cfg.seed, "tokenizer", "reseed", epoch)
        for r in range(cfg.n_codebooks):
            dead = np.flatnonzero(~used[r])
            for j in dead:
                pick = epoch_latents[r][reseed.integers(epoch_latents[r].shape[0])]
                model.codebooks[r][j] = pick
                ema_sum[r][j] = pick
                ema_count[r][j] = 1.0

        training.loss_curve.append(mean_total_loss(model, feats))
        if not np.isfinite(training.loss_curve[-1]):
            raise ValueError("tokenizer-diverged")
    return training


# -- persistence ---------------------------------------------------------------

TOKENIZER_MAGIC = b"MPQ1"


def save_tokenizer(model: ItemTokenizer, path) -> None:
    from dataclasses import asdict

    from .checkpoint import save_checkpoint

    arrays = model.params.state_dict()
    for r, cb in enumerate(model.codebooks, start=1):
        arrays[f"codebook.{r}"] = cb
    save_checkpoint(path, TOKENIZER_MAGIC, arrays, meta={"config": asdict(model.config)})


def load_tokenizer(path) -> ItemTokenizer:
    from .checkpoint import load_checkpoint

    arrays, meta = load_checkpoint(path, TOKENIZER_MAGIC)
    model = ItemTokenizer(TokenizerConfig(**meta["config"]))
    model.codebooks = [arrays.pop(f"codebook.{r}")
                       for r in range(1, model.config.n_codebooks + 1)]
    model.params.load_state_dict(arrays)
    return model


# -- token-map file -----------------------------------------------------------


def export_tokens(model: ItemTokenizer, items: Mapping[str, np.ndarray], path: str | Path) -> None:
    """Write one JSON record per item: {"item", "tokens", "gates"}."""
    path = Path(path)
    with path.open("w") as fh:
        for item_id in sorted(items):
            enc = encode_item(np.asarray(items[item_id], dtype=np.float64), model)
            rec = {
                "item": item_id,
                "tokens": [[r, c] for r, c in enc.token_set.tokens],
                "gates": [float(g) for g in enc.gates],
            }
            fh.write(json.dumps(rec) + "\n")


def load_tokens(path: str | Path) -> dict[str, tuple[TokenSet, np.ndarray]]:
    out: dict[str, tuple[TokenSet, np.ndarray]] = {}
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out[rec["item"]] = (
                TokenSet([(r, c) for r, c in rec["tokens"]]),
                np.array(rec["gates"], dtype=np.float64),
            )
    return out
