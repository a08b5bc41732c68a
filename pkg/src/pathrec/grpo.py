"""Reward-aligned post-training with group-relative policy optimization.

For each user context, G paths are sampled from a frozen snapshot of the
policy; their rewards are standardized within the group to form advantages,
and the policy ascends a clipped importance-ratio surrogate. A path's
log-probability is the sum of its tokens' log-probabilities within their
codebooks; the codebook ordering is treated as a deterministic function of
the sampled tokens and contributes no extra factor, which keeps the ratio
computable under both policies.

The displayed surrogate carries an explicit KL penalty toward the snapshot
policy, estimated exactly on the visited decision distributions; its
coefficient defaults to a small positive value and zero disables it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .decoding import (
    COMPLETE,
    PathStep,
    ReasoningPath,
    RetrievalIndex,
    generate_with_reflection,
)
from .numerics import (
    Adam,
    Tensor,
    gather_last,
    log_softmax_t,
    minimum,
    named_stream,
    no_grad,
    softmax,
    softmax_t,
)
from .rewards import FutureWindow, RewardBreakdown, RewardConfig, RewardTarget, total_reward
from .seqmodel import PolicySnapshot, SequenceModel, UserSequence

ADV_EPS = 1e-8
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ReflectionSettings:
    threshold: float = 0.06
    stride: int = 1
    retry_budget: int = 2
    max_attempts: int = 25  # resampling cap before falling back to a plain sample


@dataclass(frozen=True)
class RolloutGroup:
    context: UserSequence
    paths: tuple[ReasoningPath, ...]
    old_logps: np.ndarray                       # (G,)
    old_dists: tuple[tuple[np.ndarray, ...], ...]  # per path, per step
    rewards: np.ndarray | None = None
    breakdowns: tuple[RewardBreakdown, ...] | None = None

    @property
    def size(self) -> int:
        return len(self.paths)


def path_log_prob(model: SequenceModel, memory: np.ndarray, path: ReasoningPath
                  ) -> tuple[float, list[np.ndarray]]:
    """Recompute a path's log-probability and per-step token distributions."""
    logp = 0.0
    dists = []
    prefix: list[tuple[int, int]] = []
    for step in path.steps:
        logits, _ = model.group_step_scores(memory, [prefix])
        probs = softmax(logits[0, step.codebook - 1])
        logp += float(np.log(max(probs[step.token - 1], PROB_FLOOR)))
        dists.append(probs)
        prefix.append((step.codebook, step.token))
    return logp, dists


def _sample_batch(model: SequenceModel, memory: np.ndarray, group_size: int,
                  stream) -> tuple[list[ReasoningPath], np.ndarray, list[list[np.ndarray]]]:
    m = model.config.n_codebooks
    prefixes: list[list[tuple[int, int]]] = [[] for _ in range(group_size)]
    actives = [set(range(1, m + 1)) for _ in range(group_size)]
    steps: list[list[PathStep]] = [[] for _ in range(group_size)]
    logps = np.zeros(group_size)
    dists: list[list[np.ndarray]] = [[] for _ in range(group_size)]
    for _ in range(m):
        logits, cates = model.group_step_scores(memory, prefixes)
        for g in range(group_size):
            best = None  # (conf, codebook, token, probs)
            for r in sorted(actives[g]):
                row = logits[g, r - 1]
                if not np.all(np.isfinite(row)):
                    continue
                probs = softmax(row)
                cum = np.cumsum(probs)
                tok = int(np.searchsorted(cum, stream.random() * cum[-1], side="right"))
                tok = min(tok, probs.size - 1)
                if probs[tok] <= 0.0:  # boundary hit on an underflowed bucket
                    tok = int(np.argmax(probs))
                if best is None or probs[tok] > best[0]:
                    best = (float(probs[tok]), r, tok + 1, probs)
            if best is None:
                raise ValueError("decode-failure: group sampling aborted")
            conf, r, c, probs = best
            prefixes[g].append((r, c))
            actives[g].remove(r)
            steps[g].append(PathStep(r, c, conf, cates[g].copy()))
            logps[g] += float(np.log(max(conf, PROB_FLOOR)))
            dists[g].append(probs)
    paths = [ReasoningPath(tuple(s), frozenset(), COMPLETE) for s in steps]
    return paths, logps, dists


def sample_group(seq: UserSequence, snapshot: PolicySnapshot, group_size: int,
                 stream, reward_fn: Callable[[ReasoningPath], tuple[float, RewardBreakdown]] | None = None,
                 reflection: ReflectionSettings | None = None) -> RolloutGroup:
    """Sample G complete paths from the snapshot policy.

    With reflection enabled, pruned paths are resampled under fresh
    substreams until the group is full (advantages over a mixed
    alive/pruned group would be ill-defined).
    """
    if group_size < 2:
        raise ValueError("group size must be >= 2")
    model = snapshot.model
    with no_grad():
        memory = model.encode_history(seq).states
    if reflection is None:
        paths, logps, dists = _sample_batch(model, memory, group_size, stream)
    else:
        paths = []
        for _ in range(group_size):
            path = None
            for _ in range(reflection.max_attempts):
                candidate = generate_with_reflection(
                    seq, model, reflection.threshold, reflection.stride,
                    reflection.retry_budget, stream.spawn(1)[0], mode="sample")
                if candidate.complete:
                    path = candidate
                    break
            if path is None:
                # persistent pruning: keep the group full with a plain sample
                only, _, _ = _sample_batch(model, memory, 2, stream.spawn(1)[0])
                path = only[0]
            paths.append(path)
        recomputed = [path_log_prob(model, memory, p) for p in paths]
        logps = np.array([lp for lp, _ in recomputed])
        dists = [d for _, d in recomputed]
    group = RolloutGroup(seq, tuple(paths), logps, tuple(tuple(d) for d in dists))
    if reward_fn is not None:
        scored = [reward_fn(p) for p in paths]
        group = replace(group, rewards=np.array([r for r, _ in scored]),
                        breakdowns=tuple(b for _, b in scored))
    return group


def advantages(rewards: Sequence[float]) -> np.ndarray:
    """Within-group standardization: (r - mean) / (population std + 1e-8)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages need a group of size >= 2")
    return (r - r.mean()) / (r.std() + ADV_EPS)


@dataclass
class ClippedObjective:
    objective: Tensor              # scalar, to ascend
    ratios: np.ndarray             # (G,)
    surrogates: np.ndarray         # (G,) selected min(...) values
    unclipped: np.ndarray          # (G,) ratio * advantage
    clipped_selected: np.ndarray   # (G,) bool: min picked the clipped branch
    kl: float
    skipped: np.ndarray            # (G,) bool: non-finite ratio, excluded


def clipped_objective(group: RolloutGroup, policy: SequenceModel,
                      epsilon: float, kl_beta: float,
                      adv: np.ndarray | None = None) -> ClippedObjective:
    """Mean of min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) minus KL penalty.

    Ratios compare the current policy's path log-probabilities against the
    snapshot values recorded at sampling time; the KL term is computed on
    the sampled decision distributions, old side held constant.
    """
    if not (0.0 < epsilon):
        raise ValueError("epsilon must be positive")
    if kl_beta < 0:
        raise ValueError("kl_beta must be nonnegative")
    if group.rewards is None and adv is None:
        raise ValueError("group has no rewards; pass advantages explicitly")
    a = advantages(group.rewards) if adv is None else np.asarray(adv, dtype=np.float64)

    cfg = policy.config
    m = cfg.n_codebooks
    g_n = group.size
    # teacher-forced recompute along each path's own codebook order
    hist_idx = np.stack([ts.as_indices() - 1 for ts in group.context.token_sets])
    hist_idx = hist_idx[-cfg.max_context:][None]
    memory1 = policy._encode_batch(hist_idx, np.array([hist_idx.shape[1]]))
    memory = memory1 * Tensor(np.ones((g_n, 1, 1)))
    prefixes = [[(s.codebook, s.token) for s in p.steps[:-1]] for p in group.paths]
    h = policy._decode_batch(policy._prefix_embeddings(prefixes), memory, None)

    head_idx = np.array([[s.codebook for s in p.steps] for p in group.paths])   # (G, M)
    tok_idx = np.array([[s.token - 1 for s in p.steps] for p in group.paths])   # (G, M)
    sel = None
    for r in range(1, m + 1):
        logits_r = h @ policy.params[f"head.token{r}.w"] + policy.params[f"head.token{r}.b"]
        mask = (head_idx == r).astype(np.float64)[:, :, None]
        term = logits_r * Tensor(mask)
        sel = term if sel is None else sel + term
    logp_tok = log_softmax_t(sel, axis=-1)          # (G, M, D)
    logp = gather_last(logp_tok, tok_idx).sum(axis=1)  # (G,)

    ratio = (logp - Tensor(group.old_logps)).exp()
    finite = np.isfinite(ratio.data)
    if not finite.any():
        raise ValueError("ratio-overflow: all paths skipped")
    keep = Tensor(finite.astype(np.float64))
    adv_t = Tensor(a)
    unclipped = ratio * adv_t
    clipped = ratio.clip(1.0 - epsilon, 1.0 + epsilon) * adv_t
    surrogate = minimum(unclipped, clipped)
    surr_mean = (surrogate * keep).sum() * (1.0 / float(finite.sum()))

    probs = softmax_t(sel, axis=-1)
    old = np.stack([np.stack(d) for d in group.old_dists])  # (G, M, D)
    log_old = np.log(np.maximum(old, PROB_FLOOR))
    kl_terms = (probs * (logp_tok - Tensor(log_old))).sum(axis=-1)  # (G, M)
    kl_mean = (kl_terms * keep.reshape(-1, 1)).sum() * (1.0 / (float(finite.sum()) * m))

    objective = surr_mean - kl_mean * kl_beta
    return ClippedObjective(
        objective=objective,
        ratios=ratio.data.copy(),
        surrogates=surrogate.data.copy(),
        unclipped=unclipped.data.copy(),
        clipped_selected=clipped.data < unclipped.data,
        kl=float(kl_mean.item()),
        skipped=~finite,
    )


@dataclass
class PostTrainConfig:
    iterations: int = 50
    users_per_iter: int = 8
    group_size: int = 8
    epsilon: float = 0.15
    kl_beta: float = 0.01
    snapshot_every: int = 5
    learning_rate: float = 1e-3
    seed: int = 0
    reward: RewardConfig = field(default_factory=RewardConfig)
    reflection: ReflectionSettings | None = None


@dataclass
class PostTrainResult:
    model: SequenceModel
    log: list[dict] = field(default_factory=list)          # per-iteration rows
    reward_trace: list[dict] = field(default_factory=list)  # per-rollout rows


def _target_and_window(seq: UserSequence, cut: int, cfg: RewardConfig
                       ) -> tuple[RewardTarget, FutureWindow | None]:
    horizon = min(cfg.horizon, len(seq) - cut) if cfg.multi_step else 1
    items = tuple(RewardTarget(seq.item_ids[t], seq.token_sets[t], seq.categories[t])
                  for t in range(cut, cut + horizon))
    window = FutureWindow(items, cfg.decay) if cfg.multi_step else None
    return items[0], window


def policy_update(model: SequenceModel, corpus: Sequence[UserSequence],
                  index: RetrievalIndex, config: PostTrainConfig,
                  precision=None) -> PostTrainResult:
    """Alternate snapshot refreshes and clipped-surrogate ascent steps."""
    usable = [seq for seq in corpus if len(seq) >= 2]
    if not usable:
        raise ValueError("post-training corpus has no sequences with a target")
    stream = named_stream(config.seed, "posttrain")
    opt = Adam(model.params, lr=config.learning_rate)
    result = PostTrainResult(model)
    snapshot = model.snapshot("iter0")
    step = 0
    for it in range(config.iterations):
        if it > 0 and it % config.snapshot_every == 0:
            snapshot = model.snapshot(f"iter{it}")
        picks = stream.choice(len(usable), size=config.users_per_iter,
                              replace=len(usable) < config.users_per_iter)
        objective = None
        reward_sum = np.zeros(5)  # step, cate, js, path, total
        kl_sum = 0.0
        n_rollouts = 0
        for u in picks:
            seq = usable[int(u)]
            cut = int(stream.integers(1, len(seq)))
            context = seq.prefix(cut)
            target, window = _target_and_window(seq, cut, config.reward)

            def reward_fn(path):
                br = total_reward(path, target, window, index, config.reward)
                return br.total, br

            group = sample_group(context, snapshot, config.group_size,
                                 stream.spawn(1)[0], reward_fn, config.reflection)
            adv = advantages(group.rewards)
            obj = clipped_objective(group, model, config.epsilon, config.kl_beta, adv)
            objective = obj.objective if objective is None else objective + obj.objective
            kl_sum += obj.kl
            for br in group.breakdowns:
                reward_sum += (br.step_hit, br.category_hit, br.consistency,
                               br.path_hit, br.total)
                n_rollouts += 1
                result.reward_trace.append({
                    "iter": it, "user": seq.user_id,
                    "step_hit": br.step_hit, "category_hit": br.category_hit,
                    "consistency": br.consistency, "path_hit": br.path_hit,
                    "step_hit_w": br.windowed_step_hit,
                    "category_hit_w": br.windowed_category_hit,
                    "path_hit_w": br.windowed_path_hit,
                    "total": br.total,
                })
        loss = objective * (-1.0 / config.users_per_iter)
        if not np.isfinite(loss.item()):
            raise ValueError("posttrain-diverged")
        model.params.zero_grad()
        loss.backward()
        if precision is not None:
            precision.after_backward(model.params, step)
        opt.step()
        if precision is not None:
            precision.after_step(model.params)
        step += 1
        means = reward_sum / max(n_rollouts, 1)
        result.log.append({
            "iter": it, "mean_reward": means[4], "step_hit": means[0],
            "category_hit": means[1], "consistency": means[2], "path_hit": means[3],
            "kl": kl_sum / config.users_per_iter, "objective": -loss.item(),
        })
    return result
