"""Evaluation protocols: grouped pairwise accuracy, rank correlation, policy returns,
and reward labeling of choice-only sessions."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .datasets import PairGroup, RankedList, SequentialSession, parallel_map, stream_rng
from .emtrainer import PairwiseObjective, pairwise_arrays
from .usermodel import UserModel, posterior_from_loglik
from .world import Vocabulary, embed_prompt

STREAM_RANK_EVAL = 11
STREAM_POLICY_EVAL = 12


# ---------------------------------------------------------------------------
# accuracy
# ---------------------------------------------------------------------------

def split_group(group: PairGroup) -> tuple[list, list]:
    """First half of a rater's comparisons for the posterior, the rest for scoring."""
    half = (len(group.pairs) + 1) // 2
    return group.pairs[:half], group.pairs[half:]


def pair_correct(gap: np.ndarray, labels, tie_threshold: float) -> np.ndarray:
    """1 where the scores reproduce the label. ``gap`` is ``(n, K)`` of ``s_a - s_b``."""
    out = np.zeros_like(gap)
    for i, lab in enumerate(labels):
        if lab == "a":
            out[i] = gap[i] > 0
        elif lab == "b":
            out[i] = gap[i] < 0
        else:
            out[i] = np.abs(gap[i]) < tie_threshold
    return out


def pickapic_accuracy(model: UserModel, vocab: Vocabulary, groups: list[PairGroup],
                      tie_threshold: float = 0.1, return_details: bool = False):
    """Posterior-weighted accuracy on the held-out half of each rater's comparisons.

    A comparison counts as correct when the preferred item scores higher, or,
    for a tie label, when the score difference is below ``tie_threshold``.
    """
    hits, per_group = [], []
    for g in groups:
        post_half, eval_half = split_group(g)
        if not post_half or not eval_half:
            raise ValueError("each group needs at least one comparison in each half")
        ll = PairwiseObjective(model, model.params, pairwise_arrays(vocab, post_half)).loglik.sum(axis=0)
        gamma = posterior_from_loglik(model.prior, ll)
        obj = PairwiseObjective(model, model.params, pairwise_arrays(vocab, eval_half))
        acc = pair_correct(obj.gap, [p.preferred for p in eval_half], tie_threshold) @ gamma
        hits.extend(acc)
        per_group.append(float(np.mean(acc)))
    value = float(np.mean(hits))
    return (value, np.array(per_group)) if return_details else value


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

def spearman(rank_a, rank_b) -> float:
    """Spearman's rho: Pearson correlation of average ranks."""
    a, b = np.asarray(rank_a, dtype=float), np.asarray(rank_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    if a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    ra, rb = rankdata(a) - (len(a) + 1) / 2.0, rankdata(b) - (len(b) + 1) / 2.0
    den = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if den == 0.0:
        return 0.0
    return float(np.clip(np.sum(ra * rb) / den, -1.0, 1.0))


@dataclass
class RankEvalResult:
    mean: float
    per_sample: np.ndarray
    skipped: int


def rank_correlation_eval(model: UserModel, vocab: Vocabulary, lists: list[RankedList], seed: int = 0,
                          n_posterior_items: int = 3, min_items: int = 5,
                          return_details: bool = False):
    """Posterior-averaged Spearman correlation between learned and true item orderings.

    Per list: ``n_posterior_items`` random items give all their pairwise
    preferences (true order) for the posterior; the remaining items are
    ranked per type; correlations are averaged under the posterior. Lists
    shorter than ``min_items`` are skipped.
    """
    vals, skipped = [], 0
    for j, lst in enumerate(lists):
        n = len(lst.items)
        if n < min_items:
            skipped += 1
            continue
        rng = stream_rng(seed, STREAM_RANK_EVAL, j)
        probe = np.sort(rng.choice(n, size=n_posterior_items, replace=False))
        rest = np.setdiff1d(np.arange(n), probe)
        text = embed_prompt(vocab, lst.prompt)
        s = model.scores(text, lst.items)  # (n, K)
        ll = np.zeros(model.n_types)
        for x in range(len(probe)):
            for y in range(x + 1, len(probe)):
                # items are stored best first, so the lower index is preferred
                gap = s[probe[x]] - s[probe[y]]
                ll += -np.logaddexp(0.0, -gap)
        gamma = posterior_from_loglik(model.prior, ll)
        true_rank = rest.astype(float)
        rhos = np.array([spearman(true_rank, -s[rest, k]) for k in range(model.n_types)])
        vals.append(float(rhos @ gamma))
    if not vals:
        raise ValueError("no list long enough to evaluate")
    per = np.array(vals)
    res = RankEvalResult(float(per.mean()), per, skipped)
    return res if return_details else res.mean


# ---------------------------------------------------------------------------
# reward labeling
# ---------------------------------------------------------------------------

@dataclass
class RewardedSession:
    session: SequentialSession
    rewards: np.ndarray
    map_type: int
    posterior: np.ndarray


def label_rewards(model: UserModel, vocab: Vocabulary, sessions: list[SequentialSession]) -> list[RewardedSession]:
    """Reward every turn with the chosen column's utility under the most likely type.

    The type posterior uses the choice likelihoods of the whole session; ties
    in the posterior go to the lowest type index.
    """
    out = []
    for sess in sessions:
        if not sess.turns:
            raise ValueError("session has no turns")
        text = embed_prompt(vocab, sess.p0)
        ll = np.zeros(model.n_types)
        utils = []
        for turn in sess.turns:
            ll += model.choice_loglik(text, turn.items, turn.choice)
            utils.append(model.utilities(text, turn.items)[:, turn.choice])
        gamma = posterior_from_loglik(model.prior, ll)
        k = int(np.argmax(gamma))
        out.append(RewardedSession(sess, np.array([u[k] for u in utils]), k, gamma))
    return out


# ---------------------------------------------------------------------------
# policy evaluation
# ---------------------------------------------------------------------------

@dataclass
class PolicyEvalReport:
    mean_return: float
    std_error: float
    n_episodes: int
    reward_mode: str
    seed: int
    policy: str = ""

    @property
    def ci95(self) -> tuple[float, float]:
        return self.mean_return - 1.96 * self.std_error, self.mean_return + 1.96 * self.std_error

    def to_json(self) -> dict:
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        return d


def summarize_returns(returns, reward_mode: str, seed: int, policy: str = "") -> PolicyEvalReport:
    r = np.asarray(returns, dtype=float)
    if len(r) < 1:
        raise ValueError("need at least one episode")
    se = float(r.std(ddof=1) / np.sqrt(len(r))) if len(r) > 1 else 0.0
    return PolicyEvalReport(float(r.mean()), se, len(r), reward_mode, int(seed), policy)


def evaluate_policy(policy, env, n_episodes: int, reward_mode: str, seed: int,
                    n_jobs: int = 1, name: str = "") -> PolicyEvalReport:
    """Mean return and standard error over independent seeded episodes."""
    from .env import rollout
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")

    def one(i):
        return rollout(policy, env, stream_rng(seed, STREAM_POLICY_EVAL, i), reward_mode, episode_id=i).total_return

    return summarize_returns(parallel_map(one, n_episodes, n_jobs), reward_mode, seed, name)


def format_report_table(reports: list[PolicyEvalReport]) -> str:
    lines = [f"{'policy':<12}{'mode':<8}{'mean':>10}{'stderr':>10}{'95% CI':>24}{'n':>7}"]
    for r in reports:
        lo, hi = r.ci95
        lines.append(f"{r.policy:<12}{r.reward_mode:<8}{r.mean_return:>10.4f}{r.std_error:>10.4f}"
                     f"{f'[{lo:.4f}, {hi:.4f}]':>24}{r.n_episodes:>7}")
    return "\n".join(lines)
