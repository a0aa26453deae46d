"""Letter-level CTC, greedy and LM-fused prefix beam decoding, and WER.

Beam hypotheses are ranked by

    log p_ctc(y | x) + w1 * log p_lm(y) + w2 * |y|

both while searching and for the final choice; ``|y|`` counts characters.
The LM is a character n-gram over the non-blank symbols with add-one
smoothing, backing off to shorter contexts when a context was never seen.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from zssl import numerics as nx

BLANK = 0
SYMBOLS = ("<blank>",) + tuple("abcdefghijklmnopqrstuvwxyz") + (" ", "'")
NEG_INF = -np.inf


class Vocabulary:
    def __init__(self, symbols: Sequence[str] = SYMBOLS):
        self.symbols = tuple(symbols)
        if len(self.symbols) != 29 or self.symbols[0] != "<blank>":
            raise ValueError("vocabulary must hold 29 symbols with blank first")
        self.index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in ids if i != BLANK)


VOCAB = Vocabulary()


# ------------------------------------------------------------------------ CTC


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per symbol plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(a == b for a, b in zip(target, target[1:]))


def _extended(target: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    return ext


def _lse3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))


def _shift(x: np.ndarray, k: int) -> np.ndarray:
    """x moved k places right (k > 0) or left (k < 0), padded with -inf."""
    out = np.full_like(x, NEG_INF)
    if k > 0:
        out[k:] = x[:-k]
    else:
        out[:k] = x[-k:]
    return out


def ctc_forward_backward(lp: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Log-likelihood of ``target`` and the per-frame symbol occupancy [T x V]."""
    T, V = lp.shape
    ext = _extended(target)
    S = ext.size
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        alpha[t] = _lse3(prev, _shift(prev, 1), np.where(skip, _shift(prev, 2), NEG_INF)) + emit[t]

    # beta excludes the emission at its own frame
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        beta[t] = _lse3(nxt, _shift(nxt, -1), np.where(skip_from, _shift(nxt, -2), NEG_INF))

    ends = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    log_like = float(ends)
    occupancy = np.zeros((T, V))
    if np.isfinite(log_like):
        with np.errstate(invalid="ignore"):
            gamma = np.exp(alpha + beta - log_like)
        gamma = np.nan_to_num(gamma, nan=0.0)
        for s in range(S):
            occupancy[:, ext[s]] += gamma[:, s]
    return log_like, occupancy


def ctc_loss(log_probs: nx.Tensor, target: Sequence[int]) -> nx.Tensor:
    """-log sum over alignments of prod_t p(pi_t); gradient is minus the occupancy.

    Returns +inf (with a zero gradient) when ``T`` is too short for the target.
    """
    log_probs = nx.as_tensor(log_probs)
    if log_probs.ndim != 2:
        raise nx.DimensionError(f"ctc_loss wants [T x V] log-probs, got {log_probs.shape}")
    T, V = log_probs.shape
    target = [int(s) for s in target]
    if T < 1:
        raise nx.DimensionError("ctc_loss needs at least one frame")
    if any(not 0 < s < V for s in target):
        raise ValueError(f"target symbols must lie in 1..{V - 1}")
    if np.any(np.isnan(log_probs.data)):
        raise nx.NumericError("NaN in ctc_loss input")
    if T < min_frames(target):
        return nx._record("ctc_loss", np.array(np.inf), (log_probs,), lambda g: (np.zeros((T, V)),))
    log_like, occupancy = ctc_forward_backward(log_probs.data, target)

    def bw(g):
        return (-g * occupancy,)

    return nx._record("ctc_loss", np.array(-log_like), (log_probs,), bw)


def ctc_greedy(log_probs) -> list[int]:
    """Best path: per-frame argmax, merge repeats, drop blanks."""
    data = log_probs.data if isinstance(log_probs, nx.Tensor) else np.asarray(log_probs)
    best = np.argmax(data, axis=1)
    out, prev = [], BLANK
    for s in best:
        s = int(s)
        if s != prev and s != BLANK:
            out.append(s)
        prev = s
    return out


# ----------------------------------------------------------------- char LM


LM_MAGIC = "zssl-charlm"
LM_VERSION = 1
BOS = BLANK  # the blank id never occurs in text, so it doubles as sentence start


class NGramLM:
    """Character n-gram over symbol ids 1..V-1.

    ``counts[k]`` maps a length-k context tuple to a count vector over the
    full vocabulary (blank slot always zero).  A context with no counts
    defers to its suffix one symbol shorter.
    """

    def __init__(self, order: int, counts: list[dict] | None = None, vocab_size: int = len(SYMBOLS)):
        if order < 1:
            raise ValueError("n-gram order must be >= 1")
        self.order = order
        self.vocab_size = vocab_size
        self.counts = counts if counts is not None else [dict() for _ in range(order)]
        self._cache: dict = {}

    @property
    def num_symbols(self) -> int:
        return self.vocab_size - 1

    def initial_context(self) -> tuple:
        return (BOS,) * (self.order - 1)

    def advance(self, context: tuple, symbol: int) -> tuple:
        if self.order == 1:
            return ()
        return (context + (symbol,))[-(self.order - 1):]

    def distribution(self, context: tuple) -> np.ndarray:
        """Log p(. | context) over the vocabulary; blank gets -inf."""
        hit = self._cache.get(context)
        if hit is not None:
            return hit
        ctx = tuple(context)
        while True:
            row = self.counts[len(ctx)].get(ctx)
            if row is not None or not ctx:
                break
            ctx = ctx[1:]
        row = np.zeros(self.vocab_size) if row is None else row
        probs = (row[1:] + 1.0) / (row[1:].sum() + self.num_symbols)
        out = np.concatenate([[NEG_INF], np.log(probs)])
        self._cache[tuple(context)] = out
        return out

    def log_prob(self, context: tuple, symbol: int) -> float:
        return float(self.distribution(context)[symbol])

    def score(self, sequence: Sequence[int]) -> float:
        ctx, total = self.initial_context(), 0.0
        for s in sequence:
            total += self.log_prob(ctx, s)
            ctx = self.advance(ctx, s)
        return total

    def save(self, path: str | os.PathLike) -> None:
        """Text layout: magic+version, order, vocab size, then one line per
        non-zero count ``k <TAB> context ids <TAB> symbol <TAB> count``."""
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{LM_MAGIC} {LM_VERSION}\norder {self.order}\nvocab {self.vocab_size}\n")
            for k, table in enumerate(self.counts):
                for ctx in sorted(table):
                    row = table[ctx]
                    for sym in np.flatnonzero(row):
                        f.write(f"{k}\t{' '.join(map(str, ctx))}\t{sym}\t{int(row[sym])}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "NGramLM":
        with open(path, encoding="utf-8") as f:
            head = f.readline().split()
            if head != [LM_MAGIC, str(LM_VERSION)]:
                raise ValueError(f"{path}: not a version-{LM_VERSION} character LM")
            order = int(f.readline().split()[1])
            vocab = int(f.readline().split()[1])
            lm = cls(order, vocab_size=vocab)
            for line in f:
                k, ctx, sym, count = line.rstrip("\n").split("\t")
                key = tuple(int(c) for c in ctx.split()) if ctx else ()
                row = lm.counts[int(k)].setdefault(key, np.zeros(vocab))
                row[int(sym)] = float(count)
        return lm


def train_char_lm(corpus: str | Iterable[str], n: int, vocab: Vocabulary = VOCAB) -> NGramLM:
    """Count n-grams line by line, padding each line's start with ``n-1`` BOS ids."""
    lines = corpus.splitlines() if isinstance(corpus, str) else list(corpus)
    if not any(lines):
        raise nx.ContractError("train_char_lm needs a non-empty corpus")
    lm = NGramLM(n, vocab_size=len(vocab))
    for line in lines:
        ids = [BOS] * (n - 1) + vocab.encode(line)
        for i in range(n - 1, len(ids)):
            sym = ids[i]
            for k in range(n):
                ctx = tuple(ids[i - k:i])
                row = lm.counts[k].setdefault(ctx, np.zeros(len(vocab)))
                row[sym] += 1.0
    return lm


# -------------------------------------------------------------- beam search


@dataclass
class Hypothesis:
    prefix: tuple
    log_pb: float  # ending in blank
    log_pnb: float  # ending in the last symbol
    lm_state: tuple
    lm_logp: float
    combined_score: float = field(default=NEG_INF)

    @property
    def log_p_ctc(self) -> float:
        return float(np.logaddexp(self.log_pb, self.log_pnb))


def _combine(h: Hypothesis, w1: float, w2: float) -> float:
    lm_term = w1 * h.lm_logp if w1 != 0 else 0.0
    return h.log_p_ctc + lm_term + w2 * len(h.prefix)


def beam_hypotheses(log_probs, lm: NGramLM | None, w1: float = 0.5, w2: float = 0.1,
                    beam: int = 16) -> list[Hypothesis]:
    """Prefix beam search with shallow fusion; returns the final beam, best first."""
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if not (math.isfinite(w1) and math.isfinite(w2)):
        raise ValueError("w1 and w2 must be finite")
    if lm is None and w1 != 0:
        raise nx.ContractError("a nonzero LM weight needs a language model")
    lp = log_probs.data if isinstance(log_probs, nx.Tensor) else np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    ctx0 = lm.initial_context() if lm is not None else ()
    beams = {(): Hypothesis((), 0.0, NEG_INF, ctx0, 0.0)}

    def rank(hs):
        for h in hs:
            h.combined_score = _combine(h, w1, w2)
        return sorted(hs, key=lambda h: (-h.combined_score, h.prefix))

    for t in range(T):
        row = lp[t]
        nxt: dict[tuple, Hypothesis] = {}

        def slot(prefix, parent, sym):
            h = nxt.get(prefix)
            if h is None:
                if sym is None:
                    h = Hypothesis(prefix, NEG_INF, NEG_INF, parent.lm_state, parent.lm_logp)
                else:
                    step = lm.log_prob(parent.lm_state, sym) if lm is not None else 0.0
                    state = lm.advance(parent.lm_state, sym) if lm is not None else ()
                    h = Hypothesis(prefix, NEG_INF, NEG_INF, state, parent.lm_logp + step)
                nxt[prefix] = h
            return h

        for h in beams.values():
            total = h.log_p_ctc
            stay = slot(h.prefix, h, None)
            stay.log_pb = np.logaddexp(stay.log_pb, total + row[BLANK])
            last = h.prefix[-1] if h.prefix else None
            if last is not None:
                stay.log_pnb = np.logaddexp(stay.log_pnb, h.log_pnb + row[last])
            for s in range(1, V):
                if not np.isfinite(row[s]):
                    continue
                ext = slot(h.prefix + (s,), h, s)
                # a repeat only starts a new symbol after a blank
                src = h.log_pb if s == last else total
                ext.log_pnb = np.logaddexp(ext.log_pnb, src + row[s])
        beams = {h.prefix: h for h in rank(nxt.values())[:beam]}
    return rank(beams.values())


def ctc_beam_lm(log_probs, lm: NGramLM | None, w1: float = 0.5, w2: float = 0.1, beam: int = 16) -> list[int]:
    return list(beam_hypotheses(log_probs, lm, w1, w2, beam)[0].prefix)


# ------------------------------------------------------------------------ WER


class WERResult(NamedTuple):
    substitutions: int
    insertions: int
    deletions: int
    rate: float

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def wer(hyp: Sequence[str], ref: Sequence[str]) -> WERResult:
    """Word-level Levenshtein alignment with unit costs.

    Among minimum-cost alignments the one with the most substitutions is
    reported, which makes the breakdown symmetric under swapping hyp and ref.
    """
    hyp, ref = list(hyp), list(ref)
    n, m = len(ref), len(hyp)
    # cell = (cost, -substitutions, insertions)
    dp = [[(0, 0, 0)] * (m + 1) for _ in range(n + 1)]
    for j in range(1, m + 1):
        dp[0][j] = (j, 0, j)
    for i in range(1, n + 1):
        dp[i][0] = (i, 0, 0)
        for j in range(1, m + 1):
            c, ns, ins = dp[i - 1][j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, ns, ins)
            else:
                diag = (c + 1, ns - 1, ins)
            c, ns, ins = dp[i][j - 1]
            left = (c + 1, ns, ins + 1)
            c, ns, ins = dp[i - 1][j]
            up = (c + 1, ns, ins)
            dp[i][j] = min(diag, left, up, key=lambda cell: cell[:2])
    cost, neg_s, ins = dp[n][m]
    subs = -neg_s
    dels = cost - subs - ins
    return WERResult(subs, ins, dels, cost / max(1, n))


def write_hypotheses(path: str | os.PathLike, items: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, text in items:
            f.write(f"{utt_id}\t{text}\n")
