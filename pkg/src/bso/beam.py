"""Beam search: hypotheses, hard-constraint successor functions, top-K
selection and test-time decoding.

Successor sets are represented two ways: a boolean mask over the target
vocabulary (used by the decoder hot path) and explicit expansion lists
(the ``succ_*`` functions, mirroring how the search procedure is usually
written down). Both views agree by construction.

Ranking uses cumulative scores accumulated in float64 so that a
from-scratch rescoring of the same prefix reproduces bit-identical totals.
Ties are broken deterministically: higher score, then lower word index,
then lower parent index.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np


class ConstraintError(ValueError):
    """A constraint was advanced with a word it does not allow."""


class DecodeError(RuntimeError):
    """Search got stuck: no hypothesis has a valid expansion."""

    def __init__(self, prefix):
        super().__init__(f"no valid expansion for prefix {list(prefix)}")
        self.prefix = tuple(prefix)


# ---------------------------------------------------------------------------
# Constraint states


class NoConstraint:
    """Unconstrained successors: any vocabulary word except pad/bos."""

    variant = "none"

    def __init__(self, vocab_size, blocked=()):
        self.vocab_size = vocab_size
        self.blocked = tuple(blocked)

    def allowed_mask(self):
        mask = np.ones(self.vocab_size, dtype=bool)
        for b in self.blocked:
            mask[b] = False
        return mask

    def advance(self, word):
        if word in self.blocked:
            raise ConstraintError(f"word {word} is blocked")
        return self


class PermutationConstraint:
    """Only unused source words may be emitted; EOS once all are used."""

    variant = "permutation"

    def __init__(self, vocab_size, source_ids, eos_id, _remaining=None):
        self.vocab_size = vocab_size
        self.eos_id = eos_id
        self.remaining = Counter(source_ids) if _remaining is None else _remaining

    def allowed_mask(self):
        mask = np.zeros(self.vocab_size, dtype=bool)
        if self.remaining:
            for w, n in self.remaining.items():
                if n > 0:
                    mask[w] = True
        else:
            mask[self.eos_id] = True
        return mask

    def advance(self, word):
        if word == self.eos_id:
            if self.remaining:
                raise ConstraintError("EOS before all source words were used")
            return self
        if self.remaining.get(word, 0) <= 0:
            raise ConstraintError(f"word {word} not among unused source words")
        rem = self.remaining.copy()
        rem[word] -= 1
        if rem[word] == 0:
            del rem[word]
        return PermutationConstraint(self.vocab_size, (), self.eos_id, _remaining=rem)


class ArcStandardConstraint:
    """Shift-reduce validity for parsing-as-a-sequence outputs.

    Source words must be emitted in order; reduce actions need stack depth
    at least 2; EOS only once every word is emitted and a single item (the
    root) remains on the stack.
    """

    variant = "arc_standard"

    def __init__(self, vocab_size, source_ids, reduce_ids, eos_id,
                 next_idx=0, stack_depth=0):
        self.vocab_size = vocab_size
        self.source_ids = tuple(source_ids)
        self.reduce_ids = frozenset(reduce_ids)
        self.eos_id = eos_id
        self.next_idx = next_idx
        self.stack_depth = stack_depth

    def allowed_mask(self):
        mask = np.zeros(self.vocab_size, dtype=bool)
        n = len(self.source_ids)
        if self.next_idx < n:
            mask[self.source_ids[self.next_idx]] = True
        if self.stack_depth >= 2:
            for r in self.reduce_ids:
                mask[r] = True
        if self.next_idx == n and self.stack_depth == 1:
            mask[self.eos_id] = True
        return mask

    def advance(self, word):
        n = len(self.source_ids)
        if word == self.eos_id:
            if not (self.next_idx == n and self.stack_depth == 1):
                raise ConstraintError("EOS before parse is complete")
            return self
        if word in self.reduce_ids:
            if self.stack_depth < 2:
                raise ConstraintError("reduce with stack depth < 2")
            return self._with(self.next_idx, self.stack_depth - 1)
        if self.next_idx < n and word == self.source_ids[self.next_idx]:
            return self._with(self.next_idx + 1, self.stack_depth + 1)
        raise ConstraintError(f"word {word} is neither the next source word nor a legal action")

    def _with(self, next_idx, depth):
        return ArcStandardConstraint(self.vocab_size, self.source_ids,
                                     self.reduce_ids, self.eos_id,
                                     next_idx=next_idx, stack_depth=depth)


def validate_gold(constraint, tokens):
    """Check a gold sequence against a constraint; returns the final state.

    Raises ConstraintError naming the violating step.
    """
    state = constraint
    for i, w in enumerate(tokens):
        try:
            state = state.advance(w)
        except ConstraintError as exc:
            raise ConstraintError(f"gold sequence invalid at step {i + 1}: {exc}") from None
    return state


# ---------------------------------------------------------------------------
# Hypotheses


@dataclass
class ChainNode:
    """One decoder step on some hypothesis' path since the last reset."""

    prev: object
    cache: dict
    row: int
    word: int
    f: float

    def to_list(self):
        nodes, n = [], self
        while n is not None:
            nodes.append(n)
            n = n.prev
        nodes.reverse()
        return nodes


@dataclass
class Hypothesis:
    tokens: tuple
    score: float                 # cumulative f over all emitted tokens
    constraint: object
    row: int = 0                 # row in the current batched DecoderState
    seg_score: float = 0.0       # cumulative f since the last search reset
    chain: ChainNode = None
    last_f: float = 0.0


# ---------------------------------------------------------------------------
# Successor functions (expansion-list view, used by tests and documentation)


def succ_unconstrained(hyp, vocab_size, blocked=()):
    mask = NoConstraint(vocab_size, blocked).allowed_mask()
    return [(hyp, w) for w in range(vocab_size) if mask[w]]


def succ_permutation(hyp):
    if hyp.constraint.variant != "permutation":
        raise ConstraintError("hypothesis does not carry a permutation constraint")
    mask = hyp.constraint.allowed_mask()
    return [(hyp, w) for w in np.flatnonzero(mask)]


def succ_arc_standard(hyp):
    if hyp.constraint.variant != "arc_standard":
        raise ConstraintError("hypothesis does not carry an arc-standard constraint")
    mask = hyp.constraint.allowed_mask()
    return [(hyp, w) for w in np.flatnonzero(mask)]


# ---------------------------------------------------------------------------
# Top-K selection


def top_k(scores, valid, k):
    """Pick the K best (parent, word) expansions.

    scores: [n_hyp, vocab] cumulative scores; valid: same-shape bool mask.
    Ties break toward the lower word index, then the lower parent index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    n, v = scores.shape
    flat_valid = np.asarray(valid).ravel()
    idx = np.flatnonzero(flat_valid)
    if idx.size == 0:
        return []
    s = scores.ravel()[idx]
    words = idx % v
    parents = idx // v
    order = np.lexsort((parents, words, -s))
    take = order[:k]
    return [(int(parents[i]), int(words[i])) for i in take]


# ---------------------------------------------------------------------------
# Test-time decoding


def beam_decode(model, enc, k, constraint, max_len, bos_id, eos_id, masks=None,
                return_score=False):
    """Beam search over score_f; returns the best completed sequence.

    EOS-terminated candidates are set aside and search continues with the
    surviving hypotheses until the beam empties or max_len is reached; the
    highest-scoring completed hypothesis wins (completed sequences are
    preferred over incomplete ones). With k=1 this reduces to greedy
    argmax stepping.
    """
    if k < 1:
        raise ValueError("beam size must be >= 1")
    v = model.config.tgt_vocab
    states = model.init_state(enc)
    hyps = [Hypothesis(tokens=(), score=0.0, constraint=constraint, row=0)]
    finished = []
    for step in range(max_len):
        words = np.array([h.tokens[-1] if h.tokens else bos_id for h in hyps])
        out, _ = model.decode_step(states, words, enc, step=step, masks=masks)
        f = model.score_f(out).astype(np.float64)
        cum = f + np.array([h.score for h in hyps])[:, None]
        valid = np.stack([h.constraint.allowed_mask() for h in hyps])
        picks = top_k(cum, valid, k)
        if not picks:
            if finished:
                break
            raise DecodeError(hyps[0].tokens)
        live, keep_rows = [], []
        for parent, w in picks:
            h = hyps[parent]
            nh = Hypothesis(h.tokens + (w,), float(cum[parent, w]),
                            h.constraint.advance(w))
            if w == eos_id:
                finished.append(nh)
            else:
                nh.row = len(keep_rows)
                keep_rows.append(parent)
                live.append(nh)
        if not live:
            break
        states = out.state.select(keep_rows)
        hyps = live
    best = max(finished, key=lambda h: h.score) if finished \
        else max(hyps, key=lambda h: h.score)
    if return_score:
        return best.tokens, best.score
    return best.tokens
