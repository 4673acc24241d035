"""Plan-conditioned paragraph decoder with copy attention and beam search.

Each step feeds the previous token embedding together with the running
text-context state into LSTM_gen, cross-attends over the chosen plan's
token states (with the length-bin embedding prepended as a pseudo-token
so every step sees it), and mixes a vocabulary softmax with a copy
distribution gated by sigmoid(copy(s_i)).  Copy mass lands only on
vocabulary ids of the plan's real tokens; the pseudo-token's attention
weight is excluded and the remainder renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterError, Tensor
from .corpus import DataError, Vocab
from .encoders import EncoderParams, LSTMParams, _uniform, lstm_cell


@dataclass
class DecoderParams:
    """LSTM_gen, cross-attention scorer, output projection, copy gate, bins."""

    lstm_gen: LSTMParams
    attn_w: Tensor
    ff_w: Tensor
    ff_b: Tensor
    copy_w: Tensor
    copy_b: Tensor
    bin_emb: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, vocab_size: int, hidden: int,
               embed_dim: int, bins: int) -> "DecoderParams":
        two_h = 2 * hidden
        return cls(
            lstm_gen=LSTMParams.create(rng, embed_dim + two_h, two_h),
            attn_w=_uniform(rng, (two_h, two_h)),
            ff_w=_uniform(rng, (2 * two_h, vocab_size)),
            ff_b=_uniform(rng, (1, vocab_size)),
            copy_w=_uniform(rng, (two_h, 1)),
            copy_b=_uniform(rng, (1, 1)),
            bin_emb=_uniform(rng, (bins, two_h)),
        )

    def named(self) -> dict[str, Tensor]:
        out = {"dec.attn_w": self.attn_w, "dec.ff_w": self.ff_w, "dec.ff_b": self.ff_b,
               "dec.copy_w": self.copy_w, "dec.copy_b": self.copy_b,
               "dec.bin_emb": self.bin_emb}
        out.update(self.lstm_gen.named("dec.lstm_gen"))
        return out


@dataclass
class DecoderState:
    """Recurrent state plus the fixed per-paragraph attention inputs."""

    h: Tensor
    c: Tensor
    attn_states: Tensor    # (plan_len + 1, 2H), row 0 is the bin pseudo-token
    attn_keys: Tensor      # transposed attn_states, cached
    copy_matrix: Tensor    # (plan_len, vocab) one-hot scatter, constant
    plan_len: int


def init_decoder(dec: DecoderParams, r_z: Tensor, bin_id: int, h_y_prev: Tensor,
                 plan_token_states: Tensor, plan_token_ids: list[int],
                 vocab_size: int) -> DecoderState:
    """Start a paragraph: state from the plan encoding, bin pseudo-token
    prepended to the plan representation stream."""
    bins = dec.bin_emb.shape[0]
    if not 0 <= bin_id < bins:
        raise ParameterError(f"bin id {bin_id} outside [0, {bins})")
    plan_len = plan_token_states.shape[0]
    if plan_len == 0 or not plan_token_ids:
        raise DataError("decoder needs non-empty plan token states")
    if plan_len != len(plan_token_ids):
        raise DataError("plan token states and ids disagree in length")
    bin_row = ad.narrow(dec.bin_emb, 0, bin_id, 1)
    attn_states = ad.concat([bin_row, plan_token_states], axis=0)
    scatter = np.zeros((plan_len, vocab_size))
    scatter[np.arange(plan_len), np.asarray(plan_token_ids, dtype=np.intp)] = 1.0
    return DecoderState(
        h=r_z,
        c=ad.zeros((1, r_z.shape[1])),
        attn_states=attn_states,
        attn_keys=ad.swap_last2(attn_states),
        copy_matrix=ad.const(scatter),
        plan_len=plan_len,
    )


def decode_step(dec: DecoderParams, enc: EncoderParams, prev_token: int,
                state: DecoderState, h_y_prev: Tensor) -> tuple[Tensor, DecoderState]:
    """One teacher-forced or free-running step; returns (next-token
    distribution over the vocabulary, advanced state)."""
    prev_emb = ad.take_rows(enc.emb, [prev_token])
    x = ad.concat([prev_emb, h_y_prev], axis=1)
    h, c = lstm_cell(dec.lstm_gen, x, state.h, state.c)

    scores = ad.matmul(ad.matmul(h, dec.attn_w), state.attn_keys)
    weights = ad.softmax(scores, axis=-1)
    context = ad.matmul(weights, state.attn_states)

    gen_logits = ad.add(ad.matmul(ad.concat([h, context], axis=1), dec.ff_w), dec.ff_b)
    gen_probs = ad.softmax(gen_logits, axis=-1)
    gate = ad.sigmoid(ad.add(ad.matmul(h, dec.copy_w), dec.copy_b))

    token_w = ad.narrow(weights, 1, 1, state.plan_len)
    token_sum = ad.sum_(token_w, axis=-1, keepdims=True)
    copy_probs = ad.matmul(ad.div(token_w, token_sum), state.copy_matrix)

    keep = ad.sub(ad.const([[1.0]]), gate)
    probs = ad.add(ad.mul(gen_probs, keep), ad.mul(copy_probs, gate))
    return probs, replace(state, h=h, c=c)


@dataclass
class BeamHypothesis:
    """Token prefix with its accumulated log-probability."""

    tokens: tuple[int, ...]
    log_prob: float
    state: DecoderState
    finished: bool = False

    def score(self) -> float:
        steps = len(self.tokens) + (1 if self.finished else 0)
        return self.log_prob / max(steps, 1)


def generate_paragraph(dec: DecoderParams, enc: EncoderParams, r_z: Tensor,
                       plan_token_states: Tensor, plan_token_ids: list[int],
                       bin_id: int, h_y_prev: Tensor, vocab: Vocab,
                       beam_size: int = 5, max_len: int = 30) -> tuple[list[int], bool]:
    """Beam-search a paragraph; returns (token ids, truncated flag).

    Hypotheses are ranked by log-probability divided by step count (the
    EOS step counts for finished ones).  EOS is disallowed as the first
    token so paragraphs are never empty.  Finished hypotheses win over
    truncated ones; ties break on the token sequence for determinism.
    """
    if beam_size < 1:
        raise ParameterError(f"beam size must be >= 1, got {beam_size}")
    with ad.no_grad():
        init = init_decoder(dec, r_z, bin_id, h_y_prev, plan_token_states,
                            plan_token_ids, len(vocab))
        live = [BeamHypothesis(tokens=(), log_prob=0.0, state=init)]
        finished: list[BeamHypothesis] = []
        for step in range(max_len):
            candidates: list[BeamHypothesis] = []
            for hyp in live:
                prev = hyp.tokens[-1] if hyp.tokens else vocab.bos_id
                probs, new_state = decode_step(dec, enc, prev, hyp.state, h_y_prev)
                row = np.log(np.maximum(probs.data[0], 1e-300))
                order = np.argsort(-row, kind="stable")[: beam_size + 1]
                for tok in order:
                    tok = int(tok)
                    if tok == vocab.eos_id:
                        if step == 0:
                            continue
                        candidates.append(BeamHypothesis(
                            tokens=hyp.tokens, log_prob=hyp.log_prob + row[tok],
                            state=new_state, finished=True))
                    else:
                        candidates.append(BeamHypothesis(
                            tokens=hyp.tokens + (tok,), log_prob=hyp.log_prob + row[tok],
                            state=new_state))
            candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
            live = []
            for cand in candidates:
                if cand.finished:
                    finished.append(cand)
                elif len(live) < beam_size:
                    live.append(cand)
            if not live:
                break
        pool = finished if finished else live
        truncated = not finished
        best = max(pool, key=lambda h: (h.score(), h.tokens))
        return list(best.tokens), truncated
