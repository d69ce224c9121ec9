"""Toy parallel corpora, vocabulary handling, corpus BLEU, and the two
analysis protocols (length-bucketed BLEU, fixed-radius sweep).

The tokenizer is plain whitespace with a closed vocabulary plus an unk
fallback; corpora are deterministic functions of (kind, size, max_len, seed).
BLEU is pinned: case-sensitive, up to 4-grams, standard brevity penalty, no
smoothing (a zero n-gram precision gives score 0).
"""

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocab:
    """Token <-> id bijection with pinned reserved ids."""

    def __init__(self, tokens: Sequence[str]):
        self._tokens = list(RESERVED)
        seen = set(self._tokens)
        for t in tokens:
            if t not in seen:
                seen.add(t)
                self._tokens.append(t)
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)

    def encode(self, tokens: Sequence[str], add_eos: bool = False) -> List[int]:
        ids = [self._ids.get(t, UNK_ID) for t in tokens]
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self._tokens[i] for i in ids if i > UNK_ID]


@dataclass
class ParallelCorpus:
    """Aligned (source ids, target ids) pairs; targets end with the eos id."""

    pairs: List[Tuple[List[int], List[int]]]
    split: str = "train"

    def __len__(self):
        return len(self.pairs)


@dataclass
class ToyTask:
    train: ParallelCorpus
    dev: ParallelCorpus
    test: ParallelCorpus
    vocab: Vocab


# Synchronized toy grammar: (source expansion, target expansion) per rule.
# Upper-case symbols are nonterminals; the target side permutes constituents.
GRAMMAR_RULES: Dict[str, List[Tuple[List[str], List[str]]]] = {
    "S": [(["NP", "VP"], ["VP", "NP"])],
    "NP": [(["DET", "N"], ["N", "DET"]), (["N"], ["N"])],
    "VP": [(["V", "NP"], ["NP", "V"]), (["V"], ["V"])],
    "DET": [(["the"], ["le"]), (["a"], ["un"])],
    "N": [(["dog"], ["chien"]), (["cat"], ["chat"]), (["bird"], ["oiseau"]),
          (["fish"], ["poisson"])],
    "V": [(["sees"], ["voit"]), (["likes"], ["aime"]), (["eats"], ["mange"])],
}


def _sample_grammar(rng: np.random.Generator) -> Tuple[List[str], List[str]]:
    # synchronized expansion: each constituent is expanded once and emitted in
    # source order on the source side, target order on the target side
    def expand_sym(symbol):
        rules = GRAMMAR_RULES[symbol]
        src_rhs, tgt_rhs = rules[rng.integers(len(rules))]
        src_parts = {s: expand_sym(s) for s in set(src_rhs) if s in GRAMMAR_RULES}
        src = [tok for s in src_rhs for tok in (src_parts[s][0] if s in src_parts else [s])]
        # target-side symbols absent from src_parts are target terminals
        tgt = [tok for s in tgt_rhs for tok in (src_parts[s][1] if s in src_parts else [s])]
        return src, tgt

    return expand_sym("S")


def make_toy_task(kind: str, size: int, max_len: int, seed: int,
                  content_vocab: int = 26) -> ToyTask:
    """Deterministic toy parallel corpus.

    Kinds: copy (target == source), reverse (target reversed), sort_digits
    (digit tokens, target sorted ascending), synthetic_grammar (synchronized
    toy grammar with constituent reordering). Pairs are split 80/10/10.
    """
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    rng = np.random.default_rng(seed)
    if kind == "sort_digits":
        tokens = [str(i) for i in range(10)]
    elif kind == "synthetic_grammar":
        src_terms = sorted({t for rules in GRAMMAR_RULES.values()
                            for s, _ in rules for t in s if t not in GRAMMAR_RULES})
        tgt_terms = sorted({t for rules in GRAMMAR_RULES.values()
                            for _, tg in rules for t in tg if t not in GRAMMAR_RULES})
        tokens = src_terms + tgt_terms
    else:
        tokens = [f"t{i}" for i in range(content_vocab)]
    vocab = Vocab(tokens)

    pairs = []
    for _ in range(size):
        if kind == "synthetic_grammar":
            src_toks, tgt_toks = _sample_grammar(rng)
        else:
            n = int(rng.integers(1, max_len + 1))
            src_toks = [tokens[i] for i in rng.integers(len(tokens), size=n)]
            if kind == "copy":
                tgt_toks = list(src_toks)
            elif kind == "reverse":
                tgt_toks = list(reversed(src_toks))
            elif kind == "sort_digits":
                tgt_toks = sorted(src_toks)
            else:
                raise ValueError(f"unknown toy task kind {kind!r}")
        pairs.append((vocab.encode(src_toks), vocab.encode(tgt_toks, add_eos=True)))

    n_dev = max(1, size // 10) if size >= 3 else 0
    n_test = n_dev
    n_train = size - n_dev - n_test
    return ToyTask(
        train=ParallelCorpus(pairs[:n_train], "train"),
        dev=ParallelCorpus(pairs[n_train : n_train + n_dev], "dev"),
        test=ParallelCorpus(pairs[n_train + n_dev :], "test"),
        vocab=vocab,
    )


def load_parallel_text(src_path, tgt_path, vocab: Optional[Vocab] = None):
    """Two aligned UTF-8 files, one whitespace-tokenized sentence per line."""
    with open(src_path, encoding="utf-8") as f:
        src_lines = [line.split() for line in f.read().splitlines()]
    with open(tgt_path, encoding="utf-8") as f:
        tgt_lines = [line.split() for line in f.read().splitlines()]
    if len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"parallel files differ in length: {len(src_lines)} vs {len(tgt_lines)}"
        )
    if vocab is None:
        vocab = Vocab([t for line in src_lines + tgt_lines for t in line])
    pairs = [
        (vocab.encode(s), vocab.encode(t, add_eos=True)) for s, t in zip(src_lines, tgt_lines)
    ]
    return ParallelCorpus(pairs), vocab


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_ngram: int = 4) -> float:
    """Corpus-level BLEU in [0, 100].

    Geometric mean of modified n-gram precisions (clipped counts summed over
    the corpus) times the brevity penalty. No smoothing: any zero precision
    gives 0.
    """
    if not hypotheses:
        raise ValueError("corpus_bleu: empty hypothesis list")
    if len(hypotheses) != len(references):
        raise ValueError(
            f"corpus_bleu: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    matched = [0] * max_ngram
    total = [0] * max_ngram
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        if not ref:
            raise ValueError("corpus_bleu: empty reference")
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_ngram + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matched[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(0, len(hyp) - n + 1)
    if any(t == 0 or m == 0 for m, t in zip(matched, total)):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / max_ngram
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(1, hyp_len))
    return 100.0 * bp * math.exp(log_prec)


def bleu_by_length(hypotheses, references, source_lengths, edges) -> List[tuple]:
    """Corpus BLEU computed independently within each source-length bucket.

    edges is a sorted list of inclusive upper bounds; a final unbounded bucket
    is added above the last edge. Returns (lo, hi, count, bleu) rows; empty
    buckets are omitted rather than reported as zero.
    """
    if list(edges) != sorted(edges):
        raise ValueError("bucket edges must be sorted")
    bounds = [0] + list(edges) + [math.inf]
    rows = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = [i for i, n in enumerate(source_lengths) if lo < n <= hi]
        if not idx:
            continue
        score = corpus_bleu([hypotheses[i] for i in idx], [references[i] for i in idx])
        rows.append((lo, hi, len(idx), score))
    return rows


def bleu_rows_to_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bucket_lo", "bucket_hi", "count", "bleu"])
        w.writerows(rows)


def evaluate_bleu(model, corpus: ParallelCorpus, max_len: int = 64,
                  batch_size: int = 64) -> float:
    """Greedy-decode a corpus and score it against the references."""
    hyps, refs = decode_corpus(model, corpus, max_len, batch_size)
    return corpus_bleu(hyps, refs)


def decode_corpus(model, corpus: ParallelCorpus, max_len: int = 64, batch_size: int = 64):
    from .model import greedy_decode
    from .training import pad_batch

    hyps, refs = [], []
    for i in range(0, len(corpus.pairs), batch_size):
        chunk = list(range(i, min(i + batch_size, len(corpus.pairs))))
        src, _ = pad_batch(corpus.pairs, chunk)
        out = greedy_decode(model, src, max_len)
        hyps.extend(out)
        refs.extend([[t for t in corpus.pairs[j][1] if t > UNK_ID] for j in chunk])
    return hyps, refs


def fixed_radius_sweep(model_config, train_config, radii, task: ToyTask,
                       bucket_edges, decode_max_len: int = 64) -> List[dict]:
    """Train one model per pinned radius and report length-bucketed test BLEU.

    Each run freezes every layer radius at the given value (the input gains
    stay learnable) and is otherwise identical. Returns one row dict per
    (radius, non-empty bucket).
    """
    from dataclasses import replace

    from .model import TrainabilityMask, build_model
    from .training import train

    rows = []
    for radius in radii:
        cfg = replace(model_config, fixed_rho=float(radius))
        m = build_model(cfg, TrainabilityMask.preset("plus_attention"))
        m, _ = train(m, task.train.pairs, train_config)
        hyps, refs = decode_corpus(m, task.test, decode_max_len)
        src_lens = [len(p[0]) for p in task.test.pairs]
        for lo, hi, count, score in bleu_by_length(hyps, refs, src_lens, bucket_edges):
            rows.append(
                {"radius": radius, "bucket_lo": lo, "bucket_hi": hi,
                 "count": count, "bleu": score}
            )
    return rows
