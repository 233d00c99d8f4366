"""Quantitative evaluation.

A single-layer LSTM language model serves as the baseline and as the probe
for likelihood-free generators: reverse perplexity trains a fresh LM on
generated captions and evaluates it on held-out real text; forward perplexity
evaluates a real-data LM on generated text. A sorted-sample 1-D Earth-Mover
distance and a bag-of-embeddings label classifier round out the toolbox.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import NonFiniteError, OptimConfig, ParamStore, Tape, Tensor
from .corpus import BOS_ID, EOS_ID, PAD_ID, Caption, LabeledCorpus, batch_iter
from .model import Checkpoint, TrainingDiverged, generate_ids


@dataclass
class LmConfig:
    embed_dim: int = 64
    hidden_dim: int = 128
    learning_rate: float = 0.5
    grad_clip: float = 5.0
    iterations: int = 800
    batch_size: int = 32
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return LmConfig(**d)


@dataclass
class LMCheckpoint:
    """Single-layer recurrent language model over a fixed vocabulary."""

    cfg: LmConfig
    vocab: object
    store: ParamStore

    def decoder(self):
        return layers.TextDecoder(
            layers.EmbeddingTable("lm.embed", len(self.vocab), self.cfg.embed_dim),
            layers.LstmParams("lm.lstm", self.cfg.embed_dim, self.cfg.hidden_dim),
            "lm.proj",
            len(self.vocab),
        )


def _lm_forward(lm, ids, lengths, tape=None):
    """Teacher-forced step logits for BOS+caption inputs (targets end in EOS)."""
    tape = tape or Tape()
    zero = tape.constant(np.zeros((ids.shape[0], lm.cfg.hidden_dim)))
    return layers.lstm_decode_teacher(
        tape, lm.store, lm.decoder(), zero, ids, lengths, BOS_ID, EOS_ID
    )


def init_lm(cfg, vocab):
    store = ParamStore()
    rng = np.random.default_rng(cfg.seed)
    LMCheckpoint(cfg, vocab, store).decoder().init_params(store, rng)
    return LMCheckpoint(cfg, vocab, store)


def _clip_gradient_norm(grads, ceiling):
    total = math.sqrt(sum(float((g.array * g.array).sum()) for g in grads.values()))
    if total <= ceiling or total == 0.0:
        return grads
    factor = ceiling / total
    return {k: Tensor(g.array * factor) for k, g in grads.items()}


def train_lstm_lm(corpus, cfg):
    """Next-token training with teacher forcing and PAD masked out; plain
    gradient descent with a global gradient-norm ceiling."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    lm = init_lm(cfg, corpus.vocab)
    optim = OptimConfig("gd", cfg.learning_rate)
    batches = batch_iter(corpus, min(cfg.batch_size, len(corpus)), cfg.seed + 1)
    for it in range(cfg.iterations):
        batch = next(batches)
        try:
            tape = Tape()
            step_logits, targets, mask = _lm_forward(lm, batch.ids, batch.lengths, tape)
            weights = mask / mask.sum()
            loss = None
            for t, logits in enumerate(step_logits):
                term = ad.weighted_ce(tape, logits, targets[:, t], weights[:, t])
                loss = term if loss is None else ad.add(tape, loss, term)
            grads = _clip_gradient_norm(ad.backward(loss, tape), cfg.grad_clip)
            ad.optimizer_step(lm.store, grads, optim)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"lm iteration {it}: {exc}") from exc
    return lm


def lm_loglik(lm, captions):
    """(total log-likelihood, token count) over non-PAD tokens including EOS."""
    total = 0.0
    count = 0
    bs = 64
    for start in range(0, len(captions), bs):
        caps = captions[start : start + bs]
        ids = np.array([c.ids for c in caps], dtype=np.intp)
        if ids.size and int(ids.max()) >= len(lm.vocab):
            raise ValueError("caption id outside language-model vocabulary")
        lengths = np.array([c.length for c in caps], dtype=np.intp)
        step_logits, targets, mask = _lm_forward(lm, ids, lengths)
        for t, node in enumerate(step_logits):
            logits = node.value
            shifted = logits - logits.max(axis=1, keepdims=True)
            logprob = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            picked = logprob[np.arange(len(caps)), targets[:, t]]
            total += float((picked * mask[:, t]).sum())
            count += int(mask[:, t].sum())
    return total, count


def ppl_from_total_loglik(total_loglik, n_tokens):
    if n_tokens <= 0:
        raise ValueError("perplexity needs at least one counted token")
    return math.exp(-total_loglik / n_tokens)


def perplexity(lm, captions):
    """exp of mean negative log-likelihood per counted token (EOS counted,
    BOS not)."""
    total, count = lm_loglik(lm, captions)
    return ppl_from_total_loglik(total, count)


def _captions_from_ids(id_lists):
    max_len = max((len(seq) for seq in id_lists), default=1)
    max_len = max(max_len, 1)
    return [
        Caption(tuple(seq) + (PAD_ID,) * (max_len - len(seq)), len(seq)) for seq in id_lists
    ]


def _sample_captions(model, n_samples, seed):
    """Draw samples from a Checkpoint or from a (n, seed) -> id-lists callable."""
    if isinstance(model, Checkpoint):
        ids, _ = generate_ids(model, n_samples, seed=seed)
    else:
        ids = model(n_samples, seed)
    return _captions_from_ids(ids)


def _as_corpus(captions, vocab):
    width = len(captions[0].ids) if captions else 1
    return LabeledCorpus(captions, [0] * len(captions), vocab, ["_"], width)


def reverse_ppl(model, real_test, lm_cfg, n_samples, seed, vocab=None):
    """Train a fresh LM on n_samples generated captions (fixed lm_cfg and
    seed) and return its perplexity on the held-out real captions."""
    if n_samples < 100:
        raise ValueError("reverse perplexity needs at least 100 samples")
    if vocab is None:
        if not isinstance(model, Checkpoint):
            raise ValueError("a vocabulary is required for non-checkpoint providers")
        vocab = model.vocab
    samples = _sample_captions(model, n_samples, seed)
    fresh = train_lstm_lm(_as_corpus(samples, vocab), lm_cfg)
    return perplexity(fresh, real_test)


def forward_ppl(lm_on_real, model, n_samples, seed):
    """Perplexity of a real-data LM on generated captions."""
    if n_samples < 100:
        raise ValueError("forward perplexity needs at least 100 samples")
    if isinstance(model, Checkpoint) and model.vocab.tokens != lm_on_real.vocab.tokens:
        raise ValueError("model and language-model vocabularies differ")
    samples = _sample_captions(model, n_samples, seed)
    return perplexity(lm_on_real, samples)


def wasserstein_1d(a, b):
    """Exact Earth-Mover distance between equal-weight 1-D empirical
    distributions of equal size: mean |a_(i) - b_(i)| over sorted samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size != b.size:
        raise ValueError(f"sample sets must be 1-D and equal-sized, got {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("sample sets must be non-empty")
    return float(np.abs(np.sort(a) - np.sort(b)).mean())


# ---------------------------------------------------------------------------
# label fidelity


@dataclass
class BagClassifier:
    """Mean of token embeddings -> affine -> softmax; independent of the
    ARAE encoder so it can judge label fidelity as an outside oracle."""

    vocab_size: int
    num_labels: int
    store: ParamStore

    def counts_matrix(self, captions):
        x = np.zeros((len(captions), self.vocab_size))
        for row, cap in enumerate(captions):
            for tid in cap.content_ids():
                x[row, tid] += 1.0
            x[row] /= max(cap.length, 1)
        return x

    def logits(self, counts):
        tape = Tape()
        emb = ad.matmul(tape, tape.constant(counts), tape.param("clf.embed", self.store["clf.embed"]))
        out = ad.add_bias(
            tape,
            ad.matmul(tape, emb, tape.param("clf.w", self.store["clf.w"])),
            tape.param("clf.b", self.store["clf.b"]),
        )
        return out, tape

    def predict(self, captions):
        out, _ = self.logits(self.counts_matrix(captions))
        return out.value.argmax(axis=1)

    def accuracy(self, captions, labels):
        return float((self.predict(captions) == np.asarray(labels)).mean())


def train_bag_classifier(corpus, seed=0, embed_dim=32, iterations=400, lr=0.05):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("clf.embed", Tensor(rng.uniform(-0.1, 0.1, (len(corpus.vocab), embed_dim))))
    store.add("clf.w", Tensor(rng.uniform(-0.1, 0.1, (embed_dim, len(corpus.label_names)))))
    store.add("clf.b", Tensor.zeros(len(corpus.label_names)))
    clf = BagClassifier(len(corpus.vocab), len(corpus.label_names), store)
    counts = clf.counts_matrix(corpus.captions)
    labels = np.asarray(corpus.labels, dtype=np.intp)
    weights = np.full(len(labels), 1.0 / len(labels))
    optim = OptimConfig("rmsprop", lr)
    for _ in range(iterations):
        out, tape = clf.logits(counts)
        loss = ad.weighted_ce(tape, out, labels, weights)
        ad.optimizer_step(store, ad.backward(loss, tape), optim)
    return clf


class WeakOracleError(RuntimeError):
    """The fidelity classifier is too inaccurate to judge the generator."""


def label_fidelity(model, clf_corpus, n_per_label, seed, min_oracle_accuracy=0.9):
    """Per-label fraction of conditioned samples the oracle classifier
    assigns to the conditioning label."""
    if isinstance(model, Checkpoint) and not model.conditional:
        raise ValueError("label fidelity needs a conditional checkpoint")
    clf = train_bag_classifier(clf_corpus, seed=seed)
    acc = clf.accuracy(clf_corpus.captions, clf_corpus.labels)
    if acc < min_oracle_accuracy:
        raise WeakOracleError(
            f"oracle classifier accuracy {acc:.3f} below {min_oracle_accuracy:.2f}"
        )
    fractions = {}
    for label_id, name in enumerate(clf_corpus.label_names):
        if isinstance(model, Checkpoint):
            ids, _ = generate_ids(model, n_per_label, label=label_id, seed=seed + 1 + label_id)
        else:
            ids = model(n_per_label, label_id, seed + 1 + label_id)
        caps = _captions_from_ids(ids)
        fractions[name] = float((clf.predict(caps) == label_id).mean())
    return fractions


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    """Perplexity values keyed by protocol and model, plus run metadata."""

    entries: dict = field(default_factory=dict)

    def add(self, key, value):
        if isinstance(value, float) and ("ppl" in key or "perplexity" in key) and value < 1.0:
            raise ValueError(f"perplexity below 1 for {key}: {value}")
        self.entries[key] = value

    def render(self):
        lines = []
        for key, value in self.entries.items():
            if isinstance(value, float):
                lines.append(f"{key}: {value:.6g}")
            else:
                lines.append(f"{key}: {value}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render())


def run_eval(ckpt, lm, test_corpus, lm_cfg=None, n_samples=500, seed=0):
    """The full evaluation protocol for one model checkpoint.

    Reports held-out perplexity of the LM baseline, reverse and forward
    perplexity for the checkpoint, and (for conditional checkpoints) label
    fidelity; the fresh-LM config is frozen into the report.
    """
    lm_cfg = lm_cfg or LmConfig(seed=seed)
    report = EvalReport()
    report.add("vocab_size", len(ckpt.vocab))
    report.add("uniform_ppl_bound", float(len(ckpt.vocab)))
    report.add("test_captions", len(test_corpus))
    report.add("n_samples", n_samples)
    report.add("seed", seed)
    report.add("heldout_ppl_lstm_lm", perplexity(lm, test_corpus.captions))
    report.add(
        "reverse_ppl_arae",
        reverse_ppl(ckpt, test_corpus.captions, lm_cfg, n_samples, seed),
    )
    report.add("forward_ppl_arae", forward_ppl(lm, ckpt, n_samples, seed + 1))
    if ckpt.conditional:
        fractions = label_fidelity(ckpt, test_corpus, max(100, n_samples // 5), seed + 2)
        for name, frac in fractions.items():
            report.add(f"label_fidelity_{name}", frac)
        report.add("label_fidelity_mean", sum(fractions.values()) / len(fractions))
    for key, value in lm_cfg.to_dict().items():
        report.add(f"fresh_lm_{key}", value)
    return report
