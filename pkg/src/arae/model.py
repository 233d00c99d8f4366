"""ARAE training engine.

Three-phase loop per outer iteration: (1) the autoencoder trains on token
reconstruction, (2) the critic and (at a small gradient fraction) the encoder
train to separate encoded captions from generated codes, with critic weights
clipped after every update, (3) the generator trains to fool the critic.
Conditional mode concatenates a one-hot label onto the generator and critic
inputs, and the critic additionally sees real codes paired with wrong labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import NonFiniteError, OptimConfig, ParamStore, Tape, Tensor
from .corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    Batch,
    Caption,
    Vocabulary,
    batch_iter,
    detokenize,
    normalize_and_tokenize,
    encode_caption,
)

CHECKPOINT_VERSION = 1
CALIBRATION_MIN_SAMPLES = 200


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; the run is aborted, not patched over."""


@dataclass
class TrainConfig:
    max_len: int = 30
    embed_dim: int = 64
    hidden_dim: int = 128
    noise_dim: int = 32
    mlp_hidden: int = 128
    clip_bound: float = 1.0
    encoder_grad_scale: float = 0.05
    temperature: float = 0.1
    critic_iters_per_gen: int = 5
    batch_size: int = 32
    iterations: int = 3000
    seed: int = 0
    conditional: bool = False
    num_labels: int = 0
    ae_optim: OptimConfig = field(default_factory=lambda: OptimConfig("rmsprop", 2e-3))
    critic_optim: OptimConfig = field(default_factory=lambda: OptimConfig("rmsprop", 1e-4))
    gen_optim: OptimConfig = field(default_factory=lambda: OptimConfig("rmsprop", 1e-4))
    enc_adv_optim: OptimConfig = field(default_factory=lambda: OptimConfig("rmsprop", 3e-5))

    def __post_init__(self):
        if self.clip_bound <= 0:
            raise ValueError("clip_bound must be > 0")
        if not 0.0 < self.encoder_grad_scale <= 1.0:
            raise ValueError("encoder_grad_scale must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.critic_iters_per_gen < 1:
            raise ValueError("critic_iters_per_gen must be >= 1")
        if self.conditional and self.num_labels < 2:
            raise ValueError("conditional training needs at least 2 labels")

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        d = dict(d)
        for key in ("ae_optim", "critic_optim", "gen_optim", "enc_adv_optim"):
            if isinstance(d.get(key), dict):
                d[key] = OptimConfig(**d[key])
        return TrainConfig(**d)


@dataclass(frozen=True)
class NoiseSpec:
    dimension: int

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("noise dimension must be >= 1")


def sample_noise(spec, n, rng):
    """[n x dim] of i.i.d. standard normals via Box-Muller on the generator's
    uniform output (so the stream is pinned to the seed, not to library
    internals)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    total = n * spec.dimension
    pairs = (total + 1) // 2
    u1 = rng.random(pairs)
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], no log(0)
    theta = 2.0 * np.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:total]
    return Tensor(z.reshape(n, spec.dimension))


def one_hot(labels, num_labels):
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.shape[0], num_labels), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass(frozen=True)
class Modules:
    """Layer descriptors shared by training state and loaded checkpoints."""

    encoder: layers.TextEncoder
    decoder: layers.TextDecoder
    generator: layers.MlpParams
    critic: layers.MlpParams


def build_modules(cfg, vocab_size):
    label_extra = cfg.num_labels if cfg.conditional else 0
    enc = layers.TextEncoder(
        layers.EmbeddingTable("enc.embed", vocab_size, cfg.embed_dim),
        layers.LstmParams("enc.lstm", cfg.embed_dim, cfg.hidden_dim),
    )
    dec = layers.TextDecoder(
        layers.EmbeddingTable("dec.embed", vocab_size, cfg.embed_dim),
        layers.LstmParams("dec.lstm", cfg.embed_dim, cfg.hidden_dim),
        "dec.proj",
        vocab_size,
    )
    gen = layers.MlpParams(
        "gen", (cfg.noise_dim + label_extra, cfg.mlp_hidden, cfg.mlp_hidden, cfg.hidden_dim)
    )
    critic = layers.MlpParams(
        "critic", (cfg.hidden_dim + label_extra, cfg.mlp_hidden, cfg.mlp_hidden, 1)
    )
    return Modules(enc, dec, gen, critic)


@dataclass
class AraeState:
    cfg: TrainConfig
    vocab: Vocabulary
    label_names: list
    label_marginal: list
    modules: Modules
    enc: ParamStore
    dec: ParamStore
    gen: ParamStore
    critic: ParamStore

    def stores(self):
        return {"enc": self.enc, "dec": self.dec, "gen": self.gen, "critic": self.critic}


def init_state(cfg, vocab, label_names, label_marginal=None):
    """Seeded parameter init; same seed gives bitwise-identical stores."""
    rng = np.random.default_rng(cfg.seed)
    modules = build_modules(cfg, len(vocab))
    enc, dec, gen, critic = ParamStore(), ParamStore(), ParamStore(), ParamStore()
    modules.encoder.init_params(enc, rng)
    modules.decoder.init_params(dec, rng)
    modules.generator.init_params(gen, rng)
    modules.critic.init_params(critic, rng)
    if label_marginal is None:
        label_marginal = [1.0 / len(label_names)] * len(label_names) if label_names else []
    return AraeState(cfg, vocab, list(label_names), list(label_marginal), modules, enc, dec, gen, critic)


# ---------------------------------------------------------------------------
# losses


def merged_store(*stores):
    out = ParamStore()
    for store in stores:
        for name, tensor in store.items():
            out.add(name, tensor)
    return out


def build_reconstruction_loss(tape, state, ids, lengths):
    """Teacher-forced cross-entropy over the batch: per-caption masked mean,
    then mean over the batch. Returns (loss node, per-step logits, targets, mask).
    """
    both = merged_store(state.enc, state.dec)
    codes = layers.lstm_encode(tape, both, state.modules.encoder, ids, lengths)
    step_logits, targets, mask = layers.lstm_decode_teacher(
        tape, both, state.modules.decoder, codes, ids, lengths, BOS_ID, EOS_ID
    )
    batch = targets.shape[0]
    per_sample = mask.sum(axis=1)
    weights = mask / per_sample[:, None] / batch
    loss = None
    for t, logits in enumerate(step_logits):
        term = ad.weighted_ce(tape, logits, targets[:, t], weights[:, t])
        loss = term if loss is None else ad.add(tape, loss, term)
    return loss, step_logits, targets, mask


def reconstruction_loss(state, batch):
    """Scalar value of the reconstruction objective on one batch."""
    loss, _, _, _ = build_reconstruction_loss(Tape(), state, batch.ids, batch.lengths)
    return float(loss.value)


def reconstruction_accuracy(state, corpus, limit=None):
    """Teacher-forced token accuracy (argmax vs target over real positions)."""
    n = len(corpus) if limit is None else min(limit, len(corpus))
    correct = total = 0
    bs = state.cfg.batch_size
    for start in range(0, n, bs):
        caps = corpus.captions[start : start + bs]
        ids = np.array([c.ids for c in caps], dtype=np.intp)
        lengths = np.array([c.length for c in caps], dtype=np.intp)
        _, step_logits, targets, mask = build_reconstruction_loss(Tape(), state, ids, lengths)
        pred = np.stack([l.value.argmax(axis=1) for l in step_logits], axis=1)
        correct += ((pred == targets) * mask).sum()
        total += mask.sum()
    return float(correct / total)


def critic_objective(tape, store, critic, real_codes, fake_codes, labels=None, wrong_labels=None, num_labels=0):
    """mean(D(real)) - mean(D(fake)); in conditional mode inputs are
    code (+) one-hot(label) and the fake side averages (generated code, real
    label) and (real code, wrong label) with weight 1/2 each."""
    conditional = labels is not None
    if conditional and wrong_labels is None:
        raise ValueError("conditional critic objective needs wrong labels")

    def score_mean(codes, lab):
        x = codes
        if conditional:
            x = ad.concat_lastdim(tape, x, tape.constant(one_hot(lab, num_labels)))
        scores = layers.mlp_forward(tape, store, critic, x)
        return ad.scale(tape, ad.sum_all(tape, scores), 1.0 / scores.shape[0])

    real_mean = score_mean(real_codes, labels)
    if conditional:
        gen_term = score_mean(fake_codes, labels)
        wrong_term = score_mean(real_codes, wrong_labels)
        fake_mean = ad.add(tape, ad.scale(tape, gen_term, 0.5), ad.scale(tape, wrong_term, 0.5))
    else:
        fake_mean = score_mean(fake_codes, None)
    return ad.add(tape, real_mean, ad.scale(tape, fake_mean, -1.0)), real_mean, fake_mean


# ---------------------------------------------------------------------------
# training phases


@dataclass
class PhaseStats:
    loss: float = 0.0
    objective: float = 0.0
    real_mean: float = 0.0
    fake_mean: float = 0.0


def train_step_autoencoder(state, batch):
    """One plain-gradient-descent step on encoder+decoder reconstruction."""
    tape = Tape()
    loss, _, _, _ = build_reconstruction_loss(tape, state, batch.ids, batch.lengths)
    grads = ad.backward(loss, tape)
    ad.optimizer_step(state.enc, state.enc.subset(grads), state.cfg.ae_optim)
    ad.optimizer_step(state.dec, state.dec.subset(grads), state.cfg.ae_optim)
    return PhaseStats(loss=float(loss.value))


def generate_codes(state, noise, labels=None):
    """Run the generator off the training tape; returns a plain array."""
    tape = Tape()
    x = tape.constant(noise)
    if labels is not None:
        x = ad.concat_lastdim(tape, x, tape.constant(one_hot(labels, state.cfg.num_labels)))
    return layers.mlp_forward(tape, state.gen, state.modules.generator, x).value


def _sample_wrong_labels(labels, num_labels, rng):
    """Uniform draw over the labels that differ from each real label."""
    shift = rng.integers(1, num_labels, size=labels.shape[0])
    return (labels + shift) % num_labels


def sample_labels(marginal, n, rng):
    cdf = np.cumsum(np.asarray(marginal, dtype=np.float64))
    cdf = cdf / cdf[-1]
    return np.searchsorted(cdf, rng.random(n), side="right").astype(np.intp)


def critic_phase_grads(state, batch, rng):
    """Forward/backward for the critic phase without applying updates.

    Returns (stats, grads of the negated objective, wrong labels used).
    The generator runs off-tape: its parameters receive no gradient here.
    """
    cfg = state.cfg
    noise = sample_noise(NoiseSpec(cfg.noise_dim), batch.ids.shape[0], rng)
    labels = wrong = None
    if cfg.conditional:
        labels = batch.labels
        wrong = _sample_wrong_labels(batch.labels, cfg.num_labels, rng)
    fake = generate_codes(state, noise.array, labels)
    tape = Tape()
    both = merged_store(state.enc, state.critic)
    real_codes = layers.lstm_encode(tape, both, state.modules.encoder, batch.ids, batch.lengths)
    objective, real_mean, fake_mean = critic_objective(
        tape, both, state.modules.critic, real_codes, tape.constant(fake),
        labels=labels, wrong_labels=wrong, num_labels=cfg.num_labels,
    )
    neg = ad.scale(tape, objective, -1.0)
    grads = ad.backward(neg, tape)
    stats = PhaseStats(
        objective=float(objective.value),
        real_mean=float(real_mean.value),
        fake_mean=float(fake_mean.value),
    )
    return stats, grads, wrong


def train_step_critic(state, batch, rng, encoder_scale=None):
    """Ascend the critic objective: rmsprop on the critic, plain gradient
    descent on the encoder with its gradient scaled by encoder_grad_scale,
    then clip critic weights into [-clip_bound, clip_bound]."""
    cfg = state.cfg
    lam = cfg.encoder_grad_scale if encoder_scale is None else encoder_scale
    stats, grads, _ = critic_phase_grads(state, batch, rng)
    ad.optimizer_step(state.critic, state.critic.subset(grads), cfg.critic_optim)
    if lam != 0.0:
        enc_grads = {k: Tensor(lam * g.array) for k, g in state.enc.subset(grads).items()}
        ad.optimizer_step(state.enc, enc_grads, cfg.enc_adv_optim)
    ad.clip_weights(state.critic, cfg.clip_bound)
    return stats


def generator_phase_grads(state, rng):
    """Forward/backward for the generator phase: minimize -mean(D(G(z)))."""
    cfg = state.cfg
    n = cfg.batch_size
    noise = sample_noise(NoiseSpec(cfg.noise_dim), n, rng)
    labels = None
    tape = Tape()
    x = tape.constant(noise)
    if cfg.conditional:
        labels = sample_labels(state.label_marginal, n, rng)
        x = ad.concat_lastdim(tape, x, tape.constant(one_hot(labels, cfg.num_labels)))
    both = merged_store(state.gen, state.critic)
    codes = layers.mlp_forward(tape, both, state.modules.generator, x)
    scored = codes
    if cfg.conditional:
        scored = ad.concat_lastdim(tape, codes, tape.constant(one_hot(labels, cfg.num_labels)))
    scores = layers.mlp_forward(tape, both, state.modules.critic, scored)
    fooled = ad.scale(tape, ad.sum_all(tape, scores), 1.0 / n)
    loss = ad.scale(tape, fooled, -1.0)
    grads = ad.backward(loss, tape)
    return PhaseStats(fake_mean=float(fooled.value)), grads


def train_step_generator(state, rng):
    """One rmsprop step on the generator; encoder, decoder, critic untouched."""
    stats, grads = generator_phase_grads(state, rng)
    ad.optimizer_step(state.gen, state.gen.subset(grads), state.cfg.gen_optim)
    return stats


# ---------------------------------------------------------------------------
# full loop, checkpointing, generation


@dataclass
class TraceRecord:
    iteration: int
    reconstruction_loss: float
    critic_objective: float
    mean_real_score: float
    mean_fake_score: float

    def csv_line(self):
        return (
            f"{self.iteration},{self.reconstruction_loss!r},{self.critic_objective!r},"
            f"{self.mean_real_score!r},{self.mean_fake_score!r}"
        )


@dataclass
class CalibrationStats:
    """Critic-score statistics on real vs generated codes; the decision
    threshold for the discriminator game is the midpoint of the two means."""

    real_mean: float
    real_std: float
    fake_mean: float
    fake_std: float
    threshold: float
    n_real: int
    n_fake: int

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return CalibrationStats(**d)


@dataclass
class Checkpoint:
    version: int
    cfg: TrainConfig
    vocab: Vocabulary
    label_names: list
    label_marginal: list
    stores: dict  # {"enc","dec","gen","critic"} -> ParamStore
    calibration: CalibrationStats | None = None

    @property
    def conditional(self):
        return self.cfg.conditional

    def modules(self):
        return build_modules(self.cfg, len(self.vocab))


def quantize_store_fp32(store):
    """Round every parameter through fp32 so the in-memory checkpoint equals
    its on-disk round trip bitwise."""
    for name, tensor in store.items():
        store[name] = Tensor(tensor.array.astype(np.float32).astype(np.float64))
    return store


def train_arae(cfg, corpus, on_critic_update=None, log_every=0):
    """Run the three-phase loop for cfg.iterations outer iterations.

    Returns (Checkpoint, trace). The trace has one record per iteration with
    the reconstruction loss and the last critic step's objective and score
    means. Calibration statistics are attached when the corpus is large
    enough to support them.
    """
    if cfg.conditional:
        if not corpus.label_names or len(corpus.label_names) != cfg.num_labels:
            raise ValueError(
                f"conditional config expects {cfg.num_labels} labels, "
                f"corpus has {len(corpus.label_names)}"
            )
    batches = batch_iter(corpus, cfg.batch_size, cfg.seed + 1)
    train_rng = np.random.default_rng(cfg.seed + 2)
    state = init_state(cfg, corpus.vocab, corpus.label_names, corpus.label_marginal())
    trace = []
    for it in range(cfg.iterations):
        try:
            ae = train_step_autoencoder(state, next(batches))
            for _ in range(cfg.critic_iters_per_gen):
                cr = train_step_critic(state, next(batches), train_rng)
                if on_critic_update is not None:
                    on_critic_update(state.critic)
            train_step_generator(state, train_rng)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}") from exc
        trace.append(TraceRecord(it, ae.loss, cr.objective, cr.real_mean, cr.fake_mean))
        if log_every and (it + 1) % log_every == 0:
            print(
                f"iter {it + 1}/{cfg.iterations} "
                f"rec={ae.loss:.4f} w={cr.objective:.4f} "
                f"real={cr.real_mean:.4f} fake={cr.fake_mean:.4f}"
            )
    for store in state.stores().values():
        quantize_store_fp32(store)
    ckpt = Checkpoint(
        CHECKPOINT_VERSION,
        cfg,
        corpus.vocab,
        list(corpus.label_names),
        corpus.label_marginal(),
        state.stores(),
    )
    if len(corpus) >= CALIBRATION_MIN_SAMPLES:
        n_cal = min(512, len(corpus))
        idx = np.random.default_rng(cfg.seed + 3).choice(len(corpus), size=n_cal, replace=False)
        ckpt.calibration = calibrate_threshold(
            ckpt,
            [corpus.captions[i] for i in idx],
            labels=[corpus.labels[i] for i in idx] if cfg.conditional else None,
            n_fake=n_cal,
            seed=cfg.seed + 4,
        )
    return ckpt, trace


def write_trace(trace, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(rec.csv_line() + "\n")


# --- inference over a checkpoint or state ----------------------------------


def encode_captions(ckpt, captions):
    """Unit-norm codes for already-encoded captions."""
    ids = np.array([c.ids for c in captions], dtype=np.intp)
    lengths = np.array([c.length for c in captions], dtype=np.intp)
    tape = Tape()
    return layers.lstm_encode(tape, ckpt.stores["enc"], ckpt.modules().encoder, ids, lengths).value


def critic_scores(ckpt, codes, labels=None):
    tape = Tape()
    x = tape.constant(codes)
    if labels is not None:
        x = ad.concat_lastdim(tape, x, tape.constant(one_hot(labels, ckpt.cfg.num_labels)))
    return layers.mlp_forward(tape, ckpt.stores["critic"], ckpt.modules().critic, x).value[:, 0]


def generator_codes(ckpt, noise, labels=None):
    tape = Tape()
    x = tape.constant(noise)
    if labels is not None:
        x = ad.concat_lastdim(tape, x, tape.constant(one_hot(labels, ckpt.cfg.num_labels)))
    return layers.mlp_forward(tape, ckpt.stores["gen"], ckpt.modules().generator, x).value


def generate_ids(ckpt, n, label=None, seed=0):
    """Sample n captions as token-id lists; returns (id lists, labels or None).

    Unconditional checkpoints reject a label. Conditional checkpoints accept
    one label id for all samples, or draw per-sample labels from the stored
    training-label marginal when label is None.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not ckpt.conditional:
        if label is not None:
            raise ValueError("label supplied to an unconditional checkpoint")
        labels = None
    else:
        if label is not None:
            if not 0 <= label < ckpt.cfg.num_labels:
                raise ValueError(f"invalid label id {label}")
            labels = np.full(n, label, dtype=np.intp)
        else:
            labels = None  # drawn below, after rng creation
    rng = np.random.default_rng(seed)
    if ckpt.conditional and labels is None:
        labels = sample_labels(ckpt.label_marginal, n, rng)
    noise = sample_noise(NoiseSpec(ckpt.cfg.noise_dim), n, rng)
    codes = generator_codes(ckpt, noise.array, labels)
    ids = layers.lstm_decode_sample(
        ckpt.stores["dec"],
        ckpt.modules().decoder,
        codes,
        ckpt.cfg.temperature,
        ckpt.cfg.max_len,
        rng,
        BOS_ID,
        EOS_ID,
        PAD_ID,
    )
    return ids, labels


def generate(ckpt, n, label=None, seed=0):
    """Sample n captions as plain text (single-space separated tokens)."""
    ids, _ = generate_ids(ckpt, n, label=label, seed=seed)
    return [detokenize([ckpt.vocab.token_of(i) for i in seq]) for seq in ids]


# --- calibration and the discriminator game --------------------------------


def calibrate_threshold(ckpt, captions, labels=None, n_fake=256, seed=0):
    """Score encoded real captions and generated codes with the critic and
    fix the real/fake decision threshold at the midpoint of the two means."""
    if n_fake < CALIBRATION_MIN_SAMPLES or len(captions) < CALIBRATION_MIN_SAMPLES:
        raise ValueError(
            f"calibration needs at least {CALIBRATION_MIN_SAMPLES} real and fake samples"
        )
    if ckpt.conditional and labels is None:
        raise ValueError("conditional calibration needs caption labels")
    rng = np.random.default_rng(seed)
    real_codes = encode_captions(ckpt, captions)
    real_labels = np.asarray(labels, dtype=np.intp) if ckpt.conditional else None
    real = critic_scores(ckpt, real_codes, real_labels)
    fake_labels = sample_labels(ckpt.label_marginal, n_fake, rng) if ckpt.conditional else None
    noise = sample_noise(NoiseSpec(ckpt.cfg.noise_dim), n_fake, rng)
    fake = critic_scores(ckpt, generator_codes(ckpt, noise.array, fake_labels), fake_labels)
    return CalibrationStats(
        real_mean=float(real.mean()),
        real_std=float(real.std()),
        fake_mean=float(fake.mean()),
        fake_std=float(fake.std()),
        threshold=float((real.mean() + fake.mean()) / 2.0),
        n_real=len(captions),
        n_fake=n_fake,
    )


@dataclass
class Discrimination:
    score: float
    threshold: float
    verdict: str  # "real" or "fake"
    label: str | None = None


def discriminate(ckpt, caption_text):
    """Score free text with the critic and compare against the calibrated
    threshold. Conditional checkpoints score against every label and report
    the best one."""
    if ckpt.calibration is None:
        raise ValueError("checkpoint has no calibration statistics")
    tokens = normalize_and_tokenize(caption_text, ckpt.cfg.max_len)
    if not tokens:
        raise ValueError("caption is empty after normalization")
    caption = encode_caption(ckpt.vocab, tokens, ckpt.cfg.max_len)
    code = encode_captions(ckpt, [caption])
    label_name = None
    if ckpt.conditional:
        scores = [
            float(critic_scores(ckpt, code, np.array([lab]))[0])
            for lab in range(ckpt.cfg.num_labels)
        ]
        best = int(np.argmax(scores))
        score = scores[best]
        label_name = ckpt.label_names[best]
    else:
        score = float(critic_scores(ckpt, code)[0])
    threshold = ckpt.calibration.threshold
    verdict = "real" if score >= threshold else "fake"
    return Discrimination(score, threshold, verdict, label_name)
