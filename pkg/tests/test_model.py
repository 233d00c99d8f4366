import math

import numpy as np
import pytest

from arae import autodiff as ad
from arae import corpus as C
from arae import model as M
from arae.autodiff import OptimConfig, ParamStore, Tape, Tensor


def tiny_corpus(n=40, seed=1):
    return C.synthesize_corpus(n=n, seed=seed, min_freq=1)


def tiny_config(**kw):
    base = dict(
        embed_dim=8,
        hidden_dim=12,
        noise_dim=6,
        mlp_hidden=16,
        batch_size=8,
        iterations=5,
        seed=3,
    )
    base.update(kw)
    return M.TrainConfig(**base)


def make_state(cfg, corp):
    return M.init_state(cfg, corp.vocab, corp.label_names, corp.label_marginal())


def snapshot(store):
    return {k: v.array.copy() for k, v in store.items()}


def unchanged(store, snap):
    return all(np.array_equal(store[k].array, snap[k]) for k in snap)


# --- noise ------------------------------------------------------------------


def test_sample_noise_deterministic_per_seed():
    spec = M.NoiseSpec(4)
    a = M.sample_noise(spec, 5, np.random.default_rng(7))
    b = M.sample_noise(spec, 5, np.random.default_rng(7))
    c = M.sample_noise(spec, 5, np.random.default_rng(8))
    assert np.array_equal(a.array, b.array)
    assert not np.array_equal(a.array, c.array)


def test_sample_noise_moments():
    z = M.sample_noise(M.NoiseSpec(8), 10000, np.random.default_rng(0)).array
    assert z.shape == (10000, 8)
    assert np.all(np.abs(z.mean(axis=0)) <= 0.05)
    assert np.all((z.var(axis=0) >= 0.9) & (z.var(axis=0) <= 1.1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        M.TrainConfig(clip_bound=0.0)
    with pytest.raises(ValueError):
        M.TrainConfig(encoder_grad_scale=0.0)
    with pytest.raises(ValueError):
        M.TrainConfig(encoder_grad_scale=1.5)
    with pytest.raises(ValueError):
        M.TrainConfig(temperature=0.0)
    with pytest.raises(ValueError):
        M.TrainConfig(conditional=True, num_labels=1)


def test_train_config_roundtrip():
    cfg = M.TrainConfig(iterations=7, conditional=True, num_labels=3)
    again = M.TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg


# --- reconstruction ---------------------------------------------------------


def test_reconstruction_loss_near_log_vocab_at_init():
    corp = tiny_corpus(n=64)
    cfg = tiny_config()
    state = make_state(cfg, corp)
    batch = next(C.batch_iter(corp, 16, seed=0))
    loss = M.reconstruction_loss(state, batch)
    assert loss == pytest.approx(math.log(len(corp.vocab)), rel=0.15)
    assert loss >= 0.0


def test_reconstruction_loss_overfits_single_caption():
    corp = tiny_corpus(n=8, seed=2)
    single = C.LabeledCorpus(corp.captions[:1] * 8, corp.labels[:1] * 8, corp.vocab, corp.label_names, corp.max_len)
    cfg = tiny_config(batch_size=4, ae_optim=OptimConfig("rmsprop", 1e-2))
    state = make_state(cfg, single)
    batches = C.batch_iter(single, 4, seed=0)
    for _ in range(500):
        stats = M.train_step_autoencoder(state, next(batches))
    assert stats.loss < 0.05
    assert M.reconstruction_accuracy(state, single) == 1.0


def test_autoencoder_step_touches_only_enc_dec():
    corp = tiny_corpus()
    state = make_state(tiny_config(), corp)
    g_before, d_before = snapshot(state.gen), snapshot(state.critic)
    M.train_step_autoencoder(state, next(C.batch_iter(corp, 8, seed=0)))
    assert unchanged(state.gen, g_before)
    assert unchanged(state.critic, d_before)


def test_autoencoder_loss_decreases_on_smoke_corpus():
    corp = tiny_corpus(n=10)
    cfg = tiny_config(batch_size=5)
    state = make_state(cfg, corp)
    batches = C.batch_iter(corp, 5, seed=1)
    first = M.train_step_autoencoder(state, next(batches)).loss
    for _ in range(99):
        last = M.train_step_autoencoder(state, next(batches)).loss
    assert last < first


def test_autoencoder_step_deterministic():
    corp = tiny_corpus()
    a = make_state(tiny_config(), corp)
    b = make_state(tiny_config(), corp)
    batch = next(C.batch_iter(corp, 8, seed=0))
    M.train_step_autoencoder(a, batch)
    M.train_step_autoencoder(b, batch)
    assert unchanged(a.enc, snapshot(b.enc))
    assert unchanged(a.dec, snapshot(b.dec))


# --- critic objective -------------------------------------------------------


def identity_critic(dim=1):
    """One-layer MLP with identity weights: D(x) = x for 1-d codes."""
    store = ParamStore()
    store.add("critic.fc0.w", Tensor(np.ones((dim, 1))))
    store.add("critic.fc0.b", Tensor.zeros(1))
    from arae.layers import MlpParams

    return MlpParams("critic", (dim, 1)), store


def test_critic_objective_hand_arithmetic():
    critic, store = identity_critic()
    tape = Tape()
    obj, real_mean, fake_mean = M.critic_objective(
        tape, store, critic, tape.constant([[1.0], [3.0]]), tape.constant([[0.0], [2.0]])
    )
    assert float(obj.value) == pytest.approx(1.0, abs=1e-12)
    assert float(real_mean.value) == pytest.approx(2.0, abs=1e-12)
    assert float(fake_mean.value) == pytest.approx(1.0, abs=1e-12)


def test_critic_objective_identical_sets_give_zero():
    critic, store = identity_critic()
    tape = Tape()
    same = [[0.5], [1.5], [-2.0]]
    obj, _, _ = M.critic_objective(tape, store, critic, tape.constant(same), tape.constant(same))
    assert float(obj.value) == pytest.approx(0.0, abs=1e-12)


def test_critic_objective_antisymmetric_under_swap():
    critic, store = identity_critic()
    a = [[0.3], [1.0]]
    b = [[-0.7], [2.5]]
    tape = Tape()
    fwd, _, _ = M.critic_objective(tape, store, critic, tape.constant(a), tape.constant(b))
    tape = Tape()
    rev, _, _ = M.critic_objective(tape, store, critic, tape.constant(b), tape.constant(a))
    assert float(fwd.value) == pytest.approx(-float(rev.value), abs=1e-12)


def test_critic_objective_conditional_requires_wrong_labels():
    critic, store = identity_critic(dim=3)
    tape = Tape()
    with pytest.raises(ValueError):
        M.critic_objective(
            tape, store, critic,
            tape.constant([[1.0]]), tape.constant([[0.0]]),
            labels=np.array([0]), wrong_labels=None, num_labels=2,
        )


# --- critic phase -----------------------------------------------------------


def test_critic_step_clips_weights_to_bound():
    corp = tiny_corpus()
    cfg = tiny_config(critic_optim=OptimConfig("rmsprop", 0.5))  # huge lr forces clipping
    state = make_state(cfg, corp)
    rng = np.random.default_rng(0)
    for _ in range(3):
        M.train_step_critic(state, next(C.batch_iter(corp, 8, seed=0)), rng)
    for _, tensor in state.critic.items():
        assert np.abs(tensor.array).max() <= cfg.clip_bound


def test_critic_step_touches_only_critic_and_encoder():
    corp = tiny_corpus()
    state = make_state(tiny_config(), corp)
    dec_before, gen_before = snapshot(state.dec), snapshot(state.gen)
    enc_before = snapshot(state.enc)
    M.train_step_critic(state, next(C.batch_iter(corp, 8, seed=0)), np.random.default_rng(0))
    assert unchanged(state.dec, dec_before)
    assert unchanged(state.gen, gen_before)
    assert not unchanged(state.enc, enc_before)  # lambda-scaled update applied


def test_critic_step_lambda_zero_leaves_encoder_bitwise():
    corp = tiny_corpus()
    state = make_state(tiny_config(), corp)
    enc_before = snapshot(state.enc)
    M.train_step_critic(
        state, next(C.batch_iter(corp, 8, seed=0)), np.random.default_rng(0), encoder_scale=0.0
    )
    assert unchanged(state.enc, enc_before)


def test_critic_phase_encoder_gradient_is_lambda_times_unscaled():
    corp = tiny_corpus()
    cfg = tiny_config()
    state = make_state(cfg, corp)
    batch = next(C.batch_iter(corp, 8, seed=0))
    _, grads, _ = M.critic_phase_grads(state, batch, np.random.default_rng(0))
    unscaled = state.enc.subset(grads)
    lam = cfg.encoder_grad_scale
    applied = {k: Tensor(lam * g.array) for k, g in unscaled.items()}
    for name, g in unscaled.items():
        diff = np.abs(applied[name].array - lam * g.array)
        assert diff.max() <= 1e-12
    # and the parameter delta produced through the actual step matches
    # lam * (delta at scale 1) within float reassociation noise; compare
    # through a gd config since rmsprop normalizes per-component scale
    cfg_gd = tiny_config(enc_adv_optim=OptimConfig("gd", 0.5))
    sa = make_state(cfg_gd, corp)
    sb = make_state(cfg_gd, corp)
    init = snapshot(sa.enc)
    M.train_step_critic(sa, batch, np.random.default_rng(0))
    M.train_step_critic(sb, batch, np.random.default_rng(0), encoder_scale=1.0)
    for name in init:
        delta_a = sa.enc[name].array - init[name]
        delta_b = sb.enc[name].array - init[name]
        assert np.abs(delta_a - lam * delta_b).max() <= 1e-12


def test_critic_step_wrong_labels_never_match_real():
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    for seed in range(20):
        wrong = M._sample_wrong_labels(labels, 3, np.random.default_rng(seed))
        assert np.all(wrong != labels)
        assert np.all((wrong >= 0) & (wrong < 3))


# --- generator phase --------------------------------------------------------


def test_generator_step_touches_only_generator():
    corp = tiny_corpus()
    state = make_state(tiny_config(), corp)
    enc_b, dec_b, critic_b = snapshot(state.enc), snapshot(state.dec), snapshot(state.critic)
    M.train_step_generator(state, np.random.default_rng(0))
    assert unchanged(state.enc, enc_b)
    assert unchanged(state.dec, dec_b)
    assert unchanged(state.critic, critic_b)
    assert not unchanged(state.gen, snapshot(make_state(tiny_config(), corp).gen))


def test_generator_step_increases_mean_score_on_frozen_critic():
    corp = tiny_corpus()
    cfg = tiny_config(gen_optim=OptimConfig("rmsprop", 1e-2))
    state = make_state(cfg, corp)
    # a few critic steps first so D is not at init
    rng = np.random.default_rng(0)
    for _ in range(5):
        M.train_step_critic(state, next(C.batch_iter(corp, 8, seed=0)), rng)

    def mean_score():
        noise = M.sample_noise(M.NoiseSpec(cfg.noise_dim), 256, np.random.default_rng(123))
        codes = M.generate_codes(state, noise.array, None)
        tape = Tape()
        from arae import layers

        scores = layers.mlp_forward(tape, state.critic, state.modules.critic, tape.constant(codes))
        return float(scores.value.mean())

    before = mean_score()
    M.train_step_generator(state, np.random.default_rng(7))
    assert mean_score() > before


def test_generator_step_deterministic():
    corp = tiny_corpus()
    a = make_state(tiny_config(), corp)
    b = make_state(tiny_config(), corp)
    M.train_step_generator(a, np.random.default_rng(5))
    M.train_step_generator(b, np.random.default_rng(5))
    assert unchanged(a.gen, snapshot(b.gen))


# --- full loop ---------------------------------------------------------------


def test_train_arae_trace_length_and_determinism():
    corp = tiny_corpus(n=48)
    cfg = tiny_config(iterations=10)
    ckpt_a, trace_a = M.train_arae(cfg, corp)
    ckpt_b, trace_b = M.train_arae(cfg, corp)
    assert len(trace_a) == 10
    assert [r.csv_line() for r in trace_a] == [r.csv_line() for r in trace_b]
    for key in ckpt_a.stores:
        assert unchanged(ckpt_a.stores[key], snapshot(ckpt_b.stores[key]))


def test_train_arae_conditional_label_mismatch_errors():
    corp = tiny_corpus()
    cfg = tiny_config(conditional=True, num_labels=5)
    with pytest.raises(ValueError):
        M.train_arae(cfg, corp)


def test_train_arae_abort_on_divergence_names_iteration():
    # saturating gates keep moderate blowups finite, so overflow the
    # parameters themselves to force a non-finite forward pass
    corp = tiny_corpus()
    cfg = tiny_config(ae_optim=OptimConfig("gd", 1e308), iterations=50)
    with pytest.raises(M.TrainingDiverged, match="iteration"):
        M.train_arae(cfg, corp)


def test_real_codes_unit_norm_generated_unconstrained():
    corp = tiny_corpus(n=48)
    cfg = tiny_config(iterations=8)
    ckpt, _ = M.train_arae(cfg, corp)
    codes = M.encode_captions(ckpt, corp.captions[:10])
    assert np.all(np.abs(np.linalg.norm(codes, axis=1) - 1.0) <= 1e-6)
    noise = M.sample_noise(M.NoiseSpec(cfg.noise_dim), 10, np.random.default_rng(0))
    gen_codes = M.generator_codes(ckpt, noise.array)
    assert np.abs(np.linalg.norm(gen_codes, axis=1) - 1.0).max() > 1e-3


def test_clipping_invariant_holds_through_training():
    corp = tiny_corpus(n=48)
    cfg = tiny_config(iterations=12, critic_optim=OptimConfig("rmsprop", 0.05))
    fired = []

    def check(store):
        worst = max(np.abs(t.array).max() for _, t in store.items())
        if worst > cfg.clip_bound:
            fired.append(worst)

    M.train_arae(cfg, corp, on_critic_update=check)
    assert fired == []


def test_write_trace_format(tmp_path):
    corp = tiny_corpus(n=48)
    cfg = tiny_config(iterations=3)
    _, trace = M.train_arae(cfg, corp)
    path = tmp_path / "trace.csv"
    M.write_trace(trace, path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 3
    first = lines[0].split(",")
    assert first[0] == "0"
    assert len(first) == 5
    float(first[1]), float(first[2]), float(first[3]), float(first[4])


# --- generation --------------------------------------------------------------


def trained_tiny_ckpt(conditional=False, iterations=30):
    corp = tiny_corpus(n=48)
    cfg = tiny_config(iterations=iterations, conditional=conditional, num_labels=3 if conditional else 0)
    ckpt, _ = M.train_arae(cfg, corp)
    return ckpt


def test_generate_count_and_max_len():
    ckpt = trained_tiny_ckpt()
    out = M.generate(ckpt, 7, seed=3)
    assert len(out) == 7
    for line in out:
        assert len(line.split()) <= ckpt.cfg.max_len


def test_generate_deterministic_per_seed():
    ckpt = trained_tiny_ckpt()
    assert M.generate(ckpt, 5, seed=9) == M.generate(ckpt, 5, seed=9)
    assert M.generate(ckpt, 5, seed=9) != M.generate(ckpt, 5, seed=10)


def test_generate_label_contract():
    unconditional = trained_tiny_ckpt(conditional=False)
    with pytest.raises(ValueError):
        M.generate(unconditional, 2, label=0, seed=1)
    conditional = trained_tiny_ckpt(conditional=True)
    assert len(M.generate(conditional, 2, label=1, seed=1)) == 2
    with pytest.raises(ValueError):
        M.generate(conditional, 2, label=7, seed=1)
    # label=None on a conditional checkpoint draws labels from the marginal
    assert len(M.generate(conditional, 3, seed=2)) == 3


# --- calibration and discrimination ------------------------------------------


def test_calibrate_threshold_midpoint_rule():
    # perfectly separated scores -> threshold at 0
    stats = M.CalibrationStats(1.0, 0.0, -1.0, 0.0, 0.0, 200, 200)
    assert stats.threshold == (stats.real_mean + stats.fake_mean) / 2


def test_calibrate_threshold_sample_floor():
    ckpt = trained_tiny_ckpt()
    with pytest.raises(ValueError, match="200"):
        M.calibrate_threshold(ckpt, [], n_fake=500, seed=0)


def test_calibrate_threshold_deterministic():
    corp = C.synthesize_corpus(n=250, seed=3)
    cfg = tiny_config(iterations=10)
    ckpt, _ = M.train_arae(cfg, corp)
    a = M.calibrate_threshold(ckpt, corp.captions, n_fake=250, seed=5)
    b = M.calibrate_threshold(ckpt, corp.captions, n_fake=250, seed=5)
    assert a == b


def test_train_arae_attaches_calibration_for_large_corpus():
    corp = C.synthesize_corpus(n=250, seed=3)
    ckpt, _ = M.train_arae(tiny_config(iterations=5), corp)
    assert ckpt.calibration is not None
    mid = (ckpt.calibration.real_mean + ckpt.calibration.fake_mean) / 2
    assert ckpt.calibration.threshold == pytest.approx(mid, abs=1e-12)


def test_discriminate_contract():
    corp = C.synthesize_corpus(n=250, seed=3)
    ckpt, _ = M.train_arae(tiny_config(iterations=5), corp)
    result = M.discriminate(ckpt, "Heart size within normal limits.")
    assert math.isfinite(result.score)
    assert result.verdict in ("real", "fake")
    assert result.verdict == ("real" if result.score >= result.threshold else "fake")
    with pytest.raises(ValueError):
        M.discriminate(ckpt, "   ")


def test_discriminate_requires_calibration():
    ckpt = trained_tiny_ckpt()  # 48-caption corpus, below the calibration floor
    assert ckpt.calibration is None
    with pytest.raises(ValueError, match="calibration"):
        M.discriminate(ckpt, "some text")


def test_discriminate_conditional_reports_best_label():
    corp = C.synthesize_corpus(n=250, seed=3)
    cfg = tiny_config(iterations=5, conditional=True, num_labels=3)
    ckpt, _ = M.train_arae(cfg, corp)
    result = M.discriminate(ckpt, "heart size is enlarged .")
    assert result.label in ckpt.label_names
    scores = [
        float(M.critic_scores(ckpt, M.encode_captions(ckpt, [C.encode_caption(ckpt.vocab, C.normalize_and_tokenize("heart size is enlarged ."), 30)]), np.array([lab]))[0])
        for lab in range(3)
    ]
    assert result.score == pytest.approx(max(scores), abs=1e-9)
