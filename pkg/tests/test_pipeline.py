"""Simulation, training loops, separation, and scoring."""

import json
import math

import numpy as np
import pytest

from unisep.codec import CodecConfig, train_codec
from unisep.errors import ValidationError
from unisep.model.core import ModelConfig, init_model_params, load_model, sequence_loss
from unisep.model.infer import GREEDY, Sampling
from unisep.numerics import autodiff as T
from unisep.pipeline import (
    SEPARATE_PROMPT,
    WINDOWED_PROMPT,
    DataConfig,
    MixtureTriple,
    TrainConfig,
    batch_loss,
    build_codec_corpus,
    build_separation_layouts,
    check_codec_model_match,
    codec_reference,
    evaluate,
    load_trainer_state,
    pack_batches,
    pretrain,
    prompt_relevance,
    read_triples,
    score_outputs,
    separate,
    simulate_triples,
    swapped_prompt,
    train_separation,
    write_report,
    write_triples,
)
from unisep.rng import stream
from unisep.sequence import PREFIX
from unisep.signal import SourceSpec, Waveform, synthesize

# Short sources keep every training and generation test in the sub-second
# range without changing any code path.
MICRO_DATA = DataConfig(target_min_s=0.5, target_max_s=0.7, prompt_min_s=0.3,
                        prompt_max_s=0.4, windowed_total_s=0.6,
                        identities_per_family=2)
MODEL = ModelConfig(embed_dim=32, global_layers=1, local_layers=1, heads=2,
                    ff_dim=64, max_frames=256, n_q=2, codebook_size=17)
PCM_STEP = 2.0 ** -15


@pytest.fixture(scope="module")
def codec():
    corpus = build_codec_corpus(MICRO_DATA, seed=0, items_per_family=3,
                                duration_s=0.5, mixture_items=2)
    c, _ = train_codec(corpus, CodecConfig(n_q=2, codebook_size=17,
                                           gl_iterations=8),
                       steps=60, batch_frames=128, seed=0)
    return c


@pytest.fixture(scope="module")
def triples():
    return simulate_triples(6, MICRO_DATA, seed=1)


@pytest.fixture(scope="module")
def layouts(codec, triples):
    built, skipped = build_separation_layouts(codec, MODEL, triples)
    assert skipped == 0
    return built


def _budget(layouts):
    return 2 * max(lay.ids.shape[0] for lay in layouts)


class TestSimulate:
    def test_deterministic_in_seed(self):
        a = simulate_triples(3, MICRO_DATA, seed=7)
        b = simulate_triples(3, MICRO_DATA, seed=7)
        c = simulate_triples(3, MICRO_DATA, seed=8)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.mixture.samples, y.mixture.samples)
            np.testing.assert_array_equal(x.prompt.samples, y.prompt.samples)
        assert not np.array_equal(a[0].mixture.samples, c[0].mixture.samples)

    def test_mixture_is_exact_sum(self, triples):
        for t in triples:
            np.testing.assert_allclose(
                t.mixture.samples,
                t.target.samples + t.interference.samples, atol=1e-12)

    def test_never_clips(self, triples):
        for t in triples:
            assert np.max(np.abs(t.mixture.samples)) <= 0.95 + 1e-12

    def test_realized_snr_matches_request(self, triples):
        for t in triples:
            e_t = np.sum(t.target.samples ** 2)
            e_i = np.sum(t.interference.samples ** 2)
            assert abs(10 * np.log10(e_t / e_i) - t.snr_db) < 1e-9

    def test_identities_differ_and_come_from_pool(self, triples):
        pool = {(s.family, s.identity_seed)
                for s in MICRO_DATA.identity_pool()}
        for t in triples:
            a = (t.target_identity.family, t.target_identity.identity_seed)
            b = (t.interference_identity.family,
                 t.interference_identity.identity_seed)
            assert a != b and a in pool and b in pool

    def test_both_schemes_appear(self):
        schemes = {t.scheme for t in simulate_triples(40, MICRO_DATA, seed=3)}
        assert schemes == {SEPARATE_PROMPT, WINDOWED_PROMPT}

    def test_lengths_are_hop_multiples(self, triples):
        hop = MICRO_DATA.frame_hop_samples
        for t in triples:
            assert len(t.mixture) % hop == 0
            assert len(t.prompt) % hop == 0

    def test_windowed_prompt_and_target_are_one_render(self, triples):
        # Replays the documented draw order to recover the hidden source
        # render; prompt and target must be its two halves at one gain.
        idx = next(i for i, t in enumerate(triples)
                   if t.scheme == WINDOWED_PROMPT)
        t = triples[idx]
        cfg = MICRO_DATA
        rng = stream(1, "triple", idx)
        assert bool(rng.random() < cfg.windowed_fraction)
        pool = cfg.identity_pool()
        target_id = pool[int(rng.integers(len(pool)))]
        rest = [s for s in pool
                if (s.family, s.identity_seed) != (target_id.family,
                                                   target_id.identity_seed)]
        interferer_id = rest[int(rng.integers(len(rest)))]
        snr_db = float(rng.uniform(cfg.snr_min_db, cfg.snr_max_db))
        target_seed = int(rng.integers(2 ** 31))
        assert (target_id.family, target_id.identity_seed) == (
            t.target_identity.family, t.target_identity.identity_seed)
        assert (interferer_id.family, interferer_id.identity_seed) == (
            t.interference_identity.family,
            t.interference_identity.identity_seed)
        assert snr_db == t.snr_db

        half_n = len(t.prompt)
        assert len(t.target) == half_n
        sr = cfg.sample_rate_hz
        source = synthesize(target_id, 2 * half_n / sr, sample_rate_hz=sr,
                            seed=target_seed)
        j = int(np.argmax(np.abs(source.samples[:half_n])))
        u = t.prompt.samples[j] / source.samples[j]
        np.testing.assert_allclose(t.prompt.samples,
                                   u * source.samples[:half_n], atol=1e-12)
        np.testing.assert_allclose(t.target.samples,
                                   u * source.samples[half_n:], atol=1e-12)

    def test_separate_prompt_differs_from_target(self, triples):
        for t in triples:
            if t.scheme != SEPARATE_PROMPT:
                continue
            n = min(len(t.prompt), len(t.target))
            assert not np.array_equal(t.prompt.samples[:n],
                                      t.target.samples[:n])

    def test_snr_draws_are_uniform(self):
        n = 200
        snrs = np.array([t.snr_db for t in
                         simulate_triples(n, MICRO_DATA, seed=5)])
        lo, hi = MICRO_DATA.snr_min_db, MICRO_DATA.snr_max_db
        assert snrs.min() >= lo and snrs.max() <= hi
        u = np.sort((snrs - lo) / (hi - lo))
        grid = np.arange(1, n + 1) / n
        ks = max(np.max(grid - u), np.max(u - (grid - 1 / n)))
        assert ks < 1.628 / math.sqrt(n)  # 1% critical value

    def test_needs_two_identities(self):
        cfg = DataConfig(families=("harmonic",), identities_per_family=1)
        with pytest.raises(ValidationError):
            simulate_triples(2, cfg, seed=0)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            DataConfig(families=("gongs",))
        with pytest.raises(ValidationError):
            DataConfig(family_weights=(1.0,))  # three families by default
        with pytest.raises(ValidationError):
            DataConfig(target_min_s=2.0, target_max_s=1.0)
        with pytest.raises(ValidationError):
            DataConfig(windowed_fraction=1.5)
        with pytest.raises(ValidationError):
            DataConfig.from_dict({"cutoff_hz": 100})
        d = MICRO_DATA.to_dict()
        assert DataConfig.from_dict(d) == MICRO_DATA

    def test_triple_rejects_same_identity(self, triples):
        t = triples[0]
        with pytest.raises(ValidationError):
            MixtureTriple(mixture=t.mixture, prompt=t.prompt, target=t.target,
                          interference=t.interference,
                          target_identity=t.target_identity,
                          interference_identity=t.target_identity,
                          snr_db=0.0, scheme=t.scheme)


class TestCorpusAndManifest:
    def test_codec_corpus_count_and_determinism(self):
        items = build_codec_corpus(MICRO_DATA, seed=0, items_per_family=3,
                                   duration_s=0.5, mixture_items=2)
        again = build_codec_corpus(MICRO_DATA, seed=0, items_per_family=3,
                                   duration_s=0.5, mixture_items=2)
        assert len(items) == 3 * len(MICRO_DATA.families) + 2
        for a, b in zip(items, again):
            np.testing.assert_array_equal(a.samples, b.samples)
        for w in items:
            assert np.max(np.abs(w.samples)) <= 0.95 + 1e-12

    def test_manifest_round_trip(self, triples, tmp_path):
        manifest = write_triples(tmp_path / "set", triples)
        back = read_triples(manifest)
        assert len(back) == len(triples)
        for a, b in zip(triples, back):
            assert a.scheme == b.scheme
            assert a.snr_db == pytest.approx(b.snr_db)
            assert a.target_identity == b.target_identity
            assert a.interference_identity == b.interference_identity
            for part in ("mixture", "prompt", "target", "interference"):
                np.testing.assert_allclose(getattr(a, part).samples,
                                           getattr(b, part).samples,
                                           atol=PCM_STEP)

    def test_read_accepts_directory(self, triples, tmp_path):
        write_triples(tmp_path, triples[:2])
        assert len(read_triples(tmp_path)) == 2

    def test_read_missing_manifest(self, tmp_path):
        with pytest.raises(ValidationError):
            read_triples(tmp_path / "nowhere")

    def test_write_empty_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            write_triples(tmp_path, [])


class TestBatching:
    def test_pack_respects_budget_and_order(self):
        counts = [30, 50, 20, 40, 10]
        batches = pack_batches([0, 1, 2, 3, 4], counts, 80)
        assert batches == [[0, 1], [2, 3, 4]]
        for batch in batches:
            assert sum(counts[i] for i in batch) <= 80
        assert [i for b in batches for i in b] == [0, 1, 2, 3, 4]

    def test_pack_rejects_small_budget(self):
        with pytest.raises(ValidationError):
            pack_batches([0, 1], [10, 100], 64)

    def test_batch_loss_is_pooled_position_mean(self, layouts):
        store = init_model_params(MODEL, seed=0)
        batch = layouts[:3]
        mean, per = batch_loss(batch, store, MODEL)
        weights = [int(lay.loss_mask[1:].sum()) for lay in batch]
        oracle = sum(w * v for w, v in zip(weights, per)) / sum(weights)
        assert mean == pytest.approx(oracle, rel=1e-12)
        for lay, v in zip(batch, per):
            assert v == pytest.approx(
                sequence_loss(lay, store, MODEL).item(), rel=1e-6)

    def test_batch_duplication_keeps_mean(self, layouts):
        store = init_model_params(MODEL, seed=0)
        once, _ = batch_loss(layouts[:2], store, MODEL)
        twice, _ = batch_loss(layouts[:2] + layouts[:2], store, MODEL)
        assert twice == pytest.approx(once, rel=1e-9)

    def test_batch_gradients_match_single_graph(self, layouts):
        batch = layouts[:2]
        weights = [int(lay.loss_mask[1:].sum()) for lay in batch]
        total = sum(weights)

        store = init_model_params(MODEL, seed=0)
        parts = [T.mul_scalar(sequence_loss(lay, store, MODEL), w / total)
                 for lay, w in zip(batch, weights)]
        T.backward(T.add(parts[0], parts[1]))
        want = {n: store.grad_or_zero(n).copy() for n in store.names()}

        store2 = init_model_params(MODEL, seed=0)
        batch_loss(batch, store2, MODEL, with_grads=True)
        for n in store2.names():
            np.testing.assert_allclose(store2.grad_or_zero(n), want[n],
                                       rtol=2e-4, atol=1e-7)

    def test_empty_batch_rejected(self):
        store = init_model_params(MODEL, seed=0)
        with pytest.raises(ValidationError):
            batch_loss([], store, MODEL)


class TestTrainSeparation:
    def test_skip_accounting(self, codec, triples):
        tiny = ModelConfig(embed_dim=32, global_layers=1, local_layers=1,
                           heads=2, ff_dim=64, max_frames=60, n_q=2,
                           codebook_size=17)
        built, skipped = build_separation_layouts(codec, tiny, triples)
        assert len(built) + skipped == len(triples)
        assert skipped > 0  # 60 frames cannot hold these triples
        for lay in built:
            assert lay.ids.shape[0] // 2 <= 60

    def test_prefix_mode_layouts(self, codec, triples):
        built, _ = build_separation_layouts(codec, MODEL, triples,
                                            mode=PREFIX)
        for lay in built:
            assert lay.mode == PREFIX
            assert (lay.prefix_len + 1) % MODEL.n_q == 0

    def test_codec_model_mismatch_rejected(self, codec):
        other = ModelConfig(embed_dim=32, global_layers=1, local_layers=1,
                            heads=2, ff_dim=64, max_frames=64, n_q=2,
                            codebook_size=19)
        with pytest.raises(ValidationError):
            check_codec_model_match(codec, other)

    def test_loss_falls_and_log_shapes(self, codec, layouts):
        store = init_model_params(MODEL, seed=0)
        cfg = TrainConfig(token_budget=_budget(layouts), sep_epochs=3,
                          warmup_steps=5, eval_every=2)
        log = train_separation(store, MODEL, codec, layouts, cfg, seed=0,
                               eval_layouts=layouts[:2])
        assert log.steps == len(log.loss_history)
        assert log.trained_items == len(layouts)
        want_evals = [s for s in range(1, log.steps + 1)
                      if s % 2 == 0 or s == log.steps]
        assert [s for s, _ in log.eval_history] == sorted(set(want_evals))
        assert log.loss_history[-1] < log.loss_history[0]

    def test_max_steps_caps_run(self, codec, layouts):
        store = init_model_params(MODEL, seed=0)
        cfg = TrainConfig(token_budget=_budget(layouts), sep_max_steps=2,
                          warmup_steps=5, eval_every=0)
        log = train_separation(store, MODEL, codec, layouts, cfg, seed=0)
        assert log.steps == 2 and len(log.loss_history) == 2

    def test_resume_is_bit_exact(self, codec, layouts, tmp_path):
        budget = _budget(layouts)
        cap = TrainConfig(token_budget=budget, sep_max_steps=6,
                          warmup_steps=5, eval_every=0)

        s_full = init_model_params(MODEL, seed=0)
        full = train_separation(s_full, MODEL, codec, layouts, cap, seed=0)

        s_half = init_model_params(MODEL, seed=0)
        train_separation(s_half, MODEL, codec, layouts,
                         TrainConfig(token_budget=budget, sep_max_steps=3,
                                     warmup_steps=5, eval_every=0),
                         seed=0, out_dir=tmp_path)
        s_res, cfg_res, step = load_model(tmp_path / "model.uspt")
        assert cfg_res == MODEL and step == 3
        assert load_trainer_state(tmp_path / "trainer.uspt", s_res) == 3
        resumed = train_separation(s_res, MODEL, codec, layouts, cap, seed=0,
                                   start_step=3)

        full_sd, res_sd = s_full.state_dict(), s_res.state_dict()
        for name in full_sd:
            np.testing.assert_array_equal(full_sd[name], res_sd[name])
        np.testing.assert_array_equal(np.asarray(full.loss_history[3:]),
                                      np.asarray(resumed.loss_history))

    def test_trainer_state_requires_matching_names(self, tmp_path):
        from unisep.pipeline import save_trainer_state
        store = init_model_params(MODEL, seed=0)
        save_trainer_state(tmp_path / "t.uspt", store, 4)
        bigger = init_model_params(
            ModelConfig(embed_dim=32, global_layers=2, local_layers=1,
                        heads=2, ff_dim=64, max_frames=256, n_q=2,
                        codebook_size=17), seed=0)
        with pytest.raises(ValidationError):
            load_trainer_state(tmp_path / "t.uspt", bigger)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(mode="bidirectional")
        with pytest.raises(ValidationError):
            TrainConfig(lm_lr=0.0)
        with pytest.raises(ValidationError):
            TrainConfig(mask_prob=1.0)
        with pytest.raises(ValidationError):
            TrainConfig.from_dict({"momentum": 0.9})
        cfg = TrainConfig()
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestPretrain:
    def test_logs_both_tasks(self, codec):
        waves = build_codec_corpus(MICRO_DATA, seed=0, items_per_family=2,
                                   duration_s=0.5, mixture_items=0)
        store = init_model_params(MODEL, seed=0)
        log = pretrain(store, MODEL, codec, waves[:4],
                       TrainConfig(token_budget=600, warmup_steps=5),
                       seed=0, steps=6)
        assert log.steps == 6 and len(log.loss_history) == 6
        assert log.task_history["continuation"], "no continuation batches seen"
        assert log.task_history["inpaint"], "no inpaint batches seen"
        assert all(np.isfinite(v) for v in log.loss_history)

    def test_task_fraction_extremes(self, codec):
        waves = build_codec_corpus(MICRO_DATA, seed=0, items_per_family=1,
                                   duration_s=0.5, mixture_items=0)
        store = init_model_params(MODEL, seed=0)
        only_cont = pretrain(store, MODEL, codec, waves[:2],
                             TrainConfig(token_budget=400, warmup_steps=5),
                             seed=0, steps=3, continuation_fraction=1.0)
        assert not only_cont.task_history["inpaint"]
        only_inp = pretrain(init_model_params(MODEL, seed=1), MODEL, codec,
                            waves[:2],
                            TrainConfig(token_budget=400, warmup_steps=5),
                            seed=0, steps=3, continuation_fraction=0.0)
        assert not only_inp.task_history["continuation"]

    def test_single_item_loss_falls(self, codec):
        waves = build_codec_corpus(MICRO_DATA, seed=2, items_per_family=1,
                                   duration_s=0.5, mixture_items=0)
        store = init_model_params(MODEL, seed=0)
        log = pretrain(store, MODEL, codec, waves[:1],
                       TrainConfig(token_budget=300, warmup_steps=5),
                       seed=0, steps=25, continuation_fraction=1.0)
        first = float(np.mean(log.loss_history[:3]))
        last = float(np.mean(log.loss_history[-3:]))
        assert last < 0.8 * first

    def test_item_too_long_rejected(self, codec):
        small_ctx = ModelConfig(embed_dim=32, global_layers=1, local_layers=1,
                                heads=2, ff_dim=64, max_frames=16, n_q=2,
                                codebook_size=17)
        wave = build_codec_corpus(MICRO_DATA, seed=0, items_per_family=1,
                                  duration_s=0.5, mixture_items=0)[0]
        store = init_model_params(small_ctx, seed=0)
        with pytest.raises(ValidationError):
            pretrain(store, small_ctx, codec, [wave], TrainConfig(),
                     seed=0, steps=1)


class TestSeparate:
    def test_greedy_is_deterministic(self, codec, triples):
        store = init_model_params(MODEL, seed=0)
        t = triples[0]
        a = separate(store, MODEL, codec, t.mixture, t.prompt,
                     sampling=GREEDY, seed=0, max_new_frames=12)
        b = separate(store, MODEL, codec, t.mixture, t.prompt,
                     sampling=GREEDY, seed=0, max_new_frames=12)
        np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)
        assert a.truncated and a.generated_frames == 12

    def test_sampled_separation_is_seed_deterministic(self, codec, triples):
        store = init_model_params(MODEL, seed=0)
        t = triples[0]
        kw = dict(sampling=Sampling(kind="top_k", top_k=5, temperature=0.9),
                  max_new_frames=8)
        a = separate(store, MODEL, codec, t.mixture, t.prompt, seed=4, **kw)
        b = separate(store, MODEL, codec, t.mixture, t.prompt, seed=4, **kw)
        np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)

    def test_immediate_stop_yields_silence(self, codec, triples):
        store = init_model_params(MODEL, seed=0)
        vocab = MODEL.vocabulary()
        store.entry("head.b").value.data[vocab.a_end] = 50.0
        t = triples[0]
        res = separate(store, MODEL, codec, t.mixture, t.prompt,
                       sampling=GREEDY, seed=0)
        assert res.generated_frames == 0 and not res.truncated
        assert len(res.waveform) == len(t.mixture)
        assert not np.any(res.waveform.samples)

    def test_context_overflow_rejected(self, codec, triples):
        small_ctx = ModelConfig(embed_dim=32, global_layers=1, local_layers=1,
                                heads=2, ff_dim=64, max_frames=24, n_q=2,
                                codebook_size=17)
        store = init_model_params(small_ctx, seed=0)
        t = triples[0]
        with pytest.raises(ValidationError, match="room to generate"):
            separate(store, small_ctx, codec, t.mixture, t.prompt,
                     sampling=GREEDY)


class TestEvaluate:
    def test_perfect_output_scores_zero_and_wins(self, codec, triples):
        subset = triples[:3]
        recons = [codec_reference(codec, t.target) for t in subset]
        rep = score_outputs(codec, subset, recons)
        assert rep.mean_output_distance == 0.0
        assert rep.win_rate == 1.0
        for item in rep.items:
            assert item.baseline_distance > 0.0

    def test_mixture_recon_never_wins(self, codec, triples):
        # The baseline compared against itself; a strict win is impossible.
        subset = triples[:3]
        mixes = [codec_reference(codec, t.mixture) for t in subset]
        rep = score_outputs(codec, subset, mixes)
        assert rep.win_rate == 0.0

    def test_reference_is_codec_recon_not_raw_target(self, codec, triples):
        # Submitting the raw target scores above zero, which proves the
        # reference the metric uses is the tokenized reconstruction.
        subset = triples[:2]
        rep = score_outputs(codec, subset, [t.target for t in subset])
        assert rep.mean_output_distance > 0.0

    def test_short_output_is_scored_against_first_window(self, codec, triples):
        subset = triples[:1]
        recon = codec_reference(codec, subset[0].target)
        stub = Waveform(recon.samples[:500], recon.sample_rate_hz)
        rep = score_outputs(codec, subset, [stub])
        assert rep.items[0].aligned_samples == 500
        assert np.isfinite(rep.items[0].output_distance)
        assert rep.items[0].output_distance > 0.0

    def test_report_arithmetic(self, codec, triples):
        subset = triples[:3]
        outputs = [codec_reference(codec, subset[0].target),
                   codec_reference(codec, subset[1].mixture),
                   subset[2].target]
        rep = score_outputs(codec, subset, outputs)
        assert rep.win_rate == pytest.approx(
            np.mean([i.win for i in rep.items]))
        assert rep.mean_output_distance == pytest.approx(
            np.mean([i.output_distance for i in rep.items]))
        assert rep.mean_baseline_distance == pytest.approx(
            np.mean([i.baseline_distance for i in rep.items]))

    def test_output_count_must_match(self, codec, triples):
        with pytest.raises(ValidationError):
            score_outputs(codec, triples[:2], [triples[0].target])
        with pytest.raises(ValidationError):
            score_outputs(codec, [], [])

    def test_evaluate_end_to_end_deterministic(self, codec, triples):
        store = init_model_params(MODEL, seed=0)
        kw = dict(sampling=GREEDY, seed=0, max_new_frames=10)
        a = evaluate(store, MODEL, codec, triples[:2], **kw)
        b = evaluate(store, MODEL, codec, triples[:2], **kw)
        assert a == b
        assert len(a.items) == 2

    def test_write_report_files(self, codec, triples, tmp_path):
        subset = triples[:2]
        rep = score_outputs(codec, subset,
                            [codec_reference(codec, t.target) for t in subset])
        json_path, csv_path = write_report(rep, tmp_path)
        data = json.loads(json_path.read_text())
        assert data["n"] == 2
        assert data["win_rate"] == 1.0
        assert len(data["items"]) == 2
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 3  # header + one row per item
        assert lines[0].startswith("index,output_distance,baseline_distance")


class TestPromptSwap:
    def test_swapped_prompt_identity_and_determinism(self, triples):
        t = triples[0]
        a = swapped_prompt(t, seed=0, index=0)
        b = swapped_prompt(t, seed=0, index=0)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert len(a) == len(t.prompt)
        assert a.sample_rate_hz == t.prompt.sample_rate_hz
        assert not np.array_equal(a.samples, t.prompt.samples)
        # different item index, different content
        c = swapped_prompt(t, seed=0, index=1)
        assert not np.array_equal(a.samples, c.samples)

    def test_flip_logic(self, codec, triples):
        # Matched outputs are forced to the target reconstruction, so every
        # item classifies match_nearer == target; flips then depend only on
        # the swapped outputs.
        subset = triples[:2]
        store = init_model_params(MODEL, seed=0)
        rep = prompt_relevance(
            store, MODEL, codec, subset, sampling=GREEDY, seed=0,
            max_new_frames=8,
            match_outputs=[codec_reference(codec, t.target) for t in subset])
        assert rep.match_target_rate == 1.0
        for item in rep.items:
            assert item.flipped == (item.match_nearer == "target"
                                    and item.swap_nearer == "interference")
            assert item.match_target_distance == 0.0
        assert rep.flip_rate == pytest.approx(
            np.mean([i.flipped for i in rep.items]))

    def test_match_outputs_count_checked(self, codec, triples):
        store = init_model_params(MODEL, seed=0)
        with pytest.raises(ValidationError):
            prompt_relevance(store, MODEL, codec, triples[:2],
                             sampling=GREEDY, seed=0,
                             match_outputs=[triples[0].target])
