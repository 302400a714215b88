"""Training engine: KL loss, selection, degeneracy, determinism, firewall."""

import json

import numpy as np
import pytest
from conftest import central_difference, relative_error

from boottag.bootstrap import (
    DualModel,
    TrainConfig,
    _select,
    ensemble_loss,
    load_external_probabilities,
    run_bootstrap,
    train_baseline,
    train_step,
)
from boottag.datagen import (
    GrammarSpec,
    NoiseSpec,
    Template,
    generate_corpus,
    inject_noise,
    instances_from_corpus,
)
from boottag.encoder import DropoutConfig, TokenVocabulary
from boottag.model import Adam, JointModel
from boottag.tagging import Instance, Sentence, TagVocabulary


def tiny_grammar():
    return GrammarSpec(
        entity_lexicons={
            "PER": ["ann", "bo", "cy", "dee", "ed", "fay"],
            "ORG": ["k1", "k2", "k3", "k4"],
        },
        templates=[
            Template("{e0} works for {e1} .", ("PER", "ORG"), ((0, "works_for", 1),)),
            Template("{e0} leads {e1} .", ("PER", "ORG"), ((0, "leads", 1),)),
            Template("{e0} met {e1} .", ("PER", "PER"), ()),
        ],
        distractor_vocabulary=["quietly"],
    )


def tiny_dataset(n_train=40, n_val=12, noise=0.0, seed=0):
    corpus = generate_corpus(tiny_grammar(), n_train + n_val, seed=seed)
    train = corpus.sentences[:n_train]
    val = corpus.sentences[n_train:]
    vocab = corpus.tag_vocabulary()
    from boottag.datagen import Corpus

    train_corpus = Corpus(train, corpus.entity_types, corpus.relation_types)
    records = None
    if noise > 0:
        train_corpus, records, _ = inject_noise(train_corpus, NoiseSpec(noise, 0.0, seed=seed + 1))
    instances = instances_from_corpus(train_corpus, vocab, records)
    token_vocab = TokenVocabulary.from_corpus(train_corpus.sentences)
    provenance = {i.instance_id: i.provenance for i in instances} if records else None
    return instances, val, token_vocab, vocab, provenance


def quick_config(**overrides):
    base = dict(
        alpha=0.0,
        learning_rate=1e-2,
        batch_size=8,
        dropout_rate=0.1,
        tau_d=1.0,
        tau_m=1.0,
        k_passes=2,
        max_epochs=2,
        patience=5,
        width=4,
        warm_subsample=16,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestEnsembleLoss:
    def test_identical_marginals_give_zero(self):
        rng = np.random.default_rng(0)
        p = rng.random((4, 3)) + 0.1
        p /= p.sum(axis=1, keepdims=True)
        value, d_p, d_q = ensemble_loss(p, p.copy())
        assert value == pytest.approx(0.0, abs=1e-15)
        # constant matrix gradients: they vanish through the marginal map,
        # whose rows sum to one for every parameter value
        np.testing.assert_allclose(d_p, 1.0, atol=1e-12)
        np.testing.assert_allclose(d_q, -1.0, atol=1e-12)
        from boottag.crf import CrfParams, marginals_vjp

        emissions = rng.normal(size=(4, 3))
        params = CrfParams(
            projection=np.zeros((3, 2)),
            transitions=rng.normal(size=(3, 3)),
            start=rng.normal(size=3),
            end=rng.normal(size=3),
        )
        for grad in marginals_vjp(emissions, params, np.ones((4, 3))):
            np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_hand_computed_binary_example(self):
        # KL([.5,.5] || [.25,.75]) = .5 log 2 + .5 log(2/3) ~ 0.1438 nats
        value, _, _ = ensemble_loss(np.array([[0.5, 0.5]]), np.array([[0.25, 0.75]]))
        expected = 0.5 * np.log(0.5 / 0.25) + 0.5 * np.log(0.5 / 0.75)
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(0.1438, abs=1e-4)

    def test_non_negative_on_random_distributions(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = rng.random((3, 4)) + 1e-3
            p /= p.sum(axis=1, keepdims=True)
            q = rng.random((3, 4)) + 1e-3
            q /= q.sum(axis=1, keepdims=True)
            value, _, _ = ensemble_loss(p, q)
            assert value >= -1e-12

    def test_class_permutation_invariance(self):
        rng = np.random.default_rng(2)
        p = rng.random((3, 5)) + 0.1
        p /= p.sum(axis=1, keepdims=True)
        q = rng.random((3, 5)) + 0.1
        q /= q.sum(axis=1, keepdims=True)
        perm = rng.permutation(5)
        assert ensemble_loss(p, q)[0] == pytest.approx(
            ensemble_loss(p[:, perm], q[:, perm])[0], abs=1e-12
        )

    def test_raw_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        p = rng.random((2, 3)) + 0.1
        p /= p.sum(axis=1, keepdims=True)
        q = rng.random((2, 3)) + 0.1
        q /= q.sum(axis=1, keepdims=True)
        _, d_p, d_q = ensemble_loss(p, q)
        num_p = central_difference(lambda: ensemble_loss(p, q)[0], p)
        num_q = central_difference(lambda: ensemble_loss(p, q)[0], q)
        assert relative_error(d_p, num_p) < 1e-4
        assert relative_error(d_q, num_q) < 1e-4

    def test_gradient_through_both_models(self):
        # d KL(m1 || m2) w.r.t. every parameter of both models, against FD
        token_vocab = TokenVocabulary(["a", "b", "c"])
        tag_vocab = TagVocabulary(["X"], ["r"])
        m1 = JointModel.initialize(token_vocab, tag_vocab, width=3, seed=1, dropout_rate=0.0)
        m2 = JointModel.initialize(token_vocab, tag_vocab, width=3, seed=2, dropout_rate=0.0)
        sentence = Sentence(tokens=("a", "c", "b"), entities=((0, 1, 0),))
        instance = Instance(sentence=sentence, query=0, tags=[1, 0, 0], instance_id="i")

        def kl():
            return ensemble_loss(m1.marginals(instance), m2.marginals(instance))[0]

        _, d_p, d_q = ensemble_loss(m1.marginals(instance), m2.marginals(instance))
        _, _, grads1 = m1.instance_grads(instance, m1.dropout(), grad_marginals=d_p, with_nll=False)
        _, _, grads2 = m2.instance_grads(instance, m2.dropout(), grad_marginals=d_q, with_nll=False)
        for name, tensor in m1.parameters().items():
            assert relative_error(grads1[name], central_difference(kl, tensor)) < 1e-4, f"f1 {name}"
        for name, tensor in m2.parameters().items():
            assert relative_error(grads2[name], central_difference(kl, tensor)) < 1e-4, f"f2 {name}"

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ensemble_loss(np.ones((2, 2)) / 2, np.ones((3, 2)) / 2)


class TestSelect:
    def test_threshold_keeps_scores_at_or_below(self):
        scores = np.array([0.1, 0.5, 0.9, 0.5])
        chosen, fallback = _select(scores, 0.5, 0.5)
        assert chosen.tolist() == [0, 1, 3]
        assert not fallback

    def test_empty_selection_falls_back_to_quantile(self):
        scores = np.array([0.5, 0.4, 0.9, 0.6])
        chosen, fallback = _select(scores, 0.1, 0.5)
        assert fallback
        assert chosen.tolist() == [0, 1]  # two most confident

    def test_saturated_selection_falls_back_when_scores_discriminate(self):
        scores = np.linspace(0.0, 0.2, 100)
        chosen, fallback = _select(scores, 0.9, 0.7)
        assert fallback
        assert chosen.shape[0] == 70
        assert chosen.tolist() == list(range(70))

    def test_zero_spread_full_selection_stands(self):
        scores = np.zeros(50)
        chosen, fallback = _select(scores, 0.0, 0.7)
        assert not fallback
        assert chosen.shape[0] == 50


class TestTrainStep:
    def test_loss_decreases_over_first_epoch(self):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset()
        model = JointModel.initialize(token_vocab, tag_vocab, width=4, seed=0, dropout_rate=0.1)
        dual = DualModel(model, None, Adam(model.parameters(), lr=1e-2), None)
        dropout = DropoutConfig(rate=0.1, mode="stochastic", seed=0)
        config = quick_config()
        losses = []
        for start in range(0, len(instances) - 8, 8):
            batch = instances[start : start + 8]
            l1, _, _, _ = train_step(dual, batch, config, dropout, None)
            losses.append(l1)
        first, last = losses[0], np.median(losses[-3:])
        assert last < first

    def test_empty_batch_rejected(self):
        instances, _, token_vocab, tag_vocab, _ = tiny_dataset()
        model = JointModel.initialize(token_vocab, tag_vocab, width=4, seed=0)
        dual = DualModel(model, None, Adam(model.parameters(), lr=1e-2), None)
        with pytest.raises(ValueError):
            train_step(dual, [], quick_config(), DropoutConfig(rate=0.1), None)


class TestDegeneracy:
    def test_bootstrap_with_inert_settings_matches_baseline_bitwise(self, tmp_path):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset()
        config = quick_config(alpha=0.0, tau_d=1.0, tau_m=1.0, max_epochs=3)
        boot_log = tmp_path / "boot.jsonl"
        base_log = tmp_path / "base.jsonl"
        run_bootstrap(instances, val, token_vocab, tag_vocab, config, metrics_path=boot_log)
        train_baseline(instances, val, token_vocab, tag_vocab, config, metrics_path=base_log)
        assert boot_log.read_bytes() == base_log.read_bytes()

    def test_alpha_zero_trains_no_second_model(self):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset()
        result = run_bootstrap(instances, val, token_vocab, tag_vocab, quick_config())
        assert result.dual.f2 is None
        assert all(r["loss_crf_2"] is None for r in result.metrics)
        assert all(r["loss_ensemble"] is None for r in result.metrics)

    def test_ensembled_run_logs_kl(self):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset(n_train=24)
        config = quick_config(alpha=1.0, max_epochs=1)
        result = run_bootstrap(instances, val, token_vocab, tag_vocab, config)
        assert result.dual.f2 is not None
        assert result.metrics[0]["loss_ensemble"] >= 0.0


class TestDeterminism:
    def test_identical_configs_reproduce_metrics_bitwise(self, tmp_path):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset(noise=0.3)
        config = quick_config(tau_d=0.5, tau_m=0.6, max_epochs=2, warm_subsample=12)
        logs = []
        for name in ("a", "b"):
            path = tmp_path / f"{name}.jsonl"
            run_bootstrap(instances, val, token_vocab, tag_vocab, config, metrics_path=path)
            logs.append(path.read_bytes())
        assert logs[0] == logs[1]

    def test_seed_changes_the_run(self):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset()
        r1 = run_bootstrap(instances, val, token_vocab, tag_vocab, quick_config(seed_init=1))
        r2 = run_bootstrap(instances, val, token_vocab, tag_vocab, quick_config(seed_init=99))
        m1 = [r["loss_crf_1"] for r in r1.metrics]
        m2 = [r["loss_crf_1"] for r in r2.metrics]
        assert m1 != m2


class TestSelectionLoop:
    def test_initial_threshold_at_max_keeps_everything(self):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset()
        result = run_bootstrap(
            instances, val, token_vocab, tag_vocab, quick_config(tau_d=1.0, tau_m=0.6, max_epochs=1)
        )
        assert result.state.history[0]["n_selected"] == len(instances)

    def test_model_uncertainty_reselects_from_everything(self):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset(n_train=30)
        config = quick_config(tau_d=0.5, tau_m=0.6, max_epochs=2, warm_subsample=12)
        result = run_bootstrap(instances, val, token_vocab, tag_vocab, config)
        # reselection happens per epoch and history tracks it
        assert len(result.state.history) == len(result.metrics) + 1
        for row in result.state.history[1:]:
            assert row["mean_uncertainty"] is not None

    def test_pv_zero_dropout_keeps_selection_inert(self):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset(n_train=24)
        config = quick_config(dropout_rate=0.0, tau_d=1.0, tau_m=0.0, max_epochs=2)
        result = run_bootstrap(instances, val, token_vocab, tag_vocab, config)
        for row in result.state.history[1:]:
            assert row["n_selected"] == len(instances)
            assert row["mean_uncertainty"] == 0.0

    def test_accumulate_mode_never_shrinks(self):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset(n_train=30, noise=0.4)
        config = quick_config(
            tau_d=0.5, tau_m=0.6, max_epochs=3, warm_subsample=12, accumulate_selection=True
        )
        result = run_bootstrap(instances, val, token_vocab, tag_vocab, config)
        sizes = [row["n_selected"] for row in result.state.history]
        assert all(a <= b for a, b in zip(sizes, sizes[1:]))


class TestProvenanceFirewall:
    def test_flags_never_influence_training(self):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset(n_train=30, noise=0.3)
        config = quick_config(tau_d=0.5, tau_m=0.6, max_epochs=2, warm_subsample=12)
        result_plain = run_bootstrap(instances, val, token_vocab, tag_vocab, config)
        flipped = [i.stripped() for i in instances]
        for i in flipped:
            i.provenance = "corrupted"
        result_flipped = run_bootstrap(flipped, val, token_vocab, tag_vocab, config)
        a = [{k: v for k, v in r.items() if k != "clean_fraction_selected"} for r in result_plain.metrics]
        b = [{k: v for k, v in r.items() if k != "clean_fraction_selected"} for r in result_flipped.metrics]
        assert a == b

    def test_provenance_map_feeds_the_log_only(self):
        instances, val, token_vocab, tag_vocab, provenance = tiny_dataset(n_train=30, noise=0.4)
        config = quick_config(max_epochs=1)
        with_map = run_bootstrap(
            instances, val, token_vocab, tag_vocab, config, provenance=provenance
        )
        without = run_bootstrap(instances, val, token_vocab, tag_vocab, config)
        assert with_map.metrics[0]["clean_fraction_selected"] is not None
        assert without.metrics[0]["clean_fraction_selected"] is None
        assert with_map.metrics[0]["val_f1"] == without.metrics[0]["val_f1"]


class TestExternalScores:
    def test_external_probabilities_drive_initial_selection(self, tmp_path):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset(n_train=20)
        C = tag_vocab.n_tags
        path = tmp_path / "probs.jsonl"
        with open(path, "w") as handle:
            for k, instance in enumerate(instances):
                if k < len(instances) // 2:  # confident rows
                    row = np.full((instance.n_tokens, C), 1e-6)
                    row[:, 1] = 1.0
                    row /= row.sum(axis=1, keepdims=True)
                else:  # uniform rows: maximal uncertainty
                    row = np.full((instance.n_tokens, C), 1.0 / C)
                handle.write(
                    json.dumps({"instance_id": instance.instance_id, "probabilities": row.tolist()})
                    + "\n"
                )
        config = quick_config(tau_d=0.5, max_epochs=1, external_scores_path=str(path))
        result = run_bootstrap(instances, val, token_vocab, tag_vocab, config)
        expected = {i.instance_id for i in instances[: len(instances) // 2]}
        assert set(result.state.trusted_history[0]) == expected

    def test_missing_instance_rejected(self, tmp_path):
        instances, val, token_vocab, tag_vocab, _ = tiny_dataset(n_train=10)
        path = tmp_path / "probs.jsonl"
        path.write_text("")
        config = quick_config(tau_d=0.5, max_epochs=1, external_scores_path=str(path))
        with pytest.raises(ValueError, match="missing instance"):
            run_bootstrap(instances, val, token_vocab, tag_vocab, config)

    def test_loader_validates_rows(self, tmp_path):
        path = tmp_path / "probs.jsonl"
        path.write_text('{"instance_id": "x"}\n')
        with pytest.raises(ValueError, match="malformed"):
            load_external_probabilities(path)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=-1).validate()
        with pytest.raises(ValueError):
            TrainConfig(tau_d=1.5).validate()
        with pytest.raises(ValueError):
            TrainConfig(patience=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(data_uncertainty="nope").validate()

    def test_hash_stable_and_sensitive(self):
        a, b = TrainConfig(), TrainConfig()
        assert a.config_hash() == b.config_hash()
        assert TrainConfig(alpha=2.0).config_hash() != a.config_hash()
