import numpy as np
import numpy.testing as npt
import pytest

from ontograft.dataset import DatasetSplits, LabeledMolecule
from ontograft.model import (
    ModelConfig,
    NumericError,
    init_model,
    mlm_loss_value,
    predict_probabilities,
)
from ontograft.tokenizer import MASK_ID, N_SPECIALS, TokenSequence, train_bpe
from ontograft.training import (
    EpochLog,
    MaskingPolicy,
    OptimizerState,
    TrainConfig,
    TrainingError,
    adam_step,
    append_epoch_logs,
    apply_dynamic_masking,
    encode_corpus,
    finetune,
    load_checkpoint,
    pretrain,
)
from ontograft.metrics import binarize, prf


def make_sequences(rng, n, vocab_size, min_len=4, max_len=20):
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len))
        ids = (2,) + tuple(
            int(rng.integers(N_SPECIALS, vocab_size)) for _ in range(length)
        ) + (3,)
        out.append(TokenSequence(ids))
    return out


class TestMasking:
    def test_zero_probability_without_minimum_is_identity(self):
        rng = np.random.default_rng(0)
        batch = make_sequences(rng, 5, 20)
        policy = MaskingPolicy(mask_probability=0.0, force_minimum=False, seed=1)
        masked, targets = apply_dynamic_masking(batch, policy, epoch=1, vocab_size=20)
        assert all(m.ids == b.ids for m, b in zip(masked, batch))
        assert all(t == [] for t in targets)

    def test_probability_one_all_mask(self):
        rng = np.random.default_rng(1)
        batch = make_sequences(rng, 5, 20)
        policy = MaskingPolicy(
            mask_probability=1.0, mask_fraction=1.0, random_fraction=0.0,
            keep_fraction=0.0, seed=1,
        )
        masked, targets = apply_dynamic_masking(batch, policy, epoch=1, vocab_size=20)
        for orig, m, t in zip(batch, masked, targets):
            for pos, token in enumerate(orig.ids):
                if token >= N_SPECIALS:
                    assert m.ids[pos] == MASK_ID
                else:
                    assert m.ids[pos] == token
            assert len(t) == sum(1 for tok in orig.ids if tok >= N_SPECIALS)

    def test_masked_fraction_concentrates(self):
        # binomial concentration: 10,000 tokens at p=0.15 stay within [0.13, 0.17]
        rng = np.random.default_rng(2)
        batch = make_sequences(rng, 500, 30, min_len=20, max_len=21)
        total = sum(sum(1 for t in s.ids if t >= N_SPECIALS) for s in batch)
        assert total >= 10000
        policy = MaskingPolicy(seed=3)
        _, targets = apply_dynamic_masking(batch, policy, epoch=1, vocab_size=30)
        fraction = sum(len(t) for t in targets) / total
        assert 0.13 <= fraction <= 0.17

    def test_specials_never_selected(self):
        rng = np.random.default_rng(4)
        batch = make_sequences(rng, 20, 15)
        policy = MaskingPolicy(mask_probability=1.0, seed=5)
        _, targets = apply_dynamic_masking(batch, policy, epoch=1, vocab_size=15)
        for orig, entries in zip(batch, targets):
            for pos, original in entries:
                assert orig.ids[pos] >= N_SPECIALS
                assert original == orig.ids[pos]

    def test_at_least_one_masked_per_sequence(self):
        rng = np.random.default_rng(6)
        batch = make_sequences(rng, 50, 20, min_len=4, max_len=6)
        policy = MaskingPolicy(mask_probability=0.01, seed=7)  # tiny probability
        _, targets = apply_dynamic_masking(batch, policy, epoch=1, vocab_size=20)
        assert all(len(t) >= 1 for t in targets)

    def test_same_seed_epoch_identical(self):
        rng = np.random.default_rng(8)
        batch = make_sequences(rng, 10, 20)
        policy = MaskingPolicy(seed=9)
        a = apply_dynamic_masking(batch, policy, epoch=3, vocab_size=20)
        b = apply_dynamic_masking(batch, policy, epoch=3, vocab_size=20)
        assert [m.ids for m in a[0]] == [m.ids for m in b[0]]
        assert a[1] == b[1]

    def test_masks_differ_across_epochs(self):
        rng = np.random.default_rng(10)
        batch = make_sequences(rng, 20, 20, min_len=15, max_len=25)
        policy = MaskingPolicy(seed=11)
        a = apply_dynamic_masking(batch, policy, epoch=1, vocab_size=20)
        b = apply_dynamic_masking(batch, policy, epoch=2, vocab_size=20)
        assert a[1] != b[1]

    def test_fraction_validation(self):
        with pytest.raises(TrainingError):
            MaskingPolicy(mask_fraction=0.5, random_fraction=0.1, keep_fraction=0.1)


class TestAdam:
    def single_param_store(self, value):
        from ontograft.model import ParameterStore

        store = ParameterStore()
        store.add("cls.w", np.array([[value]]))
        return store

    def test_first_step_hand_evaluation(self):
        # m_hat = 1, v_hat = 1 after bias correction; update = lr/(1 + eps)
        store = self.single_param_store(1.0)
        store.grads["cls.w"][...] = 1.0
        state = OptimizerState.for_store(store, lr=0.1, weight_decay=0.0)
        adam_step(store, state)
        expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
        npt.assert_allclose(store.params["cls.w"][0, 0], expected, rtol=0, atol=1e-15)
        assert abs(store.params["cls.w"][0, 0] - 0.9) < 1e-7

    def test_zero_gradient_zero_decay_is_identity(self, tiny_config, tiny_store):
        state = OptimizerState.for_store(tiny_store, lr=0.1, weight_decay=0.0)
        before = {n: p.copy() for n, p in tiny_store.params.items()}
        tiny_store.zero_grads()
        adam_step(tiny_store, state)
        for name in tiny_store.names():
            npt.assert_array_equal(tiny_store.params[name], before[name])

    def test_decoupled_decay_scales_weights_only(self, tiny_config, tiny_store):
        state = OptimizerState.for_store(tiny_store, lr=0.1, weight_decay=0.1)
        before = {n: p.copy() for n, p in tiny_store.params.items()}
        tiny_store.zero_grads()
        adam_step(tiny_store, state)
        npt.assert_allclose(
            tiny_store.params["layers.0.attn.wq"], before["layers.0.attn.wq"] * 0.99
        )
        npt.assert_allclose(tiny_store.params["tok_emb"], before["tok_emb"] * 0.99)
        # layer-norm parameters and biases are exempt
        npt.assert_array_equal(tiny_store.params["layers.0.ln1.g"], before["layers.0.ln1.g"])
        npt.assert_array_equal(tiny_store.params["cls.b"], before["cls.b"])
        npt.assert_array_equal(tiny_store.params["mlm_bias"], before["mlm_bias"])

    def test_nan_gradient_names_parameter(self, tiny_store):
        state = OptimizerState.for_store(tiny_store, lr=0.1, weight_decay=0.0)
        tiny_store.zero_grads()
        tiny_store.grads["layers.1.ffn.w1"][0, 0] = np.nan
        with pytest.raises(NumericError) as err:
            adam_step(tiny_store, state)
        assert "layers.1.ffn.w1" in str(err.value)


def toy_setup(seed=0, n=24, n_labels=3):
    rng = np.random.default_rng(seed)
    motifs = ["N", "O", "S"]
    corpus = []
    molecules = []
    for i in range(n):
        present = rng.random(n_labels) < 0.5
        if not present.any():
            present[int(rng.integers(n_labels))] = True
        body = "C" * int(rng.integers(2, 6))
        for j, flag in enumerate(present):
            if flag:
                body += "(" + motifs[j] + ")" + "C" * int(rng.integers(1, 3))
        body += "C" * i  # force uniqueness
        corpus.append(body)
        molecules.append(LabeledMolecule(body, present.astype(np.int8)))
    tok = train_bpe(corpus, target_vocab=30, max_len=64)
    config = ModelConfig(
        vocab_size=len(tok.vocab), n_labels=n_labels, n_layers=1, n_heads=2,
        hidden_dim=16, ffn_dim=32, max_len=64, seed=seed,
    )
    return tok, config, corpus, molecules


class TestPretrain:
    def test_zero_epochs_is_identity(self):
        tok, config, corpus, _ = toy_setup()
        store = init_model(config)
        before = {n: p.copy() for n, p in store.params.items()}
        logs = pretrain(store, config, tok, corpus, [], TrainConfig(epochs=0),
                        MaskingPolicy(seed=1))
        assert logs == []
        for name in store.names():
            npt.assert_array_equal(store.params[name], before[name])

    def test_loss_decreases(self):
        tok, config, corpus, _ = toy_setup()
        store = init_model(config)
        logs = pretrain(
            store, config, tok, corpus, corpus[:4],
            TrainConfig(epochs=8, batch_size=4, learning_rate=1e-3, seed=2),
            MaskingPolicy(seed=2),
        )
        assert logs[-1].train_loss < logs[0].train_loss
        assert all(np.isfinite(l.val_loss) for l in logs)

    def test_reproducible(self):
        tok, config, corpus, _ = toy_setup()
        results = []
        for _ in range(2):
            store = init_model(config)
            logs = pretrain(
                store, config, tok, corpus, [],
                TrainConfig(epochs=3, batch_size=4, learning_rate=1e-3, seed=5),
                MaskingPolicy(seed=5),
            )
            results.append((logs, {n: p.copy() for n, p in store.params.items()}))
        assert [l.train_loss for l in results[0][0]] == [l.train_loss for l in results[1][0]]
        for name in results[0][1]:
            npt.assert_array_equal(results[0][1][name], results[1][1][name])

    def test_validation_leaves_parameters_untouched(self):
        tok, config, corpus, _ = toy_setup()
        store = init_model(config)
        seqs = encode_corpus(tok, corpus)
        masked, targets = apply_dynamic_masking(
            seqs, MaskingPolicy(seed=3), epoch=0, vocab_size=config.vocab_size
        )
        before = {n: p.copy() for n, p in store.params.items()}
        for _ in range(3):
            mlm_loss_value(store, config, masked, targets)
        for name in store.names():
            npt.assert_array_equal(store.params[name], before[name])

    def test_checkpoints_written_and_loadable(self, tmp_path):
        tok, config, corpus, _ = toy_setup()
        store = init_model(config)
        pretrain(
            store, config, tok, corpus, corpus[:4],
            TrainConfig(epochs=2, batch_size=4, seed=1, checkpoint_every=1),
            MaskingPolicy(seed=1),
            checkpoint_dir=str(tmp_path),
        )
        assert (tmp_path / "last.bin").exists()
        assert (tmp_path / "best.bin").exists()
        assert (tmp_path / "epoch0001.bin").exists()
        loaded, loaded_config, state = load_checkpoint(tmp_path / "last.bin")
        assert state is not None and state.step > 0
        for name in store.names():
            npt.assert_array_equal(loaded.params[name], store.params[name])


class TestFinetune:
    def make_splits(self, molecules):
        return DatasetSplits(train=molecules, validation=molecules[:6], test=[], seed=0)

    def test_zero_epochs_is_identity(self):
        tok, config, _, molecules = toy_setup()
        store = init_model(config)
        before = {n: p.copy() for n, p in store.params.items()}
        logs = finetune(store, config, tok, self.make_splits(molecules), TrainConfig(epochs=0))
        assert logs == []
        for name in store.names():
            npt.assert_array_equal(store.params[name], before[name])

    def test_overfit_sanity(self):
        # 32 molecules, 3 labels: training-set samples-F1 must exceed 0.95
        tok, config, _, molecules = toy_setup(seed=1, n=32)
        store = init_model(config)
        splits = self.make_splits(molecules)
        finetune(
            store, config, tok, splits,
            TrainConfig(epochs=200, batch_size=8, learning_rate=3e-3, seed=1),
        )
        seqs = encode_corpus(tok, [m.smiles for m in molecules])
        probs = predict_probabilities(store, config, seqs)
        y = np.stack([m.labels for m in molecules])
        _, _, f1 = prf(y, binarize(probs, 0.5), "samples")
        assert f1 >= 0.95

    def test_logs_carry_validation_f1(self):
        tok, config, _, molecules = toy_setup()
        store = init_model(config)
        logs = finetune(
            store, config, tok, self.make_splits(molecules),
            TrainConfig(epochs=2, batch_size=8, seed=3),
        )
        assert len(logs) == 2
        assert all(l.phase == "finetune" for l in logs)
        assert all(0.0 <= l.val_f1_samples <= 1.0 for l in logs)

    def test_label_width_mismatch(self):
        tok, config, _, molecules = toy_setup()
        bad = ModelConfig(
            vocab_size=config.vocab_size, n_labels=7, n_layers=1, n_heads=2,
            hidden_dim=16, ffn_dim=32, max_len=64, seed=0,
        )
        with pytest.raises(TrainingError):
            finetune(init_model(bad), bad, tok, self.make_splits(molecules), TrainConfig(epochs=1))


class TestConfigStubs:
    def test_unimplemented_options_rejected(self):
        with pytest.raises(NotImplementedError):
            TrainConfig(epochs=1, lr_schedule="cosine")
        with pytest.raises(NotImplementedError):
            TrainConfig(epochs=1, early_stopping=True)
        with pytest.raises(NotImplementedError):
            TrainConfig(epochs=1, gradient_clip=1.0)


class TestEpochLogCsv:
    def test_append_and_header(self, tmp_path):
        path = tmp_path / "log.csv"
        logs = [EpochLog(1, "pretrain", 2.0, 2.1, None, 0.5)]
        append_epoch_logs(path, logs)
        append_epoch_logs(path, [EpochLog(1, "finetune", 0.4, 0.5, 0.9, 0.2)])
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "epoch,phase,train_loss,val_loss,val_f1_samples,seconds"
        assert len(lines) == 3
        assert lines[1].startswith("1,pretrain,2,2.1,,")
        assert lines[2].startswith("1,finetune,0.4,0.5,0.9,")
