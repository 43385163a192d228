import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advjudge.attacks import (
    AttackConfig,
    bim,
    bim_batch,
    cw_l2,
    cw_l2_batch,
    fgsm,
    fgsm_batch,
    generate_corpus,
    load_corpus,
    next_class_target,
    save_corpus,
)
from advjudge.classifier import ARCHITECTURES
from advjudge.dataset import LabeledImageSet
from advjudge.exceptions import FormatError, InvalidArgumentError
from advjudge.numerics import Layer, NetworkModel, forward, init_network


def one_pixel_model():
    # logits = [2x, 0]: the loss gradient for label 0 is negative, for label 1 positive
    return NetworkModel([Layer("fully-connected", np.array([[2.0], [0.0]]), np.zeros(2))], (1,))


def random_cnn(classes=4, seed=0, scale=3.0):
    m = init_network((3, 8, 8), ARCHITECTURES["tiny-cnn"](classes), seed=seed)
    m.layers[-1].weight *= scale
    return m


def logit_margin(model, image, target):
    z = forward(model, image).astype(np.float64)
    return z[target] - np.delete(z, target).max()


class TestFGSM:
    def test_zero_epsilon(self):
        m = random_cnn()
        x = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
        rec = fgsm(m, x, 1, 0.0)
        np.testing.assert_array_equal(rec.adversarial, x)
        assert rec.linf == 0 and rec.l2 == 0

    def test_sign_rule(self):
        rec = fgsm(one_pixel_model(), np.array([0.3]), 0, 0.1)
        assert rec.adversarial[0] == pytest.approx(0.2)

    def test_clipped_to_unit_interval(self):
        rec = fgsm(one_pixel_model(), np.array([0.05]), 0, 0.1)
        assert rec.adversarial[0] == 0.0

    def test_success_flag(self):
        # logits [2x - 0.4, 0]: class 0 wins only above x = 0.2
        m = one_pixel_model()
        m.layers[0].bias[0] = -0.4
        assert fgsm(m, np.array([0.3]), 0, 0.25).success
        assert not fgsm(m, np.array([0.3]), 0, 0.05).success

    def test_negative_epsilon(self):
        with pytest.raises(InvalidArgumentError):
            fgsm(one_pixel_model(), np.array([0.3]), 0, -0.1)


class TestBIM:
    def test_hand_iteration(self):
        rec = bim(one_pixel_model(), np.array([0.5]), 1, epsilon=0.1, step=0.05, iterations=5)
        assert rec.adversarial[0] == pytest.approx(0.6, abs=1e-7)

    @given(st.integers(0, 1000), st.floats(0.0, 0.3))
    @settings(max_examples=25, deadline=None)
    def test_single_step_equals_fgsm(self, seed, eps):
        m = random_cnn(seed=seed % 5)
        rng = np.random.default_rng(seed)
        x = rng.random((4, 3, 8, 8)).astype(np.float32)
        y = rng.integers(0, 4, 4)
        a = fgsm_batch(m, x, y, eps)
        if eps == 0:
            np.testing.assert_array_equal(a, x)
            return
        b = bim_batch(m, x, y, eps, eps, 1)
        np.testing.assert_array_equal(a, b)

    @given(st.integers(0, 1000), st.floats(0.01, 0.3))
    @settings(max_examples=20, deadline=None)
    def test_stays_in_epsilon_ball(self, seed, eps):
        m = random_cnn(seed=seed % 5)
        rng = np.random.default_rng(seed)
        x = rng.random((3, 3, 8, 8)).astype(np.float32)
        y = rng.integers(0, 4, 3)
        for adv in (fgsm_batch(m, x, y, eps), bim_batch(m, x, y, eps, eps / 4, 10)):
            assert np.abs(adv.astype(np.float64) - x).max() <= eps + 1e-6
            assert adv.min() >= 0 and adv.max() <= 1

    def test_bad_step(self):
        with pytest.raises(InvalidArgumentError):
            bim(one_pixel_model(), np.array([0.5]), 1, step=0.0)


class TestCW:
    def test_already_target_gives_zero_perturbation(self):
        m = random_cnn(seed=1)
        x = np.random.default_rng(1).random((3, 8, 8)).astype(np.float32)
        target = int(forward(m, x).argmax())
        rec = cw_l2(m, x, target, AttackConfig(method="cw-l2", cw_iterations=20, search_steps=1))
        assert rec.success and rec.l2 < 1e-4

    def test_reaches_targets_with_small_perturbations(self):
        m = random_cnn(seed=2)
        rng = np.random.default_rng(2)
        x = rng.random((12, 3, 8, 8)).astype(np.float32)
        preds = forward(m, x).argmax(axis=1)
        targets = (preds + 1) % 4
        cfg = AttackConfig(method="cw-l2", cw_iterations=100, search_steps=5)
        adv, ok = cw_l2_batch(m, x, targets, cfg)
        assert ok.mean() >= 0.9
        assert adv.min() >= 0 and adv.max() <= 1
        np.testing.assert_array_equal(forward(m, adv[ok]).argmax(axis=1), targets[ok])
        # unsuccessful entries fall back to the original image
        np.testing.assert_array_equal(adv[~ok], x[~ok])

    def test_confidence_raises_margin(self):
        m = random_cnn(seed=3, scale=8.0)
        rng = np.random.default_rng(3)
        x = rng.random((6, 3, 8, 8)).astype(np.float32)
        targets = (forward(m, x).argmax(axis=1) + 1) % 4
        low = AttackConfig(method="cw-l2", cw_iterations=100, confidence=0.0)
        high = AttackConfig(method="cw-l2", cw_iterations=100, confidence=5.0)
        a0, ok0 = cw_l2_batch(m, x, targets, low)
        a5, ok5 = cw_l2_batch(m, x, targets, high)
        both = ok0 & ok5
        assert both.sum() >= 3
        for i in np.nonzero(both)[0]:
            m0 = logit_margin(m, a0[i], targets[i])
            m5 = logit_margin(m, a5[i], targets[i])
            assert m5 >= 5.0 - 1e-4 and m5 >= m0

    def test_invalid_config(self):
        with pytest.raises(InvalidArgumentError):
            AttackConfig(method="cw-l2", initial_const=0.0)
        with pytest.raises(InvalidArgumentError):
            AttackConfig(method="pgd")
        with pytest.raises(InvalidArgumentError):
            AttackConfig(confidence=-1)


class TestNextClass:
    def test_values(self):
        assert next_class_target(3, 10) == 4
        assert next_class_target(9, 10) == 0

    @given(st.integers(2, 50), st.data())
    def test_never_identity(self, k, data):
        label = data.draw(st.integers(0, k - 1))
        assert next_class_target(label, k) != label

    def test_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            next_class_target(10, 10)


def toy_benign(n=40, seed=0):
    m = random_cnn(seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3, 8, 8)).astype(np.float32)
    labels = forward(m, x).argmax(axis=1)
    # mislabel a few so that only correctly classified ones are attacked
    labels[:5] = (labels[:5] + 1) % 4
    return m, LabeledImageSet(x, labels, 4)


class TestCorpus:
    @pytest.mark.parametrize("method", ["fgsm", "bim", "cw-l2"])
    def test_generate(self, method):
        m, data = toy_benign()
        cfg = AttackConfig(method=method, epsilon=0.3, cw_iterations=50, batch_size=16)
        corpus = generate_corpus(m, data, cfg, 10)
        assert len(corpus.records) == 10 and corpus.shortfall == 0
        for r in corpus.records:
            assert r.success and r.source_index >= 5
            assert r.adversarial.min() >= 0 and r.adversarial.max() <= 1
            assert r.norms_consistent()
            if method == "cw-l2":
                assert r.target_label == next_class_target(r.true_label, 4) == r.predicted_label
            else:
                assert r.predicted_label != r.true_label and r.linf <= 0.3 + 1e-6

    def test_reproducible(self):
        m, data = toy_benign()
        cfg = AttackConfig(method="bim", epsilon=0.3, batch_size=8)
        a = generate_corpus(m, data, cfg, 12)
        b = generate_corpus(m, data, cfg, 12)
        assert [r.source_index for r in a.records] == [r.source_index for r in b.records]
        assert all(x.adversarial.tobytes() == y.adversarial.tobytes() for x, y in zip(a.records, b.records))

    def test_shortfall(self):
        m, data = toy_benign(n=12)
        corpus = generate_corpus(m, data, AttackConfig(method="fgsm", epsilon=0.0), 5)
        assert len(corpus.records) == 0 and corpus.shortfall == 5 and corpus.attempted == 7

    def test_file_roundtrip(self, tmp_path):
        m, data = toy_benign()
        corpus = generate_corpus(m, data, AttackConfig(method="fgsm", epsilon=0.3), 6)
        save_corpus(corpus, tmp_path / "c.advc")
        back = load_corpus(tmp_path / "c.advc")
        assert back.method == "fgsm" and back.config == corpus.config
        assert back.attempted == corpus.attempted and back.requested == 6
        for a, b in zip(corpus.records, back.records):
            assert a.original.tobytes() == b.original.tobytes()
            assert a.adversarial.tobytes() == b.adversarial.tobytes()
            assert (a.true_label, a.predicted_label, a.l2, a.source_index) == \
                (b.true_label, b.predicted_label, b.l2, b.source_index)

    def test_bad_files(self, tmp_path):
        (tmp_path / "x").write_bytes(b"ADVJ" + bytes(30))
        with pytest.raises(FormatError):
            load_corpus(tmp_path / "x")
        m, data = toy_benign()
        corpus = generate_corpus(m, data, AttackConfig(method="fgsm", epsilon=0.3), 3)
        save_corpus(corpus, tmp_path / "c")
        raw = (tmp_path / "c").read_bytes()
        (tmp_path / "t").write_bytes(raw[:-10])
        with pytest.raises(FormatError):
            load_corpus(tmp_path / "t")
