import numpy as np
import pytest

from fedpoislab import attacks, data, diffusion as df, nn
from fedpoislab.errors import InputError


@pytest.fixture(scope="module")
def shard():
    return data.synth_mixture(4, 50, 16, 3.0, seed=3)


@pytest.fixture(scope="module")
def pcdm_plan():
    base = df.make_linear_schedule(1000)
    jump = df.make_jump_schedule(base, df.constant_expansion(1000, 50))
    return attacks.AttackPlan(kind="pcdm", jump=jump, sigma_v=1.0, mu_v=5.0,
                              epochs=10, seed=17)


class TestLabelFlip:
    def test_next_class_rule(self, shard):
        out = attacks.poison_label_flip(shard)
        assert np.array_equal(out.labels, (shard.labels + 1) % 4)

    def test_wraparound(self):
        ds = data.LabeledDataset(np.zeros((2, 2)), np.array([3, 9]), 10)
        out = attacks.poison_label_flip(ds)
        assert list(out.labels) == [4, 0]

    def test_no_fixed_points(self, shard):
        out = attacks.poison_label_flip(shard)
        assert not np.any(out.labels == shard.labels)

    def test_features_bitwise_unchanged(self, shard):
        out = attacks.poison_label_flip(shard)
        assert np.array_equal(out.features, shard.features)

    def test_needs_two_classes(self):
        ds = data.LabeledDataset(np.zeros((2, 2)), np.array([0, 0]), 1)
        with pytest.raises(InputError):
            attacks.poison_label_flip(ds)


class TestNoise:
    def test_tiny_sigma_limit(self, shard):
        out = attacks.poison_noise(shard, "light_gauss", 1e-9, seed=0)
        assert np.abs(out.features - shard.features).max() < 1e-6

    def test_labels_and_size_preserved(self, shard):
        for kind, param in (("light_gauss", 0.1), ("heavy_gauss", 0.5), ("sap", 0.1)):
            out = attacks.poison_noise(shard, kind, param, seed=1)
            assert len(out) == len(shard)
            assert np.array_equal(out.labels, shard.labels)

    def test_sap_probability_one_ish(self, shard):
        # p close to 1: nearly every coordinate becomes +-1
        out = attacks.poison_noise(shard, "sap", 0.999999, seed=2)
        assert np.isin(out.features, (-1.0, 1.0)).mean() > 0.999

    def test_sap_replacement_fraction(self):
        ds = data.LabeledDataset(np.zeros((100, 100)), np.zeros(100, dtype=int), 2)
        out = attacks.poison_noise(ds, "sap", 0.1, seed=3)
        replaced = (out.features != 0.0).mean()
        assert 0.08 <= replaced <= 0.12  # 10^4 coordinates, binomial bound

    def test_gauss_clipped_to_range(self, shard):
        out = attacks.poison_noise(shard, "heavy_gauss", 2.0, seed=4)
        assert out.features.min() >= -1.0 and out.features.max() <= 1.0

    def test_param_validation(self, shard):
        with pytest.raises(InputError):
            attacks.poison_noise(shard, "light_gauss", 0.0, seed=0)
        with pytest.raises(InputError):
            attacks.poison_noise(shard, "sap", 1.5, seed=0)

    def test_deterministic(self, shard):
        a = attacks.poison_noise(shard, "heavy_gauss", 0.5, seed=9)
        b = attacks.poison_noise(shard, "heavy_gauss", 0.5, seed=9)
        assert np.array_equal(a.features, b.features)


class TestPcdm:
    def test_output_size_is_kp(self, shard, pcdm_plan):
        out = attacks.poison_pcdm(shard, pcdm_plan, seed=5)
        assert len(out) == len(shard)  # k_p defaults to shard size
        sized = attacks.AttackPlan(kind="pcdm", jump=pcdm_plan.jump, epochs=2, k_p=37, seed=17)
        assert len(attacks.poison_pcdm(shard, sized, seed=5)) == 37

    def test_deterministic(self, shard, pcdm_plan):
        a = attacks.poison_pcdm(shard, pcdm_plan, seed=5)
        b = attacks.poison_pcdm(shard, pcdm_plan, seed=5)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_benign_shard_untouched(self, shard, pcdm_plan):
        before = shard.features.copy()
        attacks.poison_pcdm(shard, pcdm_plan, seed=5)
        assert np.array_equal(shard.features, before)

    def test_poisoned_training_hurts_accuracy(self, shard, pcdm_plan):
        train = data.synth_mixture(4, 150, 16, 3.0, seed=30)
        test = data.synth_mixture(4, 100, 16, 3.0, seed=31)
        poisoned = attacks.poison_pcdm(train, pcdm_plan, seed=6)

        def fit(ds):
            net = nn.init_network(nn.NetworkSpec((16, 128, 4)), seed=1)
            return nn.train_network(net, ds.features, ds.labels, epochs=10,
                                    batch_size=32, lr=0.05, seed=2)

        clean_acc = nn.evaluate_accuracy(fit(train), test.features, test.labels)
        poisoned_acc = nn.evaluate_accuracy(fit(poisoned), test.features, test.labels)
        assert poisoned_acc < clean_acc

    def test_plan_validation(self):
        with pytest.raises(InputError):
            attacks.AttackPlan(kind="pcdm")  # no schedule
        with pytest.raises(InputError):
            attacks.AttackPlan(kind="gradient_ascent")
        with pytest.raises(InputError):
            attacks.AttackPlan(kind="noise", noise_kind="uniform")


def test_apply_attack_dispatch(shard, pcdm_plan):
    flip = attacks.apply_attack(shard, attacks.AttackPlan(kind="label_flip"), seed=0)
    assert not np.any(flip.labels == shard.labels)
    noise = attacks.apply_attack(shard, attacks.AttackPlan(kind="noise", noise_kind="sap"), seed=0)
    assert np.array_equal(noise.labels, shard.labels)
    constant = attacks.apply_attack(shard, attacks.AttackPlan(kind="constant_update"), seed=0)
    assert constant is shard
    gen = attacks.apply_attack(shard, pcdm_plan, seed=0)
    assert len(gen) == len(shard)
