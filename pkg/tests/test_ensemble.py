import numpy as np
import pytest

from batch_sampler import SamplerRng
from data_parser import SyntheticSpec, gen_synthetic, split_disjoint_classes
from errors import ConfigError
from trainer.encoder import EncoderSpec
from trainer.ensemble import dreml_train, meta_class_grouping
from trainer.optimizers import OptimizerConfig
from trainer.train_loop import (LossConfig, Schedule, embed,
                                evaluate_embeddings, init_state, train_run)

SCHEDULE = Schedule(steps=3, eval_every=1)


@pytest.fixture
def base_loss():
    return LossConfig.from_defaults("proxy-nca", batch_size=12)


@pytest.fixture
def spec():
    return EncoderSpec("linear", 8, 8, seed=4)


class TestMetaClassGrouping:

    @pytest.mark.parametrize("n_classes,n_meta", [(8, 4), (10, 4), (7, 3)])
    def test_balanced_split(self, n_classes, n_meta):
        for seed in range(50):
            grouping = meta_class_grouping(n_classes, n_meta, SamplerRng(seed))
            assert grouping.shape == (n_classes,)
            sizes = np.bincount(grouping)
            assert sizes.size == n_meta
            assert sizes.max() - sizes.min() <= 1

    def test_groupings_vary_with_seed(self):
        draws = {tuple(meta_class_grouping(8, 4, SamplerRng(seed)))
                 for seed in range(10)}
        assert len(draws) > 1

    def test_capped_by_classes(self):
        grouping = meta_class_grouping(3, 50, SamplerRng(0))
        assert sorted(grouping) == [0, 1, 2]

    def test_one_class(self):
        with pytest.raises(ConfigError):
            meta_class_grouping(1, 4, SamplerRng(0))


class TestDremlTrain:

    def test_single_member_equals_plain_run(self, tiny_split, base_loss,
                                            spec):
        train, test = tiny_split
        ensemble, history = dreml_train(train, test, 1, 8, base_loss, spec,
                                        OptimizerConfig(), SCHEDULE)
        state = init_state(spec, base_loss, OptimizerConfig(),
                           train.n_classes)
        _, plain = train_run(state, train, test, SCHEDULE)
        assert history == plain
        np.testing.assert_array_equal(ensemble.groupings[0],
                                      np.arange(train.n_classes))

    def test_concatenated_dimension(self, tiny_split, base_loss, spec):
        train, test = tiny_split
        ensemble, history = dreml_train(train, test, 4, 4, base_loss, spec,
                                        OptimizerConfig(), SCHEDULE)
        assert ensemble.dim == 16
        assert ensemble.embed(test.features).shape == (test.size, 16)
        assert [e.step for e in history] == [0, 1, 2, 3]

    def test_workers_do_not_change_results(self, tiny_split, base_loss,
                                           spec):
        train, test = tiny_split
        runs = [dreml_train(train, test, 3, 4, base_loss, spec,
                            OptimizerConfig(),
                            Schedule(steps=2, workers=workers))[1]
                for workers in (1, 3)]
        assert runs[0] == runs[1]

    def test_rejects_ensemble_base(self, tiny_split, spec):
        train, test = tiny_split
        with pytest.raises(ConfigError):
            dreml_train(train, test, 2, 4, "dreml", spec, OptimizerConfig(),
                        SCHEDULE)

    def test_no_members(self, tiny_split, base_loss, spec):
        train, test = tiny_split
        with pytest.raises(ConfigError):
            dreml_train(train, test, 0, 4, base_loss, spec, OptimizerConfig(),
                        SCHEDULE)


@pytest.mark.acceptance
def test_ensemble_not_worse_than_best_member():
    train, test = split_disjoint_classes(gen_synthetic(SyntheticSpec()))
    schedule = Schedule(steps=500, eval_every=500)
    ensemble, history = dreml_train(
        train, test, 4, 4, LossConfig.from_defaults("proxy-nca"),
        EncoderSpec("linear", train.input_dim, 4, seed=0),
        OptimizerConfig(learning_rate=1e-3), schedule)
    members = [evaluate_embeddings(embed(m, test.features), test.labels,
                                   schedule, ensemble.seed, m.step)
               .recall_at[1] for m in ensemble.members]
    assert history[-1].recall_at[1] >= max(members) - 0.02
