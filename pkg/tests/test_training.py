import dataclasses

import numpy as np
import pytest

from smartensemble import autodiff as ad
from smartensemble import training
from smartensemble.config import config_from_dict
from smartensemble.data import Dataset
from smartensemble.ensemble import (
    baseline_unweighted_average,
    collect_predictions,
    predict_class,
    smoothed_vote,
)
from smartensemble.errors import ContractError, TrainingAbort
from smartensemble.knapsack import noise, normalize_scores, smoothed_forward
from smartensemble.nn import MLPSpec, init_params, mlp_forward

from conftest import small_synthetic


@pytest.fixture(scope="module")
def synthetic():
    config = config_from_dict(small_synthetic())
    splits, agents = training.load_master_splits(config)
    return config, splits, agents


def blob_task(c=3, d=4, per_class=60, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(c, d))
    labels = np.repeat(np.arange(c), per_class)
    X = np.clip(centers[labels] + 0.08 * rng.normal(size=(labels.size, d)), 0, 1)
    return Dataset(X, labels, c)


def mlp_config(**agent):
    # idx paths are never opened: these tests hand datasets in directly
    files = {key: "-" for key in ("train_images", "train_labels", "test_images", "test_labels")}
    raw = {
        "dataset": {"source": "idx", "classes": [0, 1, 2], **files},
        "agent": {"hidden_sizes": [5], "epochs": 3, "batch_size": 16, **agent},
        "selector": {"hidden_sizes": [5], "epochs": 2, "batch_size": 32},
        "seed": 1,
    }
    return config_from_dict(raw)


class TestTrainAgent:
    def test_zero_learning_rate_keeps_init(self):
        config = mlp_config(learning_rate=0.0, epochs=1, optimizer="sgd")
        agent = training.train_agent(config, blob_task(), (0,), agent_id=2, seed=5)
        fresh = init_params(MLPSpec((4, 5, 3)), 5)
        assert agent.params.checksum() == fresh.checksum()

    def test_loss_curve_non_increasing(self):
        # one fixed batch of 100 samples, plain gradient descent
        ds = blob_task(per_class=40).subset(np.arange(100))
        config = mlp_config(optimizer="sgd", learning_rate=0.01, batch_size=100, epochs=30)
        losses = training.train_agent(config, ds, (1,), seed=0).train_stats["loss_history"]
        assert len(losses) == 30
        for prev, cur in zip(losses, losses[1:]):
            assert cur <= prev * 1.05
        assert losses[-1] < losses[0]

    def test_records_profile(self):
        config = mlp_config(epochs=20)
        ds = blob_task()
        agent = training.train_agent(config, ds, (2,), eval_dataset=ds)
        assert set(agent.train_stats) >= {"specialized", "complementary", "overall", "loss_history"}
        assert all(0 <= agent.train_stats[k] <= 100 for k in ("specialized", "complementary", "overall"))

    def test_empty_dataset(self):
        with pytest.raises(ContractError):
            training.train_agent(mlp_config(), Dataset(np.zeros((0, 4)), [], 3), (0,))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverging_loss_aborts_with_config(self):
        ds = blob_task()
        ds.features[0, 0] = np.inf
        with pytest.raises(TrainingAbort, match="config"):
            training.train_agent(mlp_config(), ds, (0,))

    def test_build_agents_is_reproducible(self):
        config = dataclasses.replace(mlp_config(train_size=50), agent=dataclasses.replace(mlp_config().agent, epochs=1))
        ds = blob_task()
        a = training.build_agents(config, (ds, ds, ds))
        b = training.build_agents(config, (ds, ds, ds))
        assert len(a) == 6
        assert [x.params.checksum() for x in a] == [x.params.checksum() for x in b]
        assert [x.specialty for x in a] == [(0,), (1,), (2,), (0, 1), (0, 2), (1, 2)]


class TestSelectorGradient:
    def test_matches_surrogate_finite_differences(self):
        # With the smoothed mask in the forward pass, the layer is the exact
        # derivative of L(softmax(sum(B o P))) up to Monte-Carlo error, so
        # common-random-number differences of that surrogate must agree.
        rng = np.random.default_rng(0)
        B, d, c, n, m = 4, 6, 3, 7, 100_000
        X, y = rng.uniform(size=(B, d)), rng.integers(0, c, B)
        P = rng.dirichlet(np.ones(c), size=(B, n)).transpose(0, 2, 1)
        spec = MLPSpec((d, 8, n), "scores")
        params = init_params(spec, 0)
        kcfg = dataclasses.replace(config_from_dict(small_synthetic()).knapsack(3), m=m)
        z = noise(1, 0, (B, m, n))

        def surrogate(theta):
            scores = mlp_forward(spec, params.with_flat(theta), X)
            y_hat = smoothed_vote(P, smoothed_forward(normalize_scores(scores), kcfg, z=z))
            return float(np.mean(-np.log(y_hat[np.arange(B), y] + ad.NLL_DELTA)))

        tape = ad.Tape()
        bound = params.bind(tape)
        loss = training.selector_loss(spec, bound, X, y, P, kcfg, tape, z=z, smooth=True)
        tape.backward(loss)
        g, theta = bound.grads().flat(), params.flat()
        assert float(loss.data) == pytest.approx(surrogate(theta), abs=1e-12)

        h = 1e-2
        dirs = [g / np.linalg.norm(g)] + list(rng.normal(size=(4, g.size)))
        dirs = [v / np.linalg.norm(v) for v in dirs]
        analytic = np.array([g @ v for v in dirs])
        fd = np.array([(surrogate(theta + h * v) - surrogate(theta - h * v)) / (2 * h) for v in dirs])
        assert np.linalg.norm(analytic - fd) / np.linalg.norm(analytic) < 5e-2

    def test_hard_forward_is_the_selected_vote(self):
        rng = np.random.default_rng(1)
        X, y = rng.uniform(size=(3, 5)), np.array([0, 1, 2])
        P = rng.dirichlet(np.ones(3), size=(3, 6)).transpose(0, 2, 1)
        spec = MLPSpec((5, 6), "scores")
        params = init_params(spec, 1)
        kcfg = config_from_dict(small_synthetic()).knapsack(2)
        loss = training.selector_loss(spec, params, X, y, P, kcfg, ad.Tape(), counter=4)
        selector = training.SelectorModel(spec, params, 2)
        y_hat = smoothed_vote(P, selector.select(X))
        assert float(loss.data) == pytest.approx(np.mean(-np.log(y_hat[np.arange(3), y] + ad.NLL_DELTA)), abs=1e-14)


class TestTrainSelector:
    def test_full_ensemble_is_unweighted_average(self, synthetic):
        config, (train, valid, test), agents = synthetic
        selector = training.train_selector(config, agents, train, valid, k=config.n)
        P = collect_predictions(agents, test.features)
        assert np.all(selector.select(test.features) == 1)
        expected = 100 * np.mean(predict_class(smoothed_vote(P, np.ones(config.n))) == test.labels)
        assert training.evaluate("e2e-mel", agents, selector, test, P=P) == expected
        assert training.evaluate("ua", agents, None, test, P=P) == expected
        np.testing.assert_array_equal(training.e2e_predict(selector, P, test.features), baseline_unweighted_average(P))

    def test_selects_specialists(self, synthetic):
        config, (train, valid, test), agents = synthetic
        selector = training.train_selector(config, agents, train, valid, k=3)
        B = selector.select(test.features)
        assert np.all(B.sum(axis=1) == 3)
        experts = np.array([[label in a.specialty for a in agents] for label in test.labels])
        hit_rate = np.mean((B * experts).sum(axis=1) > 0)
        assert hit_rate >= 0.8

    def test_agents_untouched(self):
        config = mlp_config(train_size=40, epochs=1)
        ds = blob_task()
        agents = training.build_agents(config, (ds, ds, ds))
        before = [a.params.checksum() for a in agents]
        training.train_selector(config, agents, ds, ds, k=2)
        assert [a.params.checksum() for a in agents] == before

    def test_reproducible(self, synthetic):
        config, (train, valid, _), agents = synthetic
        a = training.train_selector(config, agents, train, valid, k=2)
        b = training.train_selector(config, agents, train, valid, k=2)
        assert a.params.checksum() == b.params.checksum()
        assert a.history == b.history

    def test_history_is_sane(self, synthetic):
        config, (train, valid, _), agents = synthetic
        model = training.train_selector(config, agents, train, valid, k=2)
        assert 1 <= len(model.history) <= config.selector.epochs
        assert all(0 <= h["valid_accuracy"] <= 100 for h in model.history)
        best = max(h["valid_accuracy"] for h in model.history)
        assert model.history[model.best_epoch]["valid_accuracy"] == best

    def test_nan_predictions_abort_with_step(self, synthetic):
        config, (train, valid, _), agents = synthetic
        P = collect_predictions(agents, train.features)
        P[0, 0, 0] = np.nan
        with pytest.raises(TrainingAbort, match="step"):
            training.train_selector(config, agents, train, valid, k=2, P_train=P)

    def test_wrong_ensemble_size(self, synthetic):
        config, (train, valid, _), agents = synthetic
        with pytest.raises(ContractError):
            training.train_selector(config, agents[:5], train, valid, k=2)


class TestEvaluate:
    def test_perfect_agents(self, synthetic):
        config, (train, valid, test), agents = synthetic
        perfect = [dataclasses.replace(a, p_s=1.0, p_c=1.0) for a in agents]
        selector = training.SelectorModel(
            training.selector_spec(config, test.dim), init_params(training.selector_spec(config, test.dim), 0), 4
        )
        for method in training.METHODS:
            assert training.evaluate(method, perfect, selector, test, k=4) == 100.0

    def test_rs_full_equals_ua(self, synthetic):
        config, (_, _, test), agents = synthetic
        ua = training.evaluate("ua", agents, None, test)
        for seed in range(3):
            assert training.evaluate("rs", agents, None, test, k=config.n, seed=seed) == ua

    def test_rs_seeded(self, synthetic):
        _, (_, _, test), agents = synthetic
        a = training.evaluate("rs", agents, None, test, k=3, seed=1)
        assert a == training.evaluate("rs", agents, None, test, k=3, seed=1)

    def test_majority_vote_fixture(self):
        # votes per sample (columns = 3 agents): [0,0,1] [1,2,2] [2,1,0] [1,1,1]
        votes = np.array([[0, 0, 1], [1, 2, 2], [2, 1, 0], [1, 1, 1]])
        P = np.full((4, 3, 3), 0.1)
        for i, row in enumerate(votes):
            P[i, row, np.arange(3)] = 0.8
        labels = np.array([0, 1, 0, 1])  # MV: 0, 2, 0 (three-way tie), 1 -> 3 of 4
        ds = Dataset(np.zeros((4, 1)), labels, 3)
        assert training.evaluate("mv", [], None, ds, P=P) == 75.0

    def test_contract_errors(self, synthetic):
        _, (_, _, test), agents = synthetic
        with pytest.raises(ContractError):
            training.evaluate("e2e-mel", agents, None, test)
        with pytest.raises(ContractError):
            training.evaluate("rs", agents, None, test)
        with pytest.raises(ContractError):
            training.evaluate("vote", agents, None, test)


class TestSweep:
    def test_rows_and_identities(self, synthetic, tmp_path):
        config, splits, agents = synthetic
        config = dataclasses.replace(config, selector=dataclasses.replace(config.selector, epochs=2))
        reports = training.sweep_k(config, agents, splits, [1, 4, 15], csv_path=tmp_path / "sweep.csv")
        assert [r.k for r in reports] == [1, 4, 15]
        full = reports[-1].accuracy
        assert full["rs"] == full["ua"]
        for r in reports:
            assert all(0 <= v <= 100 for v in r.accuracy.values())
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == "k,e2e_mel,ua,mv,rs,seed,wallclock_s"
        assert [line.split(",")[0] for line in lines[1:]] == ["1", "4", "15"]
        assert training.best_k(reports) in (1, 4, 15)

    def test_abort_at_one_k_does_not_stop_the_rest(self, synthetic, monkeypatch):
        config, splits, agents = synthetic
        real = training.train_selector

        def flaky(config, agents, train, valid, k, *args):
            if k == 2:
                raise TrainingAbort("diverged")
            return real(config, agents, train, valid, k, *args)

        monkeypatch.setattr(training, "train_selector", flaky)
        config = dataclasses.replace(config, selector=dataclasses.replace(config.selector, epochs=1))
        reports = training.sweep_k(config, agents, splits, [2, 3])
        assert reports[0].error and np.isnan(reports[0].accuracy["e2e-mel"])
        assert reports[1].error is None and np.isfinite(reports[1].accuracy["e2e-mel"])

    def test_rejects_out_of_range_k(self, synthetic):
        config, splits, agents = synthetic
        with pytest.raises(ContractError):
            training.sweep_k(config, agents, splits, [0])

    def test_best_k_prefers_smaller_on_ties(self):
        reports = [training.RunReport(k, 0, {"e2e-mel": acc}) for k, acc in [(1, 80.0), (3, 90.0), (5, 90.0)]]
        assert training.best_k(reports) == 3
