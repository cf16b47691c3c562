"""Agent pre-training, selection-net training, evaluation and k-sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig, derive_seed, substream
from .data import (
    Dataset,
    compose_specialized_split,
    enumerate_specializations,
    generate_synthetic_task,
    load_idx,
    select_classes,
    specialty_accuracy,
    split_validation,
)
from .ensemble import (
    AgentModel,
    baseline_majority_vote,
    baseline_random_selection,
    baseline_unweighted_average,
    collect_predictions,
    mask_and_vote,
    predict_class,
    smoothed_vote,
)
from .errors import ContractError, TrainingAbort
from .knapsack import knapsack_layer, normalize_scores, topk_select_batch
from .nn import MLPSpec, OptimizerState, ParamSet, init_params, mlp_forward, optimizer_step

logger = logging.getLogger(__name__)

METHODS = ("e2e-mel", "ua", "mv", "rs")
SWEEP_HEADER = ["k", "e2e_mel", "ua", "mv", "rs", "seed", "wallclock_s"]


@dataclass
class SelectorModel:
    spec: MLPSpec
    params: ParamSet
    k: int
    history: list = field(default_factory=list)
    best_epoch: int = -1

    def scores(self, X) -> np.ndarray:
        return mlp_forward(self.spec, self.params, X)

    def select(self, X) -> np.ndarray:
        """Hard k-masks for a batch of inputs, shape (batch, n)."""
        return topk_select_batch(normalize_scores(self.scores(X)), self.k)


@dataclass
class RunReport:
    k: int
    seed: int
    accuracy: dict
    history: list = field(default_factory=list)
    agents: list = field(default_factory=list)
    wallclock_s: float = 0.0
    error: Optional[str] = None
    config: Optional[dict] = None

    def to_dict(self):
        return asdict(self)


def _abort(message, config=None):
    echo = json.dumps(config.to_dict()) if config is not None else ""
    return TrainingAbort(f"{message}; config: {echo}" if echo else message)


def _batches(n_rows, batch_size, rng):
    order = rng.permutation(n_rows)
    for start in range(0, n_rows, batch_size):
        yield order[start : start + batch_size]


def agent_spec(config: ExperimentConfig, d) -> MLPSpec:
    return MLPSpec((d, *config.agent.hidden_sizes, config.c), "softmax")


def selector_spec(config: ExperimentConfig, d) -> MLPSpec:
    return MLPSpec((d, *config.selector.hidden_sizes, config.n), "scores")


# -- data --------------------------------------------------------------------


def load_master_splits(config: ExperimentConfig):
    """Master (train, valid, test) datasets. Synthetic tasks also return their oracle agents."""
    ds = config.dataset
    if ds.source == "synthetic":
        return generate_synthetic_task(ds.synthetic)
    train = load_idx(ds.train_images, ds.train_labels, split="train")
    test = load_idx(ds.test_images, ds.test_labels, split="test")
    c_all = max(train.n_classes, test.n_classes)
    train.n_classes = test.n_classes = c_all
    if ds.classes:
        train, test = select_classes(train, ds.classes), select_classes(test, ds.classes)
    if train.n_classes != config.c:
        raise ContractError(f"dataset has {train.n_classes} classes, config says c={config.c}")
    if config.d is not None and train.dim != config.d:
        raise ContractError(f"dataset width {train.dim} differs from config d={config.d}")
    train, valid = split_validation(train, ds.valid_fraction, substream(config.seed, "split"))
    if ds.max_train is not None and len(train) > ds.max_train:
        train = train.subset(np.sort(substream(config.seed, "max-train").permutation(len(train))[: ds.max_train]))
    return (train, valid, test), None


# -- agents ------------------------------------------------------------------


def train_agent(
    config: ExperimentConfig,
    agent_dataset: Dataset,
    specialty,
    agent_id=0,
    eval_dataset: Optional[Dataset] = None,
    seed=None,
) -> AgentModel:
    """Minibatch NLL training of one agent MLP on its own (specialised) data."""
    if len(agent_dataset) == 0:
        raise ContractError("agent dataset is empty")
    settings = config.agent
    spec = agent_spec(config, agent_dataset.dim)
    seed = derive_seed(config.seed, "agents", agent_id) if seed is None else seed
    params = init_params(spec, seed)
    state = OptimizerState(settings.optimizer, settings.learning_rate)
    rng = np.random.default_rng(seed)
    losses = []
    X, y = agent_dataset.features, agent_dataset.labels
    for epoch in range(settings.epochs):
        total = 0.0
        for idx in _batches(len(y), settings.batch_size, rng):
            tape = ad.Tape()
            bound = params.bind(tape)
            probs = mlp_forward(spec, bound, X[idx], tape)
            loss = ad.nll_loss(probs, y[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise _abort(f"agent {agent_id}: non-finite loss at epoch {epoch}", config)
            tape.backward(loss)
            params = optimizer_step(state, params, bound.grads())
            total += value * len(idx)
        losses.append(total / len(y))
    agent = AgentModel(agent_id, spec, params, tuple(specialty), {"loss_history": losses})
    if eval_dataset is not None:
        pred = np.argmax(agent.predict_proba(eval_dataset.features), axis=1)
        agent.train_stats.update(specialty_accuracy(pred, eval_dataset.labels, agent.specialty, config.c))
    return agent


def specialties_for(config: ExperimentConfig):
    specs = enumerate_specializations(config.c)
    return specs if config.specialization == "singles-and-pairs" else specs[: config.c]


def build_agents(config: ExperimentConfig, splits, oracle_agents=None):
    """Return the ensemble: the synthetic oracles, or freshly trained agents."""
    if oracle_agents is not None:
        return oracle_agents
    train, _, test = splits
    size = config.agent.train_size or len(train)
    agents = []
    for i, spec in enumerate(specialties_for(config)):
        rng = substream(config.seed, "agent-data", i)
        subset = compose_specialized_split(train, spec, config.rho, size, rng)
        agent = train_agent(config, subset, spec, agent_id=i, eval_dataset=test)
        logger.info("agent %d %s: %s", i, spec, {k: agent.train_stats.get(k) for k in ("specialized", "complementary", "overall")})
        agents.append(agent)
    return agents


def agent_profile(agents) -> dict:
    """Average specialised / complementary / overall accuracy over the ensemble."""
    keys = ("specialized", "complementary", "overall")
    return {k: float(np.mean([a.train_stats[k] for a in agents])) for k in keys}


# -- selection net -----------------------------------------------------------


def e2e_predict(selector: SelectorModel, P, X) -> np.ndarray:
    return predict_class(smoothed_vote(P, selector.select(X)))


def selector_loss(spec, params, X, y, P, kcfg, tape, counter=0, z=None, smooth=False) -> ad.Tensor:
    """Mean NLL of the smoothed vote over the selected sub-ensembles for one batch.

    ``params`` may be bound to ``tape`` (to collect gradients) or a plain
    ParamSet. ``smooth`` is passed on to :func:`knapsack_layer`.
    """
    scores = mlp_forward(spec, params, X, tape)
    if not np.all(np.isfinite(scores.data)):
        raise FloatingPointError("non-finite selection scores")
    b = knapsack_layer(scores, kcfg, tape, counter=counter, z=z, smooth=smooth)
    return ad.nll_loss(mask_and_vote(P, b, tape), y)


def train_selector(
    config: ExperimentConfig,
    agents,
    master_train: Dataset,
    master_valid: Dataset,
    k=None,
    P_train=None,
    P_valid=None,
) -> SelectorModel:
    """Fit the selection net end to end through the knapsack layer.

    Each step: agent predictions P for the batch, scores from the selection
    net, normalisation and the knapsack layer (hard mask forward, Monte-Carlo
    Jacobian backward), smoothed vote, NLL loss, backward, optimiser step.
    The parameters with the best validation accuracy are kept (earliest on
    ties); training stops after ``patience`` epochs without improvement.
    """
    k = config.k if k is None else k
    settings = config.selector
    if P_train is None:
        P_train = collect_predictions(agents, master_train.features)
    if P_valid is None:
        P_valid = collect_predictions(agents, master_valid.features)
    if P_train.shape[-1] != config.n:
        raise ContractError(f"ensemble has {P_train.shape[-1]} agents, config says n={config.n}")

    spec = selector_spec(config, master_train.dim)
    params = init_params(spec, derive_seed(config.seed, "selector", k))
    kcfg = config.knapsack(k, noise_seed=derive_seed(config.seed, "noise", k))
    state = OptimizerState(settings.optimizer, settings.learning_rate)
    rng = substream(config.seed, "selector-batches", k)

    X, y = master_train.features, master_train.labels
    model = SelectorModel(spec, params, k)
    best_acc, best_params, stale = -1.0, params, 0
    step = 0
    for epoch in range(settings.epochs):
        total = 0.0
        for idx in _batches(len(y), settings.batch_size, rng):
            tape = ad.Tape()
            bound = params.bind(tape)
            try:
                loss = selector_loss(spec, bound, X[idx], y[idx], P_train[idx], kcfg, tape, counter=step)
            except FloatingPointError as exc:
                raise _abort(f"selector k={k}: step {step}: {exc}", config) from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise _abort(f"selector k={k}: non-finite loss at step {step}", config)
            tape.backward(loss)
            try:
                params = optimizer_step(state, params, bound.grads())
            except FloatingPointError as exc:
                raise _abort(f"selector k={k}: step {step}: {exc}", config) from exc
            total += value * len(idx)
            step += 1
        model.params = params
        valid_acc = accuracy(e2e_predict(model, P_valid, master_valid.features), master_valid.labels)
        model.history.append({"epoch": epoch, "train_loss": total / len(y), "valid_accuracy": valid_acc})
        if valid_acc > best_acc:
            best_acc, best_params, stale = valid_acc, params, 0
            model.best_epoch = epoch
        else:
            stale += 1
            if settings.patience and stale >= settings.patience:
                break
    model.params = best_params
    return model


# -- evaluation --------------------------------------------------------------


def accuracy(pred, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(100.0 * np.count_nonzero(np.asarray(pred) == labels) / labels.size)


def evaluate(method, agents, selector: Optional[SelectorModel], dataset: Dataset, k=None, seed=0, P=None) -> float:
    """Test accuracy (percent) of one aggregation rule on ``dataset``."""
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")
    if P is None:
        P = collect_predictions(agents, dataset.features)
    if method == "e2e-mel":
        if selector is None:
            raise ContractError("method e2e-mel needs a trained selector")
        pred = e2e_predict(selector, P, dataset.features)
    elif method == "ua":
        pred = baseline_unweighted_average(P)
    elif method == "mv":
        pred = baseline_majority_vote(P)
    else:
        if k is None:
            raise ContractError("method rs needs k")
        pred = baseline_random_selection(P, k, substream(seed, "rs-baseline", k))
    return accuracy(pred, dataset.labels)


def sweep_k(config: ExperimentConfig, agents, splits, k_values=None, csv_path=None) -> list:
    """Train one selector per k and score all four methods on the test split.

    A training abort at one k is recorded in that k's report (accuracies NaN)
    and the sweep moves on.
    """
    train, valid, test = splits
    k_values = list(config.k_values if k_values is None else k_values)
    for k in k_values:
        if not 1 <= k <= config.n:
            raise ContractError(f"k={k} outside [1, {config.n}]")
    P_train = collect_predictions(agents, train.features)
    P_valid = collect_predictions(agents, valid.features)
    P_test = collect_predictions(agents, test.features)
    ua = evaluate("ua", agents, None, test, P=P_test)
    mv = evaluate("mv", agents, None, test, P=P_test)
    stats = [dict(getattr(a, "train_stats", {}), id=a.id, specialty=list(a.specialty)) for a in agents]
    stats = [{k: v for k, v in s.items() if k != "loss_history"} for s in stats]

    reports = []
    for k in k_values:
        start = time.perf_counter()
        rs = evaluate("rs", agents, None, test, k=k, seed=config.seed, P=P_test)
        try:
            selector = train_selector(config, agents, train, valid, k, P_train, P_valid)
            e2e = evaluate("e2e-mel", agents, selector, test, P=P_test)
            history, error = selector.history, None
        except TrainingAbort as exc:
            logger.error("k=%d aborted: %s", k, exc)
            e2e, history, error = float("nan"), [], str(exc)
        reports.append(
            RunReport(
                k=k,
                seed=config.seed,
                accuracy={"e2e-mel": e2e, "ua": ua, "mv": mv, "rs": rs},
                history=history,
                agents=stats,
                wallclock_s=time.perf_counter() - start,
                error=error,
                config=config.to_dict(),
            )
        )
        logger.info("k=%d e2e-mel=%.2f ua=%.2f mv=%.2f rs=%.2f", k, e2e, ua, mv, rs)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            f.write(sweep_csv(reports))
    return reports


def sweep_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in reports:
        a = r.accuracy
        writer.writerow(
            [r.k, repr(a["e2e-mel"]), repr(a["ua"]), repr(a["mv"]), repr(a["rs"]), r.seed, f"{r.wallclock_s:.3f}"]
        )
    return buf.getvalue()


def best_k(reports, method="e2e-mel"):
    """The k with the highest accuracy (smallest k on ties)."""
    scored = [(r.accuracy[method], -r.k) for r in reports if np.isfinite(r.accuracy[method])]
    if not scored:
        return None
    return -max(scored)[1]
