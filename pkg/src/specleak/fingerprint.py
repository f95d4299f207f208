"""Query fingerprinting: a decision-forest classifier over size traces.

The attacker profiles traces per prompt offline, trains a forest, then
labels fresh traces online. Forest induction is delegated to
scikit-learn behind this module's contract; prediction is a hard
majority vote across trees with ties broken toward the lowest label id.

Two split criteria are supported: Gini impurity (default) and squared
error on one-hot targets, which reproduces a regression-style forest
setup some traffic-analysis pipelines use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor

from .errors import ConfigError
from .observer import Trace, featurize


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 150
    max_depth: int = 15
    min_samples_split: int = 10
    min_samples_leaf: int = 1
    criterion: str = "gini"      # "gini" or "mse" (one-hot regression)
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.criterion not in ("gini", "mse"):
            raise ConfigError(f"unknown split criterion {self.criterion!r}")


@dataclass
class LabeledDataset:
    """Fixed-length feature vectors with prompt labels."""

    vectors: np.ndarray          # (n_samples, feature_len)
    labels: list[str]
    traces_per_query: int = 0

    @classmethod
    def from_traces(cls, traces: list[Trace], feature_len: int = 256,
                    traces_per_query: int = 0) -> "LabeledDataset":
        if any(t.label is None for t in traces):
            raise ValueError("all traces need labels")
        vectors = np.stack([featurize(t, feature_len) for t in traces])
        return cls(vectors=vectors, labels=[t.label for t in traces],
                   traces_per_query=traces_per_query)

    def label_ids(self) -> tuple[list[str], np.ndarray]:
        """Sorted label set and per-sample integer ids."""
        names = sorted(set(self.labels))
        index = {n: i for i, n in enumerate(names)}
        return names, np.array([index[l] for l in self.labels])


class ForestModel:
    """Trained forest plus its label set.

    Training labels are dense ids 0..K-1 in sorted label-name order, so
    per-tree predictions index label_names directly.
    """

    def __init__(self, label_names: list[str], estimator, criterion: str,
                 feature_len: int):
        self.label_names = label_names
        self.estimator = estimator
        self.criterion = criterion
        self.feature_len = feature_len


def majority_label(onehot_row: np.ndarray) -> int:
    """Argmax with lowest-index tie-break over a one-hot score row."""
    return int(np.argmax(onehot_row))


def train_forest(ds: LabeledDataset, cfg: ForestConfig) -> ForestModel:
    """Deterministic forest training on a labeled trace dataset."""
    names, y = ds.label_ids()
    if len(names) < 2:
        raise ConfigError("training needs at least two distinct labels")
    common = dict(n_estimators=cfg.n_trees, max_depth=cfg.max_depth,
                  min_samples_split=cfg.min_samples_split,
                  min_samples_leaf=cfg.min_samples_leaf,
                  bootstrap=cfg.bootstrap,
                  random_state=cfg.seed % (2 ** 32), n_jobs=1)
    if cfg.criterion == "mse":
        onehot = np.eye(len(names))[y]
        est = RandomForestRegressor(criterion="squared_error", **common)
        est.fit(ds.vectors, onehot)
    else:
        est = RandomForestClassifier(criterion="gini", **common)
        est.fit(ds.vectors, y)
    return ForestModel(label_names=names, estimator=est,
                       criterion=cfg.criterion,
                       feature_len=ds.vectors.shape[1])


def predict(model: ForestModel, fv: np.ndarray) -> tuple[str, float]:
    """Majority vote across trees; ties go to the lowest label id."""
    fv = np.asarray(fv, dtype=float)
    if fv.shape != (model.feature_len,):
        raise ValueError(f"feature vector must have length {model.feature_len}")
    row = fv.reshape(1, -1)
    n_labels = len(model.label_names)
    votes = np.zeros(n_labels, dtype=int)
    for tree in model.estimator.estimators_:
        pred = tree.predict(row)[0]
        if model.criterion == "mse":
            votes[majority_label(pred)] += 1
        else:
            votes[int(pred)] += 1
    winner = majority_label(votes)
    return model.label_names[winner], votes[winner] / len(
        model.estimator.estimators_)


def predict_batch(model: ForestModel,
                  vectors: np.ndarray) -> list[tuple[str, float]]:
    """Vectorized majority vote over many feature vectors."""
    vectors = np.asarray(vectors, dtype=float)
    n = vectors.shape[0]
    n_labels = len(model.label_names)
    votes = np.zeros((n, n_labels), dtype=int)
    for tree in model.estimator.estimators_:
        pred = tree.predict(vectors)
        if model.criterion == "mse":
            picks = np.argmax(pred, axis=1)
        else:
            picks = pred.astype(int)
        votes[np.arange(n), picks] += 1
    winners = np.argmax(votes, axis=1)
    return [(model.label_names[w], votes[i, w] / len(model.estimator.estimators_))
            for i, w in enumerate(winners)]


SCENARIOS = ("exact", "similar-structure", "approximate")


def run_experiment(scenario: str, collect_trace, n_prompts: int, tpq: int,
                   forest_cfg: ForestConfig, test_traces: int = 5,
                   feature_len: int = 256) -> "ExperimentReport":
    """Offline profiling, training, and online evaluation for one scenario.

    ``collect_trace(phase, prompt_idx, trace_idx)`` returns a labeled
    Trace; the caller decides what prompt text each (scenario, phase,
    index) maps to and how session seeds are derived. The offline phase
    gathers ``tpq`` traces per prompt, the online phase ``test_traces``
    fresh ones.
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; "
                          f"expected one of {SCENARIOS}")
    if tpq < 1 or n_prompts < 2:
        raise ConfigError("need tpq >= 1 and at least two prompts")
    train = [collect_trace("train", p, k)
             for p in range(n_prompts) for k in range(tpq)]
    test = [collect_trace("test", p, k)
            for p in range(n_prompts) for k in range(test_traces)]
    model = train_forest(
        LabeledDataset.from_traces(train, feature_len, traces_per_query=tpq),
        forest_cfg)
    report = evaluate(model, LabeledDataset.from_traces(test, feature_len))
    report.scenario = scenario
    return report


@dataclass
class ExperimentReport:
    """Accuracy, macro F1, and the confusion matrix for one scenario run."""

    scenario: str
    engine: str
    accuracy: float
    macro_f1: float
    label_names: list[str]
    confusion: list[list[int]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "engine": self.engine,
                "accuracy": self.accuracy, "macro_f1": self.macro_f1,
                "label_names": self.label_names, "confusion": self.confusion,
                "config": self.config}


def evaluate(model: ForestModel, ds: LabeledDataset) -> ExperimentReport:
    """Trace-level top-1 accuracy, macro F1, and confusion counts."""
    names = model.label_names
    index = {n: i for i, n in enumerate(names)}
    confusion = np.zeros((len(names), len(names)), dtype=int)
    correct = 0
    preds = predict_batch(model, ds.vectors)
    for (pred, _), true in zip(preds, ds.labels):
        if true in index:
            confusion[index[true], index[pred]] += 1
        correct += (pred == true)
    f1s = []
    for i in range(len(names)):
        tp = confusion[i, i]
        fp = confusion[:, i].sum() - tp
        fn = confusion[i, :].sum() - tp
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return ExperimentReport(
        scenario="", engine="", accuracy=correct / len(ds.labels),
        macro_f1=float(np.mean(f1s)), label_names=list(names),
        confusion=confusion.tolist())
