"""scikit-learn style wrappers around the training loop.

Estimators take graph objects rather than feature matrices: ``fit`` accepts a
``ShiftScenario`` (or a ``Graph`` for the unsupervised cluster model), and
``predict`` takes a graph plus optional node ids.
"""
from __future__ import annotations


import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .clustering import harden, modularity
from .gnn import ModelConfig, gcn_forward
from .graphstore import normalize_adjacency
from .metrics import micro_f1
from .trainer import TrainConfig, pretrain_classifier, pretrain_cluster, run_srnc, run_wo_phi_ablation
from .validation import check_graph, check_node_ids, check_scenario


class _GcnBase(BaseEstimator):
    def _model_config(self) -> ModelConfig:
        return ModelConfig(hidden=self.hidden, dropout_rate=getattr(self, "dropout_rate", 0.0),
                           learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                           seed=self.seed)

    def _forward(self, params, graph):
        graph = check_graph(graph)
        return gcn_forward(params, normalize_adjacency(graph), graph.features)


class GCNClassifier(ClassifierMixin, _GcnBase):
    """Plain 2-layer GCN trained on the labeled source nodes only."""

    def __init__(self, hidden=256, learning_rate=0.01, weight_decay=5e-4, dropout_rate=0.0,
                 max_epochs=400, patience=20, seed=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout_rate = dropout_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(model=self._model_config(), pretrain_epochs_classifier=self.max_epochs,
                           pretrain_patience=self.patience, seed=self.seed)

    def fit(self, scenario, y=None):
        scenario = check_scenario(scenario)
        self.theta_, self.history_ = pretrain_classifier(scenario, self._train_config())
        self._set_classes(scenario)
        return self

    def _set_classes(self, scenario):
        self.classes_ = np.arange(scenario.num_outputs)
        self.known_classes_ = tuple(scenario.known_classes)
        self.open_set_ = scenario.open_set

    def predict_proba(self, graph, nodes=None):
        check_is_fitted(self, "theta_")
        _, probs = self._forward(self.theta_, graph)
        p = probs.data
        return p if nodes is None else p[check_node_ids(nodes, len(p))]

    def predict(self, graph, nodes=None):
        return self.predict_proba(graph, nodes).argmax(axis=1)

    def score(self, scenario, y=None):
        """Micro-F1 on the scenario's test nodes."""
        scenario = check_scenario(scenario)
        pred = self.predict(scenario.target_graph, scenario.test_nodes)
        return micro_f1(pred, scenario.test_labels)


class SRNCClassifier(GCNClassifier):
    """Shift-robust node classifier: GCN refit on cluster-derived pseudo-labels.

    After ``fit`` the estimator exposes ``theta_`` (classifier), ``phi_``
    (cluster network), ``mapping_`` (cluster -> class alignment) and
    ``logs_`` (one record per episode).
    """

    def __init__(self, hidden=256, learning_rate=0.01, weight_decay=5e-4, dropout_rate=0.0,
                 num_clusters=None, alpha=1.0, steps_per_episode=20, batch_size=64,
                 max_episodes=10, patience=1, pseudo_label_mode="sample",
                 cluster_source_pool="labeled", use_source_kl=True, cluster_restarts=5,
                 use_clusters=True, seed=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout_rate = dropout_rate
        self.num_clusters = num_clusters
        self.alpha = alpha
        self.steps_per_episode = steps_per_episode
        self.batch_size = batch_size
        self.max_episodes = max_episodes
        self.patience = patience
        self.pseudo_label_mode = pseudo_label_mode
        self.cluster_source_pool = cluster_source_pool
        self.use_source_kl = use_source_kl
        self.cluster_restarts = cluster_restarts
        self.use_clusters = use_clusters
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            model=self._model_config(), num_clusters=self.num_clusters, alpha=self.alpha,
            steps_per_episode=self.steps_per_episode, batch_size=self.batch_size,
            max_episodes=self.max_episodes, patience=self.patience,
            pseudo_label_mode=self.pseudo_label_mode,
            cluster_source_pool=self.cluster_source_pool, use_source_kl=self.use_source_kl,
            cluster_restarts=self.cluster_restarts, seed=self.seed)

    def fit(self, scenario, y=None):
        scenario = check_scenario(scenario)
        cfg = self._train_config()
        result = run_srnc(scenario, cfg) if self.use_clusters else run_wo_phi_ablation(scenario, cfg)
        self.theta_, self.phi_ = result.theta, result.phi
        self.logs_, self.mapping_ = result.logs, result.mapping
        self.best_episode_ = result.best_episode
        self.tau_ = result.tau
        self._set_classes(scenario)
        return self


class ClusterGNN(ClusterMixin, TransformerMixin, _GcnBase):
    """Unsupervised GCN clustering by soft modularity maximization."""

    def __init__(self, num_clusters=16, hidden=256, learning_rate=0.01, weight_decay=5e-4,
                 epochs=300, restarts=5, collapse_weight=0.0, seed=0):
        self.num_clusters = num_clusters
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.restarts = restarts
        self.collapse_weight = collapse_weight
        self.seed = seed

    def fit(self, graph, y=None):
        graph = check_graph(graph)
        cfg = TrainConfig(model=self._model_config(), num_clusters=self.num_clusters,
                          pretrain_epochs_cluster=self.epochs, cluster_restarts=self.restarts,
                          collapse_weight=self.collapse_weight, seed=self.seed)
        self.phi_, self.history_ = pretrain_cluster(graph, cfg, self.num_clusters)
        self.labels_ = self.predict(graph)
        self.modularity_ = modularity(graph, self.labels_) if graph.num_edges else float("nan")
        return self

    def transform(self, graph):
        """Soft assignment matrix (|V| x C)."""
        check_is_fitted(self, "phi_")
        return self._forward(self.phi_, graph)[1].data

    def predict(self, graph):
        return harden(self.transform(graph))

    def embed(self, graph) -> np.ndarray:
        check_is_fitted(self, "phi_")
        return self._forward(self.phi_, graph)[0].data
