"""Shift-robust training loop: pretraining, alternating cluster/classifier episodes."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .alignment import (ClusterClassMapping, kl_cost_matrix, linear_sum_assignment,
                        map_pseudo_labels, route_to_clusters)
from .autodiff import (cross_entropy_rows, kl_rows, scalar_combine, select_rows)
from .clustering import harden, modularity, modularity_loss
from .exceptions import DivergenceError
from .gnn import (AdamState, GcnParams, ModelConfig, adam_step, gcn_forward, init_params)
from .graphstore import Graph, ShiftScenario, normalize_adjacency
from .metrics import micro_f1

log = logging.getLogger(__name__)

PSEUDO_MODES = ("sample", "argmax")
SOURCE_POOLS = ("labeled", "all")
TAU_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
SMOOTH_EPS = 1e-8


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    num_clusters: Optional[int] = None  # None: 16 open-set, N close-set
    alpha: float = 1.0
    steps_per_episode: int = 20
    batch_size: int = 64
    max_episodes: int = 10
    patience: int = 1
    pretrain_epochs_classifier: int = 400
    pretrain_patience: int = 20
    pretrain_epochs_cluster: int = 300
    cluster_restarts: int = 5
    m_step_max_epochs: int = 300
    m_step_tol: float = 1e-4
    pseudo_label_mode: str = "sample"
    # which source nodes feed the KL regularizer of the cluster GNN and the alignment
    cluster_source_pool: str = "labeled"
    source_kl_weight: float = 1.0
    use_source_kl: bool = True
    collapse_weight: float = 0.0
    eq6_verbatim: bool = False
    align_once: bool = False
    seed: int = 0

    def validate(self, num_known: Optional[int] = None) -> None:
        if self.steps_per_episode < 0 or self.batch_size < 1:
            raise ValueError("steps_per_episode must be >= 0 and batch_size >= 1")
        if self.cluster_restarts < 1:
            raise ValueError("cluster_restarts must be >= 1")
        if self.max_episodes < 1 or self.patience < 1:
            raise ValueError("max_episodes and patience must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.pseudo_label_mode not in PSEUDO_MODES:
            raise ValueError(f"pseudo_label_mode must be one of {PSEUDO_MODES}")
        if self.cluster_source_pool not in SOURCE_POOLS:
            raise ValueError(f"cluster_source_pool must be one of {SOURCE_POOLS}")
        if num_known is not None and self.num_clusters is not None and self.num_clusters < num_known:
            raise ValueError(f"num_clusters={self.num_clusters} < number of known classes {num_known}")

    def clusters_for(self, scenario: ShiftScenario) -> int:
        if self.num_clusters is not None:
            return self.num_clusters
        return 16 if scenario.open_set else scenario.num_known

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = d.pop("model", {})
        if not isinstance(model, ModelConfig):
            model = ModelConfig(**model)
        return cls(model=model, **d)


@dataclass
class EpisodeLog:
    episode: int
    losses: dict
    val_micro_f1: float
    mapping: dict
    test_micro_f1: float = float("nan")
    source_elbo: float = float("nan")
    m_step_epochs: int = 0
    m_step_losses: list = field(default_factory=list)
    unknown_pseudo_fraction: float = float("nan")

    def to_json(self) -> str:
        def clean(x):
            if isinstance(x, float) and not np.isfinite(x):
                return None
            return x
        d = asdict(self)
        d["losses"] = {k: clean(v) for k, v in d["losses"].items()}
        for k in ("val_micro_f1", "test_micro_f1", "source_elbo", "unknown_pseudo_fraction"):
            d[k] = clean(d[k])
        return json.dumps(d, sort_keys=True)


def write_logs(logs, path) -> None:
    with open(path, "w") as fh:
        for entry in logs:
            fh.write(entry.to_json() + "\n")


@dataclass
class SRNCResult:
    theta: GcnParams
    phi: Optional[GcnParams]
    logs: list
    best_episode: int
    mapping: Optional[ClusterClassMapping] = None
    tau: Optional[float] = None
    # parameters after episode 1, identical to a run with max_episodes=1
    episode_one: Optional[dict] = None


class EarlyStopper:
    """Stop once the score fails to strictly improve for ``patience`` updates."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_index = -1
        self.bad = 0
        self.count = 0

    def update(self, score: float) -> bool:
        improved = score > self.best
        if improved:
            self.best, self.best_index, self.bad = score, self.count, 0
        else:
            self.bad += 1
        self.count += 1
        return improved

    @property
    def stop(self) -> bool:
        return self.bad >= self.patience


# --------------------------------------------------------------------------
# shared state


class _Context:
    """Operators and cached products for one scenario."""

    def __init__(self, scenario: ShiftScenario):
        self.scenario = scenario
        src, tgt = scenario.source_graph, scenario.target_graph
        if len(scenario.train_nodes) == 0:
            raise ValueError("scenario has no training nodes")
        self.shared = src is tgt
        self.op_s = normalize_adjacency(src)
        self.ax_s = self.op_s @ src.features
        if self.shared:
            self.op_t, self.ax_t = self.op_s, self.ax_s
        else:
            self.op_t = normalize_adjacency(tgt)
            self.ax_t = self.op_t @ tgt.features
        self.width = scenario.num_outputs
        self.train_targets = np.eye(self.width)[scenario.train_labels]
        excluded = scenario.target_exclusion()
        self.target_pool = np.setdiff1d(np.arange(tgt.num_nodes), excluded)
        self.source_unlabeled = np.setdiff1d(np.arange(src.num_nodes), scenario.train_nodes)

    def classify(self, theta: GcnParams, graph: str = "source"):
        op, ax = (self.op_s, self.ax_s) if graph == "source" else (self.op_t, self.ax_t)
        x = self.scenario.source_graph.features if graph == "source" else self.scenario.target_graph.features
        _, probs = gcn_forward(theta, op, x, ax=ax)
        if probs.shape[1] != self.width:
            raise AssertionError(f"classifier width {probs.shape[1]} != {self.width}")
        return probs

    def cluster(self, phi: GcnParams, graph: str = "target"):
        if graph == "source" and not self.shared:
            _, q = gcn_forward(phi, self.op_s, self.scenario.source_graph.features, ax=self.ax_s)
        else:
            _, q = gcn_forward(phi, self.op_t, self.scenario.target_graph.features, ax=self.ax_t)
        return q

    def val_f1(self, theta: GcnParams) -> float:
        sc = self.scenario
        if len(sc.val_nodes) == 0:
            return float("nan")
        probs = self.classify(theta).data
        return micro_f1(probs[sc.val_nodes].argmax(axis=1), sc.val_labels)

    def test_f1(self, theta: GcnParams) -> float:
        sc = self.scenario
        if len(sc.test_nodes) == 0:
            return float("nan")
        probs = self.classify(theta, "target").data
        return micro_f1(probs[sc.test_nodes].argmax(axis=1), sc.test_labels)


def _check_finite(loss, what: str) -> float:
    value = loss.item() if hasattr(loss, "item") else float(loss)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {what} loss")
    return value


def _step(params: GcnParams, loss, state: AdamState, cfg: ModelConfig) -> None:
    for p in params.values():
        p.grad = np.zeros_like(p.data)
    loss.backward()
    try:
        adam_step(params, [p.grad for p in params.values()], state,
                  cfg.learning_rate, cfg.weight_decay)
    except DivergenceError as exc:
        raise DivergenceError(str(exc), module="trainer") from exc


def _rng(seed, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


# --------------------------------------------------------------------------
# pretraining


def _classifier_loss(ctx: _Context, theta: GcnParams, sets, alpha: float, rng=None,
                     dropout: float = 0.0):
    """Mean CE on labeled nodes plus mean CE on each pseudo-labeled set.

    ``sets`` holds ``(nodes, labels, graph, weight)`` tuples.
    """
    sc = ctx.scenario
    if dropout and rng is not None:
        _, probs_s = gcn_forward(theta, ctx.op_s, sc.source_graph.features,
                                 dropout_rate=dropout, rng=rng)
    else:
        probs_s = ctx.classify(theta)
    terms = [cross_entropy_rows(select_rows(probs_s, sc.train_nodes), ctx.train_targets)]
    weights = [1.0]
    probs_t = None
    for nodes, labels, graph, weight in sets:
        if len(nodes) == 0 or weight == 0:
            continue
        if graph == "source":
            probs = probs_s
        else:
            if probs_t is None:
                probs_t = probs_s if ctx.shared else ctx.classify(theta, "target")
            probs = probs_t
        terms.append(cross_entropy_rows(select_rows(probs, nodes), np.eye(ctx.width)[labels]))
        weights.append(weight)
    return scalar_combine(terms, weights), terms


def pretrain_classifier(scenario: ShiftScenario, cfg: TrainConfig, ctx: Optional[_Context] = None):
    """Full-batch CE on train nodes; keeps the best-validation snapshot."""
    cfg.validate(scenario.num_known)
    ctx = ctx or _Context(scenario)
    mcfg = cfg.model
    theta = init_params(mcfg, scenario.source_graph.num_features, ctx.width,
                        rng=_rng(cfg.seed, 1))
    state = AdamState.for_params(theta)
    drop_rng = _rng(cfg.seed, 2)
    stopper = EarlyStopper(cfg.pretrain_patience)
    best = theta.snapshot()
    history = []
    for epoch in range(cfg.pretrain_epochs_classifier):
        loss, _ = _classifier_loss(ctx, theta, (), 0.0, drop_rng, mcfg.dropout_rate)
        value = _check_finite(loss, "classifier pretraining")
        _step(theta, loss, state, mcfg)
        val = ctx.val_f1(theta)
        history.append({"epoch": epoch, "loss": value, "val_micro_f1": val})
        if np.isnan(val):
            best = theta.snapshot()
            continue
        if stopper.update(val):
            best = theta.snapshot()
        if stopper.stop:
            break
    theta.load(best)
    return theta, history


def pretrain_cluster(target_graph: Graph, cfg: TrainConfig, num_clusters: Optional[int] = None,
                     op=None):
    """Minimize the soft modularity loss on the (unlabeled) target graph.

    Soft modularity has poor local optima where two communities share a
    cluster, so ``cfg.cluster_restarts`` independent inits are trained and
    the one with the highest hardened modularity is kept (labels unused).
    """
    if target_graph.num_nodes == 0:
        raise ValueError("empty target graph")
    c = num_clusters or cfg.num_clusters or target_graph.num_classes
    op = op or normalize_adjacency(target_graph)
    ax = op @ target_graph.features
    mcfg = cfg.model
    best = None
    for restart in range(cfg.cluster_restarts):
        phi = init_params(mcfg, target_graph.num_features, c, rng=_rng(cfg.seed, 3, restart))
        state = AdamState.for_params(phi)
        history = []
        for epoch in range(cfg.pretrain_epochs_cluster):
            _, q = gcn_forward(phi, op, target_graph.features, ax=ax)
            loss = modularity_loss(target_graph, q, cfg.eq6_verbatim, cfg.collapse_weight)
            history.append({"epoch": epoch, "restart": restart,
                            "loss": _check_finite(loss, "cluster pretraining")})
            _step(phi, loss, state, mcfg)
        _, q = gcn_forward(phi, op, target_graph.features, ax=ax)
        score = modularity(target_graph, harden(q))
        if best is None or score > best[0]:
            best = (score, phi, history)
    return best[1], best[2]


# --------------------------------------------------------------------------
# alignment and sampling


def _source_pool(ctx: _Context, cfg: TrainConfig) -> np.ndarray:
    sc = ctx.scenario
    if cfg.cluster_source_pool == "labeled":
        return sc.train_nodes
    return np.arange(sc.source_graph.num_nodes)


def _class_rows(ctx: _Context, theta_probs: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Known-class rows for ``nodes``: one-hot labels where known, else classifier output."""
    sc = ctx.scenario
    n = sc.num_known
    dist = theta_probs[nodes, :n].copy()
    label_of = dict(zip(sc.train_nodes.tolist(), sc.train_labels.tolist()))
    for row, v in enumerate(nodes.tolist()):
        y = label_of.get(v)
        if y is not None and y < n:
            dist[row] = 0.0
            dist[row, y] = 1.0
    return dist


def compute_alignment(ctx: _Context, theta: GcnParams, phi: GcnParams, cfg: TrainConfig,
                      class_probs=None, cluster_probs=None) -> ClusterClassMapping:
    """Match known classes to clusters by KL over the source pool."""
    p = ctx.classify(theta).data if class_probs is None else class_probs
    q = ctx.cluster(phi, "source").data if cluster_probs is None else cluster_probs
    pool = _source_pool(ctx, cfg)
    cost = kl_cost_matrix(_class_rows(ctx, p, pool), q[pool])
    return linear_sum_assignment(cost)


def _draw_clusters(q_rows: np.ndarray, mode: str, rng) -> np.ndarray:
    if mode == "argmax":
        return harden(q_rows)
    cdf = np.cumsum(q_rows, axis=1)
    u = rng.random(len(q_rows)) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), q_rows.shape[1] - 1)


def _pseudo_sample(pool, q, mapping, count, open_set, mode, rng):
    pool = np.asarray(pool)
    if count == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    if len(pool) < count:
        warnings.warn(f"pseudo-label pool has {len(pool)} nodes < {count}; sampling with replacement")
        nodes = rng.choice(pool, count, replace=True)
    else:
        nodes = rng.choice(pool, count, replace=False)
    labels = map_pseudo_labels(mapping, _draw_clusters(q[nodes], mode, rng), open_set)
    if open_set:
        return nodes, labels
    # close-set: unmapped clusters carry no class; redraw those slots
    used = set(nodes.tolist())
    for _ in range(10):
        bad = np.flatnonzero(labels < 0)
        if not len(bad):
            break
        fresh = np.array([v for v in pool if v not in used])
        if not len(fresh):
            break
        pick = rng.choice(fresh, min(len(bad), len(fresh)), replace=False)
        used.update(pick.tolist())
        nodes[bad[:len(pick)]] = pick
        labels[bad[:len(pick)]] = map_pseudo_labels(
            mapping, _draw_clusters(q[pick], mode, rng), open_set)
    keep = labels >= 0
    return nodes[keep], labels[keep]


def sample_target_pseudolabels(phi: GcnParams, mapping: ClusterClassMapping,
                               scenario: ShiftScenario, rng, mode: str = "sample",
                               ctx: Optional[_Context] = None, q=None):
    """|D^s| target nodes, each labeled by a cluster drawn from Q_phi and mapped to a class."""
    ctx = ctx or _Context(scenario)
    q = ctx.cluster(phi, "target").data if q is None else q
    return _pseudo_sample(ctx.target_pool, q, mapping, len(scenario.train_nodes),
                          scenario.open_set, mode, rng)


# --------------------------------------------------------------------------
# episode updates


def _routed_targets(ctx: _Context, theta_probs: np.ndarray, mapping: ClusterClassMapping,
                    nodes: np.ndarray) -> np.ndarray:
    """Per-node target distributions over cluster columns.

    Labeled nodes contribute their one-hot label, the rest the frozen
    classifier output; unmapped columns get no mass before smoothing.
    """
    routed = route_to_clusters(_class_rows(ctx, theta_probs, nodes), mapping, spread_unknown=False)
    total = routed.sum(axis=1, keepdims=True)
    routed = np.where(total > 0, routed / np.maximum(total, 1e-300), 1.0 / mapping.num_clusters)
    routed += SMOOTH_EPS
    return routed / routed.sum(axis=1, keepdims=True)


def source_kl(ctx, theta_probs, phi, mapping, nodes) -> float:
    """Mean KL(routed labels || Q_phi) over the given source nodes (no gradient)."""
    q = ctx.cluster(phi, "source")
    return kl_rows(_routed_targets(ctx, theta_probs, mapping, nodes),
                   select_rows(q, nodes)).item()


def cluster_episode_update(phi: GcnParams, theta: GcnParams, mapping: ClusterClassMapping,
                           scenario: ShiftScenario, cfg: TrainConfig, rng,
                           ctx: Optional[_Context] = None, state: Optional[AdamState] = None):
    """T steps on modularity(target) + KL(routed source targets || Q_phi)."""
    ctx = ctx or _Context(scenario)
    state = state or AdamState.for_params(phi)
    theta_probs = ctx.classify(theta).data  # frozen
    pool = _source_pool(ctx, cfg)
    tgt = scenario.target_graph
    phi_t, phi_s = [], []
    for _ in range(cfg.steps_per_episode):
        batch = rng.choice(pool, min(cfg.batch_size, len(pool)), replace=False)
        q_t = ctx.cluster(phi, "target")
        loss_t = modularity_loss(tgt, q_t, cfg.eq6_verbatim, cfg.collapse_weight)
        terms, weights = [loss_t], [1.0]
        if cfg.use_source_kl and cfg.source_kl_weight:
            q_s = q_t if ctx.shared else ctx.cluster(phi, "source")
            loss_s = kl_rows(_routed_targets(ctx, theta_probs, mapping, batch),
                             select_rows(q_s, batch))
            terms.append(loss_s)
            weights.append(cfg.source_kl_weight)
            phi_s.append(_check_finite(loss_s, "cluster KL"))
        phi_t.append(_check_finite(loss_t, "modularity"))
        _step(phi, scalar_combine(terms, weights), state, cfg.model)
    return phi, {"phi_t": float(np.mean(phi_t)) if phi_t else float("nan"),
                 "phi_theta_s": float(np.mean(phi_s)) if phi_s else float("nan")}


def check_monotone(losses, tol: float = 1e-6) -> None:
    diffs = np.diff(np.asarray(losses, dtype=float))
    if len(diffs) and diffs.max() > tol:
        i = int(diffs.argmax())
        raise DivergenceError(f"M-step loss rose by {diffs[i]:.3g} at inner epoch {i + 1}")


def fit_classifier(ctx: _Context, theta: GcnParams, sets, cfg: TrainConfig, rng=None):
    """Minimize the combined CE until it stops falling by ``m_step_tol``.

    Adam is not a descent method, so an epoch that raises the loss is
    rolled back and ends the fit; the recorded loss trace is therefore
    non-increasing and is checked as such.
    """
    mcfg = cfg.model
    state = AdamState.for_params(theta)
    losses, parts = [], None
    prev = theta.snapshot()
    for _ in range(cfg.m_step_max_epochs + 1):
        loss, terms = _classifier_loss(ctx, theta, sets, cfg.alpha)
        value = _check_finite(loss, "classifier")
        if losses and value > losses[-1]:
            theta.load(prev)
            break
        losses.append(value)
        parts = [t.item() for t in terms]
        if len(losses) > 1 and losses[-2] - value < cfg.m_step_tol:
            break
        if len(losses) > cfg.m_step_max_epochs:
            break
        prev = theta.snapshot()
        _step(theta, loss, state, mcfg)
    check_monotone(losses)
    return theta, losses, parts


def classifier_episode_update(theta: GcnParams, phi: GcnParams, mapping: ClusterClassMapping,
                              scenario: ShiftScenario, cfg: TrainConfig, rng,
                              ctx: Optional[_Context] = None):
    """Draw the pseudo-labeled sets once, then refit theta on all of them."""
    ctx = ctx or _Context(scenario)
    q_t = ctx.cluster(phi, "target").data
    t_nodes, t_labels = sample_target_pseudolabels(phi, mapping, scenario, rng,
                                                   cfg.pseudo_label_mode, ctx, q=q_t)
    sets = [(t_nodes, t_labels, "target", 1.0)]
    s_nodes = s_labels = np.empty(0, np.int64)
    if cfg.alpha > 0:
        q_s = q_t if ctx.shared else ctx.cluster(phi, "source").data
        s_nodes, s_labels = _pseudo_sample(ctx.source_unlabeled, q_s, mapping,
                                           len(scenario.train_nodes), scenario.open_set,
                                           cfg.pseudo_label_mode, rng)
        sets.append((s_nodes, s_labels, "source", cfg.alpha))
    theta, losses, parts = fit_classifier(ctx, theta, sets, cfg, rng)
    info = _loss_parts(parts, sets)
    info["m_step_losses"] = losses
    labels = np.concatenate([t_labels, s_labels])
    info["unknown_fraction"] = (float(np.mean(labels == scenario.unknown_class_id))
                                if scenario.open_set and len(labels) else 0.0)
    return theta, info


def _loss_parts(parts, sets) -> dict:
    names = {"target": "theta_phi_t", "source": "theta_phi_s"}
    out = {"theta_s": parts[0], "theta_phi_t": 0.0, "theta_phi_s": 0.0}
    i = 1
    for nodes, _, graph, weight in sets:
        if len(nodes) == 0 or weight == 0:
            continue
        out[names[graph]] = parts[i]
        i += 1
    return out


def source_elbo(ctx: _Context, theta: GcnParams, phi: GcnParams,
                mapping: ClusterClassMapping) -> float:
    """E_Q[log P_theta - log Q] over unlabeled source nodes, Q read through the mapping."""
    sc = ctx.scenario
    nodes = ctx.source_unlabeled
    if not len(nodes):
        return float("nan")
    q = ctx.cluster(phi, "source").data[nodes]
    p = ctx.classify(theta).data[nodes]
    to_class = mapping.cluster_to_class(sc.unknown_class_id if sc.open_set else -1)
    qc = np.zeros((len(nodes), ctx.width))
    for k, y in enumerate(to_class):
        if y >= 0:
            qc[:, y] += q[:, k]
    qc = qc / np.maximum(qc.sum(axis=1, keepdims=True), 1e-300)
    pos = qc > 0
    terms = np.where(pos, qc * (np.log(np.maximum(p, 1e-300)) - np.log(np.where(pos, qc, 1.0))), 0.0)
    return float(terms.sum(axis=1).mean())


# --------------------------------------------------------------------------
# full runs


def _episode_zero(ctx, cfg, theta, phi, mapping, cluster_hist) -> EpisodeLog:
    return EpisodeLog(
        episode=0,
        losses={"theta_s": None, "theta_phi_t": 0.0, "theta_phi_s": 0.0,
                "phi_t": cluster_hist[-1]["loss"] if cluster_hist else None,
                "phi_theta_s": 0.0},
        val_micro_f1=ctx.val_f1(theta), test_micro_f1=ctx.test_f1(theta),
        mapping=mapping.to_json() if mapping is not None else {},
        source_elbo=source_elbo(ctx, theta, phi, mapping) if phi is not None else float("nan"))


def run_srnc(scenario: ShiftScenario, cfg: TrainConfig) -> SRNCResult:
    """Pretrain both networks, then alternate cluster and classifier episodes.

    At least one episode runs; the loop stops when validation micro-F1 has
    not improved on the best episode for ``patience`` episodes. The
    returned parameters are those of the best-validation episode.
    """
    c = cfg.clusters_for(scenario)
    cfg.validate(scenario.num_known)
    if c < scenario.num_known:
        raise ValueError(f"num_clusters={c} < known classes {scenario.num_known}")
    ctx = _Context(scenario)
    theta, pre_hist = pretrain_classifier(scenario, cfg, ctx)
    phi, cluster_hist = pretrain_cluster(scenario.target_graph, cfg, c, op=ctx.op_t)
    mapping = compute_alignment(ctx, theta, phi, cfg)
    logs = [_episode_zero(ctx, cfg, theta, phi, mapping, cluster_hist)]
    logs[0].losses["theta_s"] = pre_hist[-1]["loss"] if pre_hist else None
    phi_state = AdamState.for_params(phi)
    stopper = EarlyStopper(cfg.patience)
    best = None
    for episode in range(1, cfg.max_episodes + 1):
        rng = _rng(cfg.seed, 100, episode)
        if not cfg.align_once:
            mapping = compute_alignment(ctx, theta, phi, cfg)
        phi, c_info = cluster_episode_update(phi, theta, mapping, scenario, cfg, rng, ctx, phi_state)
        theta, t_info = classifier_episode_update(theta, phi, mapping, scenario, cfg, rng, ctx)
        val = ctx.val_f1(theta)
        logs.append(EpisodeLog(
            episode=episode,
            losses={k: t_info[k] for k in ("theta_s", "theta_phi_t", "theta_phi_s")} | c_info,
            val_micro_f1=val, test_micro_f1=ctx.test_f1(theta), mapping=mapping.to_json(),
            source_elbo=source_elbo(ctx, theta, phi, mapping),
            m_step_epochs=len(t_info["m_step_losses"]), m_step_losses=t_info["m_step_losses"],
            unknown_pseudo_fraction=t_info["unknown_fraction"]))
        log.info("episode %d val=%.4f", episode, val)
        if episode == 1:
            first = {"theta": theta.snapshot(), "phi": phi.snapshot(), "mapping": mapping}
        if stopper.update(-np.inf if np.isnan(val) else val):
            best = (episode, theta.snapshot(), phi.snapshot(), mapping)
        if stopper.stop:
            break
    episode, th, ph, mapping = best
    theta.load(th)
    phi.load(ph)
    return SRNCResult(theta, phi, logs, episode, mapping, episode_one=first)


def _self_pseudo(ctx: _Context, probs: np.ndarray, pool, count, tau: float, rng):
    sc = ctx.scenario
    if count == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    replace = len(pool) < count
    if replace:
        warnings.warn(f"pseudo-label pool has {len(pool)} nodes < {count}; sampling with replacement")
    nodes = rng.choice(pool, count, replace=replace)
    known = probs[nodes, :sc.num_known]
    labels = known.argmax(axis=1)
    if sc.open_set:
        labels = np.where(known.max(axis=1) < tau, sc.unknown_class_id, labels)
    return nodes, labels


def _run_self_training(scenario, cfg, tau, ctx, theta0) -> SRNCResult:
    theta = theta0.copy()
    logs = [EpisodeLog(0, {"theta_s": None, "theta_phi_t": 0.0, "theta_phi_s": 0.0},
                       ctx.val_f1(theta), {}, test_micro_f1=ctx.test_f1(theta))]
    stopper = EarlyStopper(cfg.patience)
    best = None
    count = len(scenario.train_nodes)
    for episode in range(1, cfg.max_episodes + 1):
        rng = _rng(cfg.seed, 200, episode)
        p_t = ctx.classify(theta, "target").data
        t_nodes, t_labels = _self_pseudo(ctx, p_t, ctx.target_pool, count, tau, rng)
        sets = [(t_nodes, t_labels, "target", 1.0)]
        labels = t_labels
        if cfg.alpha > 0:
            p_s = p_t if ctx.shared else ctx.classify(theta).data
            s_nodes, s_labels = _self_pseudo(ctx, p_s, ctx.source_unlabeled, count, tau, rng)
            sets.append((s_nodes, s_labels, "source", cfg.alpha))
            labels = np.concatenate([labels, s_labels])
        theta, losses, parts = fit_classifier(ctx, theta, sets, cfg, rng)
        val = ctx.val_f1(theta)
        logs.append(EpisodeLog(
            episode, _loss_parts(parts, sets), val, {}, test_micro_f1=ctx.test_f1(theta),
            m_step_epochs=len(losses), m_step_losses=losses,
            unknown_pseudo_fraction=float(np.mean(labels == scenario.unknown_class_id))
            if scenario.open_set else 0.0))
        if stopper.update(-np.inf if np.isnan(val) else val):
            best = (episode, theta.snapshot())
        if stopper.stop:
            break
    episode, snap = best
    theta.load(snap)
    return SRNCResult(theta, None, logs, episode, None, tau)


def run_wo_phi_ablation(scenario: ShiftScenario, cfg: TrainConfig, taus=None) -> SRNCResult:
    """Same episode loop with pseudo-labels from the classifier itself.

    In open-set mode, nodes whose top known-class probability falls below
    ``tau`` are labeled unknown; ``tau`` is picked on validation micro-F1.
    """
    cfg.validate(scenario.num_known)
    ctx = _Context(scenario)
    theta0, _ = pretrain_classifier(scenario, cfg, ctx)
    grid = (taus if taus is not None else TAU_GRID) if scenario.open_set else (0.0,)
    best = None
    for tau in grid:
        result = _run_self_training(scenario, cfg, float(tau), ctx, theta0)
        val = result.logs[result.best_episode].val_micro_f1
        if best is None or val > best[0]:
            best = (val, result)
    return best[1]


def predict_proba(theta: GcnParams, scenario: ShiftScenario, graph: str = "target") -> np.ndarray:
    return _Context(scenario).classify(theta, graph).data


def cluster_assignments(phi: GcnParams, scenario: ShiftScenario) -> np.ndarray:
    return harden(_Context(scenario).cluster(phi, "target").data)


def target_modularity(phi: GcnParams, scenario: ShiftScenario) -> float:
    return modularity(scenario.target_graph, cluster_assignments(phi, scenario))


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    model_kw = {k: kw.pop(k) for k in list(kw) if k in ModelConfig.__dataclass_fields__ and k != "seed"}
    model = replace(cfg.model, **model_kw) if model_kw else cfg.model
    return replace(cfg, model=model, **kw)
