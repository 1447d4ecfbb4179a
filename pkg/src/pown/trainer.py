"""Training loop: weighted loss combination, Adam with early stopping.

One epoch = one clean + one corrupted full-graph forward, a fresh pseudo-label
pipeline, one optimizer step with weight decay on the encoder/discriminator,
and a prototype renormalization. Early stopping tracks Hungarian-matched
accuracy on the validation nodes over the classes visible to validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import ndtensor as nd
from .encoder import corrupt, encode, init_gcn_params, summarize
from .errors import ContractViolation, NumericError
from .evaluation import accuracy_known, matched_accuracy
from .graphdata import normalize_adjacency
from .infomax import dgi_loss, init_discriminator
from .prototypes import (init_prototypes, mean_membership_expr, regularizer,
                         renormalize, supervised_loss)
from .pseudolabel import (edge_weight_report, edge_weights, pseudo_label_loss,
                          run_pipeline)

SPARSE_FEATURE_DENSITY = 0.05
COMPONENT_NAMES = ("supervised", "infomax", "pseudo", "regularizer")


@dataclass
class TrainConfig:
    """Loss weights, temperatures, and optimizer/schedule settings.

    Defaults are the tuned citation-graph values this library ships with.
    """

    supervised_weight: float = 0.596017
    infomax_weight: float = 0.652459
    pseudo_weight: float = 0.763453
    reg_weight: float = 0.208553
    gamma_quantile: float = 0.333999
    tau_s: float = 0.1
    tau_p: float = 0.7
    learning_rate: float = 0.01
    weight_decay: float = 0.001
    dropout: float = 0.4
    hidden_dim: int = 128
    num_layers: int = 2
    patience: int = 30
    max_epochs: int = 1000
    lp_hops: int = 2
    seed: int = 0
    entropy_keep_mode: str = "drop_top_decile"

    def validate(self):
        for name in ("supervised_weight", "infomax_weight", "pseudo_weight",
                     "reg_weight"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")
        if not 0.0 < self.gamma_quantile < 1.0:
            raise ContractViolation("gamma_quantile must be in (0, 1)")
        if self.patience < 1:
            raise ContractViolation("patience must be >= 1")
        if self.max_epochs < 1:
            raise ContractViolation("max_epochs must be >= 1")
        if self.lp_hops < 1:
            raise ContractViolation("lp_hops must be >= 1")
        if self.tau_s <= 0 or self.tau_p <= 0:
            raise ContractViolation("temperatures must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation("dropout must be in [0, 1)")
        return self


@dataclass
class EpochRecord:
    epoch: int
    loss_s: float
    loss_u: float
    loss_p: float
    reg: float
    total: float
    val_acc: float
    n_candidates: int
    n_survivors: int


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    CSV_HEADER = "epoch,loss_s,loss_u,loss_p,reg,total,val_acc,n_candidates,n_survivors"

    def append(self, record):
        self.records.append(record)

    def to_csv(self):
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.loss_s!r},{r.loss_u!r},{r.loss_p!r},{r.reg!r},"
                f"{r.total!r},{r.val_acc!r},{r.n_candidates},{r.n_survivors}")
        return "\n".join(lines) + "\n"


@dataclass
class ModelState:
    gcn: object
    protos: object
    discriminator: nd.Expr
    adam: nd.AdamState
    adj_norm: sp.csr_matrix
    features: object

    def parameters(self):
        return list(self.gcn.weights) + [self.protos.vectors, self.discriminator]

    def decayed_parameters(self):
        return list(self.gcn.weights) + [self.discriminator]

    def snapshot(self):
        return [p.value.copy() for p in self.parameters()]

    def restore(self, snapshot):
        for p, value in zip(self.parameters(), snapshot):
            p.value = value.copy()


def total_loss(components, config):
    """Weighted sum of the four loss components (plain numbers)."""
    for name in COMPONENT_NAMES:
        if not np.isfinite(components[name]):
            raise NumericError(f"loss component {name!r} is not finite")
    return (config.supervised_weight * components["supervised"]
            + config.infomax_weight * components["infomax"]
            + config.pseudo_weight * components["pseudo"]
            + config.reg_weight * components["regularizer"])


def prepare_features(features):
    """Store very sparse high-dimensional features as CSR for cheap matmuls."""
    if sp.issparse(features):
        return features.tocsr()
    density = np.count_nonzero(features) / max(features.size, 1)
    if features.shape[1] >= 128 and density < SPARSE_FEATURE_DENSITY:
        return sp.csr_matrix(features)
    return features


def init_model(graph, split, config):
    rng = np.random.default_rng([config.seed, 101])
    gcn = init_gcn_params(graph.d, config.hidden_dim, config.num_layers,
                          config.dropout, rng)
    num_new = graph.num_classes - len(split.known_classes)
    if num_new < 1:
        raise ContractViolation("open-world training requires at least one new class")
    protos = init_prototypes(split.known_classes, num_new, config.hidden_dim,
                             config.tau_s, config.tau_p, rng)
    disc = init_discriminator(config.hidden_dim, rng)
    adam = nd.AdamState(config.learning_rate)
    return ModelState(gcn, protos, disc, adam, normalize_adjacency(graph),
                      prepare_features(graph.features))


def embed(state, train_mode=False, rng=None, features=None):
    feats = state.features if features is None else features
    z = encode(state.gcn, state.adj_norm, feats, train_mode=train_mode, rng=rng)
    nd.forward(z)
    return z


def predict(state, graph=None):
    """Prototype index per node from eval-mode embeddings."""
    z = embed(state)
    sims = z.value @ state.protos.vectors.value.T
    return sims.argmax(axis=1), z.value


def predicted_known_classes(pred_prototypes, protos):
    """Map prototype predictions to class ids; new prototypes map to -1."""
    known = np.asarray(protos.known_classes)
    out = np.full(pred_prototypes.shape, -1, dtype=np.int64)
    is_known = pred_prototypes < known.size
    out[is_known] = known[pred_prototypes[is_known]]
    return out


def validation_subset(graph, masks, split):
    """Validation-mask nodes whose class is visible to validation."""
    visible = np.asarray(split.known_classes + split.validation_new_classes)
    return np.flatnonzero(masks.validation & np.isin(graph.labels, visible))


def validation_accuracy(state, graph, masks, split):
    subset = validation_subset(graph, masks, split)
    preds, _ = predict(state)
    return matched_accuracy(preds, graph.labels, subset)


def train_epoch(state, graph, split, config, epoch):
    """One optimization step; mutates `state` only if every computation is finite.

    The pseudo-label pipeline reads deterministic (dropout-free) embeddings of
    the current weights; the losses then use fresh train-mode forwards.
    Returns (EpochRecord without val_acc filled, pipeline state).
    """
    rng = np.random.default_rng([config.seed, 7, epoch])

    z_clean = embed(state)
    pipeline = run_pipeline(graph.adjacency, z_clean.value, state.protos,
                            split.labeled_nodes, split.unlabeled_nodes,
                            config.gamma_quantile, config.lp_hops,
                            config.entropy_keep_mode)

    z = embed(state, train_mode=True, rng=rng)
    corrupted = corrupt(state.features, rng)
    z_corr = embed(state, train_mode=True, rng=rng, features=corrupted)
    summary = summarize(z)

    loss_s = supervised_loss(z, state.protos, split.labeled_nodes, graph.labels)
    loss_u = dgi_loss(split.unlabeled_nodes, z, z_corr, summary,
                      state.discriminator)
    loss_p = pseudo_label_loss(z, state.protos, pipeline.survivors,
                               pipeline.survivor_columns,
                               pipeline.active_prototypes)
    reg = regularizer(mean_membership_expr(z, state.protos), state.protos)

    weighted = nd.add(
        nd.add(nd.scalar_scale(loss_s, config.supervised_weight),
               nd.scalar_scale(loss_u, config.infomax_weight)),
        nd.add(nd.scalar_scale(loss_p, config.pseudo_weight),
               nd.scalar_scale(reg, config.reg_weight)))

    components = {
        "supervised": nd.forward(loss_s)[0, 0],
        "infomax": nd.forward(loss_u)[0, 0],
        "pseudo": nd.forward(loss_p)[0, 0],
        "regularizer": nd.forward(reg)[0, 0],
    }
    total = total_loss(components, config)
    nd.forward(weighted)
    grads = nd.backward(weighted)

    for param in state.decayed_parameters():
        if config.weight_decay:
            grads[param] = grads[param] + config.weight_decay * param.value

    nd.adam_step(state.parameters(), grads, state.adam)
    renormalize(state.protos)

    record = EpochRecord(
        epoch=epoch,
        loss_s=float(components["supervised"]),
        loss_u=float(components["infomax"]),
        loss_p=float(components["pseudo"]),
        reg=float(components["regularizer"]),
        total=float(total),
        val_acc=float("nan"),
        n_candidates=int(pipeline.candidates.size),
        n_survivors=int(pipeline.survivors.size),
    )
    return record, pipeline


def run_early_stopped(epoch_fn, max_epochs, patience):
    """Drive `epoch_fn(epoch) -> score`; stop after `patience` epochs without
    strict improvement. Returns (best_epoch, scores)."""
    if max_epochs < 1:
        raise ContractViolation("max_epochs must be >= 1")
    best, best_epoch, since = -np.inf, 0, 0
    scores = []
    for epoch in range(1, max_epochs + 1):
        score = epoch_fn(epoch)
        scores.append(score)
        if score > best:
            best, best_epoch, since = score, epoch, 0
        else:
            since += 1
            if since >= patience:
                break
    return best_epoch, scores


@dataclass
class FitResult:
    state: ModelState
    trace: TrainTrace
    best_epoch: int
    best_val_acc: float
    edge_reports: list


def fit(graph, masks, split, config, collect_edge_stats=False):
    """Train until early stopping; the returned state holds the best-epoch weights.

    With `collect_edge_stats`, an edge-weight homophily report is recorded at
    initialization (epoch 0) and after every epoch.
    """
    config.validate()
    if not split.labeled_nodes.size:
        raise ContractViolation("fit needs at least one labeled node")
    state = init_model(graph, split, config)
    trace = TrainTrace()
    edge_reports = []

    if collect_edge_stats:
        z0 = embed(state)
        init_weights = edge_weights(graph.adjacency, z0.value,
                                    state.protos.vectors.value)
        edge_reports.append((0, edge_weight_report(init_weights, graph.labels)))

    best = {"snapshot": state.snapshot(), "acc": -np.inf}

    def one_epoch(epoch):
        record, pipeline = train_epoch(state, graph, split, config, epoch)
        record.val_acc = validation_accuracy(state, graph, masks, split)
        trace.append(record)
        if collect_edge_stats:
            edge_reports.append(
                (epoch, edge_weight_report(pipeline.edge_weights, graph.labels)))
        if record.val_acc > best["acc"]:
            best["acc"] = record.val_acc
            best["snapshot"] = state.snapshot()
        return record.val_acc

    best_epoch, _ = run_early_stopped(one_epoch, config.max_epochs,
                                      config.patience)
    state.restore(best["snapshot"])
    return FitResult(state, trace, best_epoch, float(best["acc"]), edge_reports)


def open_world_scores(preds, known_class_preds, graph, masks, split):
    """(all, known, new) accuracies on the test-mask nodes.

    `known_class_preds` holds real class ids (or -1) and is scored without
    matching; pass None for methods that cannot name known classes.
    """
    test_nodes = np.flatnonzero(masks.test)
    labels = graph.labels
    known = np.asarray(split.known_classes)
    acc_all = matched_accuracy(preds, labels, test_nodes)
    new_subset = test_nodes[~np.isin(labels[test_nodes], known)]
    acc_new = matched_accuracy(preds, labels, new_subset)
    acc_known = None
    if known_class_preds is not None:
        known_subset = test_nodes[np.isin(labels[test_nodes], known)]
        acc_known = accuracy_known(known_class_preds, labels, known_subset)
    return acc_all, acc_known, acc_new
