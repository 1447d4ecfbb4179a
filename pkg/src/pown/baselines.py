"""Comparison methods sharing the open-world split and metric harness:
a supervised GCN, infomax embeddings + k-means, and spectral clustering."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import ndtensor as nd
from .encoder import corrupt, encode, glorot, init_gcn_params, summarize
from .errors import ContractViolation
from .evaluation import MetricsReport, kmeans, spectral_cluster
from .graphdata import normalize_adjacency
from .infomax import dgi_loss, init_discriminator
from .prototypes import LOG_FLOOR
from .trainer import (open_world_scores, prepare_features, run_early_stopped)


def _gcn_logits(weights, adj_norm, features, dropout, train_mode, rng):
    """Unnormalized class scores: propagation layers without the output norm."""
    adj = nd.sparse_constant(adj_norm)
    use_dropout = train_mode and dropout > 0.0
    if sp.issparse(features):
        feats = features
        if use_dropout:
            kept = feats.copy()
            kept.data = kept.data * ((rng.random(kept.data.shape) >= dropout)
                                     / (1.0 - dropout))
            feats = kept
        hidden = nd.spmm(adj, nd.spmm(nd.sparse_constant(feats), weights[0]))
    else:
        x = nd.constant(features)
        if use_dropout:
            x = nd.dropout_mask_apply(
                x, nd.dropout_mask(features.shape, dropout, rng))
        hidden = nd.spmm(adj, nd.matmul(x, weights[0]))
    for weight in weights[1:]:
        hidden = nd.relu(hidden)
        if use_dropout:
            hidden = nd.dropout_mask_apply(
                hidden,
                nd.dropout_mask((features.shape[0], weight.value.shape[0]),
                                dropout, rng))
        hidden = nd.spmm(adj, nd.matmul(hidden, weight))
    return hidden


def run_gcn_baseline(graph, masks, split, config, seed, dataset="", fold=0,
                     repeat=0):
    """Cross-entropy GCN over all classes, trained on the labeled nodes only.

    The softmax is restricted to the known-class columns during training, so
    new-class output weights receive no signal beyond weight decay.
    """
    if split.labeled_nodes.size == 0:
        raise ContractViolation("GCN baseline needs labeled training nodes")
    rng = np.random.default_rng([seed, 11])
    adj_norm = normalize_adjacency(graph)
    features = prepare_features(graph.features)
    params = init_gcn_params(graph.d, config.hidden_dim, config.num_layers,
                             config.dropout, rng)
    # Replace the last square layer with an output head over all classes.
    params.weights[-1] = nd.parameter(
        glorot(config.hidden_dim, graph.num_classes, rng), name="gcn_out")
    adam = nd.AdamState(config.learning_rate)

    known = np.asarray(split.known_classes)
    selector = np.zeros((graph.num_classes, known.size))
    selector[known, np.arange(known.size)] = 1.0
    labeled = split.labeled_nodes
    targets = np.searchsorted(known, graph.labels[labeled])
    onehot = np.zeros((labeled.size, known.size))
    onehot[np.arange(labeled.size), targets] = 1.0

    val_known = np.flatnonzero(masks.validation
                               & np.isin(graph.labels, known))

    state = {"best": [w.value.copy() for w in params.weights], "acc": -np.inf}

    def one_epoch(epoch):
        erng = np.random.default_rng([seed, 13, epoch])
        logits = _gcn_logits(params.weights, adj_norm, features,
                             config.dropout, True, erng)
        known_logits = nd.matmul(nd.slice_rows(logits, labeled),
                                 nd.constant(selector))
        probs = nd.row_softmax(known_logits)
        picked = nd.mul(nd.log(nd.clamp_min(probs, LOG_FLOOR)),
                        nd.constant(onehot))
        loss = nd.scalar_scale(nd.reduce_sum(picked), -1.0 / labeled.size)
        nd.forward(loss)
        grads = nd.backward(loss)
        for w in params.weights:
            if config.weight_decay:
                grads[w] = grads[w] + config.weight_decay * w.value
        nd.adam_step(params.weights, grads, adam)

        eval_logits = _gcn_logits(params.weights, adj_norm, features,
                                  config.dropout, False, None)
        values = nd.forward(eval_logits)
        preds = values.argmax(axis=1)
        acc = float((preds[val_known] == graph.labels[val_known]).mean()) \
            if val_known.size else 0.0
        if acc > state["acc"]:
            state["acc"] = acc
            state["best"] = [w.value.copy() for w in params.weights]
        return acc

    run_early_stopped(one_epoch, config.max_epochs, config.patience)
    for w, value in zip(params.weights, state["best"]):
        w.value = value

    eval_logits = _gcn_logits(params.weights, adj_norm, features,
                              config.dropout, False, None)
    preds = nd.forward(eval_logits).argmax(axis=1)
    acc_all, acc_known, acc_new = open_world_scores(preds, preds, graph,
                                                    masks, split)
    return MetricsReport("gcn", dataset, fold, repeat, acc_all, acc_known,
                         acc_new, seed)


def run_dgi_kmeans(graph, masks, split, config, seed, dataset="", fold=0,
                   repeat=0):
    """Infomax-only encoder over all nodes, then k-means with k = |classes|.

    Early stopping watches the training loss. Known-class accuracy is absent:
    cluster ids carry no class names.
    """
    rng = np.random.default_rng([seed, 17])
    adj_norm = normalize_adjacency(graph)
    features = prepare_features(graph.features)
    params = init_gcn_params(graph.d, config.hidden_dim, config.num_layers,
                             config.dropout, rng)
    disc = init_discriminator(config.hidden_dim, rng)
    adam = nd.AdamState(config.learning_rate)
    all_nodes = np.arange(graph.n)
    trainable = params.weights + [disc]

    def one_epoch(epoch):
        erng = np.random.default_rng([seed, 19, epoch])
        z = encode(params, adj_norm, features, train_mode=True, rng=erng)
        z_corr = encode(params, adj_norm, corrupt(features, erng),
                        train_mode=True, rng=erng)
        nd.forward(z)
        loss = dgi_loss(all_nodes, z, z_corr, summarize(z), disc)
        value = nd.forward(loss)[0, 0]
        grads = nd.backward(loss)
        for w in trainable:
            if config.weight_decay:
                grads[w] = grads[w] + config.weight_decay * w.value
        nd.adam_step(trainable, grads, adam)
        return -value  # early stopper maximizes

    run_early_stopped(one_epoch, config.max_epochs, config.patience)

    z = encode(params, adj_norm, features, train_mode=False)
    embeddings = nd.forward(z)
    unlabeled = split.unlabeled_nodes
    cluster_labels, _ = kmeans(embeddings[unlabeled], graph.num_classes,
                               seed=np.random.default_rng([seed, 23]).integers(2**31))
    preds = np.full(graph.n, -1, dtype=np.int64)
    preds[unlabeled] = cluster_labels
    acc_all, _, acc_new = open_world_scores(preds, None, graph, masks, split)
    return MetricsReport("dgi-kmeans", dataset, fold, repeat, acc_all, None,
                         acc_new, seed)


def run_spectral(graph, masks, split, config, seed, dataset="", fold=0,
                 repeat=0):
    """Spectral clustering of the whole graph with k = |classes|."""
    labels = spectral_cluster(graph, graph.num_classes,
                              seed=np.random.default_rng([seed, 29]).integers(2**31))
    acc_all, _, acc_new = open_world_scores(labels, None, graph, masks, split)
    return MetricsReport("spectral", dataset, fold, repeat, acc_all, None,
                         acc_new, seed)
