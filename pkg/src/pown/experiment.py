"""Experiment orchestration: config parsing, (method x fold x repeat) grids,
metric/trace/diagnostic files, the scaling probe, and class-count estimation."""

from __future__ import annotations

import csv
import hashlib
import time
import traceback
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .baselines import run_dgi_kmeans, run_gcn_baseline, run_spectral
from .encoder import encode
from .errors import ContractViolation
from .evaluation import estimate_num_classes
from .graphdata import (feasible_fold_count, generate_sbm, load_graph,
                        make_class_folds, normalize_adjacency,
                        open_world_split, subgraph)
from .prototypes import init_prototypes, renormalize, supervised_loss
from .trainer import (ModelState, TrainConfig, fit, init_model,
                      open_world_scores, predict, predicted_known_classes,
                      prepare_features, train_epoch)
from . import ndtensor as nd

METHODS = ("pown", "gcn", "dgi-kmeans", "spectral")
METRICS_HEADER = "method,dataset,fold,repeat,acc_all,acc_known,acc_new,seed"
EDGE_HEADER = ("epoch,homophilic_mean,homophilic_std,"
               "heterophilic_mean,heterophilic_std")


@dataclass
class ExperimentPlan:
    dataset: str = ""
    methods: tuple = ("pown",)
    ratio: float = 0.2
    folds: tuple | None = None
    repeats: int = 1
    base_seed: int = 0
    out_dir: str = "runs"
    sbm_feature_dim: int = 32
    sbm_feature_noise: float = 0.5

    def validate(self):
        if not self.dataset:
            raise ContractViolation("missing required `dataset`")
        if self.repeats < 1:
            raise ContractViolation("repeats must be >= 1")
        if not self.methods:
            raise ContractViolation("methods must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ContractViolation(
                    f"unknown method {m!r}; expected one of {METHODS}")
        return self


_CONFIG_SCHEMA = {
    # training
    "supervised_weight": float, "infomax_weight": float, "pseudo_weight": float,
    "reg_weight": float, "gamma_quantile": float, "tau_s": float, "tau_p": float,
    "learning_rate": float, "weight_decay": float, "dropout": float,
    "hidden_dim": int, "num_layers": int, "patience": int, "max_epochs": int,
    "lp_hops": int, "entropy_keep_mode": str,
    # plan
    "dataset": str, "methods": str, "ratio": float, "folds": str,
    "repeats": int, "seed": int, "out_dir": str,
    "sbm_feature_dim": int, "sbm_feature_noise": float,
}


def _parse_value(key, raw):
    kind = _CONFIG_SCHEMA[key]
    try:
        return kind(raw)
    except ValueError:
        raise ContractViolation(f"config key {key!r}: cannot parse {raw!r}")


def parse_config(path=None, dataset_override=None):
    """Read flat `key = value` lines into (TrainConfig, ExperimentPlan).

    Unknown keys are rejected. `dataset` must come from the file or the
    override. Defaults match the library's tuned citation-graph values.
    """
    values = {}
    if path is not None:
        text = Path(path).read_text()
        for i, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(f"{path}:{i}: expected `key = value`")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_SCHEMA:
                raise ContractViolation(f"{path}:{i}: unknown key {key!r}")
            values[key] = _parse_value(key, value)

    config_fields = {f.name for f in fields(TrainConfig)}
    config = TrainConfig(**{k: v for k, v in values.items()
                            if k in config_fields})
    plan = ExperimentPlan()
    if "dataset" in values:
        plan = replace(plan, dataset=values["dataset"])
    if dataset_override:
        plan = replace(plan, dataset=dataset_override)
    if "methods" in values:
        plan = replace(plan, methods=tuple(values["methods"].split(",")))
    if "folds" in values:
        plan = replace(plan, folds=tuple(
            int(x) for x in values["folds"].split(",")))
    for key in ("ratio", "repeats", "out_dir", "sbm_feature_dim",
                "sbm_feature_noise"):
        if key in values:
            plan = replace(plan, **{key: values[key]})
    if "seed" in values:
        plan = replace(plan, base_seed=values["seed"])
    if not plan.dataset:
        raise ContractViolation("missing required `dataset`")
    config.validate()
    plan.validate()
    return config, plan


def derive_seed(base_seed, method, fold, repeat):
    """Stable per-run seed from the grid coordinates."""
    key = f"{base_seed}|{method}|{fold}|{repeat}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def load_dataset(spec, plan=None):
    """A directory path, or `sbm:<n>,<classes>,<p_in>,<p_out>` for a synthetic graph."""
    if spec.startswith("sbm:"):
        parts = spec[4:].split(",")
        if len(parts) != 4:
            raise ContractViolation(
                "sbm spec must be sbm:<n>,<classes>,<p_in>,<p_out>")
        n, classes = int(parts[0]), int(parts[1])
        p_in, p_out = float(parts[2]), float(parts[3])
        plan = plan or ExperimentPlan(dataset=spec)
        seed = [plan.base_seed, 9000]
        return generate_sbm(n, classes, p_in, p_out, plan.sbm_feature_dim,
                            plan.sbm_feature_noise, seed)
    return load_graph(spec)


def run_pown(graph, masks, split, config, seed, dataset="", fold=0, repeat=0,
             collect_edge_stats=True):
    from .evaluation import MetricsReport
    run_config = replace(config, seed=seed)
    result = fit(graph, masks, split, run_config,
                 collect_edge_stats=collect_edge_stats)
    preds, _ = predict(result.state)
    known_preds = predicted_known_classes(preds, result.state.protos)
    acc_all, acc_known, acc_new = open_world_scores(preds, known_preds, graph,
                                                    masks, split)
    report = MetricsReport("pown", dataset, fold, repeat, acc_all, acc_known,
                           acc_new, seed)
    return report, result


def _format_metric(value):
    return "" if value is None else repr(float(value))


def _write_edge_reports(path, edge_reports):
    with open(path, "w") as handle:
        handle.write(EDGE_HEADER + "\n")
        for epoch, report in edge_reports:
            row = [str(epoch)]
            for value in (report.homophilic_mean, report.homophilic_std,
                          report.heterophilic_mean, report.heterophilic_std):
                row.append(_format_metric(value))
            handle.write(",".join(row) + "\n")
            handle.flush()


def aggregate_rows(reports):
    """(method, metric, mean, stderr, runs) across reports; stderr uses ddof=1."""
    out = []
    methods = []
    for r in reports:
        if r.method not in methods:
            methods.append(r.method)
    for method in methods:
        for metric in ("acc_all", "acc_known", "acc_new"):
            values = [getattr(r, metric) for r in reports
                      if r.method == method and getattr(r, metric) is not None]
            if not values:
                out.append((method, metric, None, None, 0))
                continue
            arr = np.array(values, dtype=float)
            stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) \
                if arr.size > 1 else 0.0
            out.append((method, metric, float(arr.mean()), stderr, arr.size))
    return out


def emit_report(out_dir, reports):
    """Write aggregate.csv and a plain-text summary table from metric rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = aggregate_rows(reports)
    with open(out_dir / "aggregate.csv", "w") as handle:
        handle.write("method,metric,mean,stderr,runs\n")
        for method, metric, mean, stderr, runs in rows:
            handle.write(f"{method},{metric},{_format_metric(mean)},"
                         f"{_format_metric(stderr)},{runs}\n")

    def cell(method, metric):
        for m, k, mean, stderr, runs in rows:
            if m == method and k == metric and mean is not None:
                return f"{mean:.4f} +/- {stderr:.4f}"
        return "-"

    lines = [f"{'method':<12} {'acc_all':>20} {'acc_known':>20} {'acc_new':>20}"]
    seen = []
    for r in reports:
        if r.method not in seen:
            seen.append(r.method)
    for method in seen:
        lines.append(f"{method:<12} {cell(method, 'acc_all'):>20} "
                     f"{cell(method, 'acc_known'):>20} "
                     f"{cell(method, 'acc_new'):>20}")
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    return rows


def run_experiment(plan, config):
    """Run the grid; returns (exit_code, reports). Exit 2 flags partial failures."""
    plan.validate()
    config.validate()
    graph, masks = load_dataset(plan.dataset, plan)
    fold_count = feasible_fold_count(graph.num_classes, plan.ratio)
    fold_plan = make_class_folds(graph.num_classes, plan.ratio, plan.base_seed,
                                 num_folds=fold_count)
    folds = plan.folds if plan.folds is not None else tuple(range(fold_count))
    for f in folds:
        if not 0 <= f < fold_count:
            raise ContractViolation(f"fold {f} out of range (have {fold_count})")

    out_dir = Path(plan.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = {}
    for method in plan.methods:
        for fold in folds:
            for repeat in range(plan.repeats):
                seed = derive_seed(plan.base_seed, method, fold, repeat)
                if seed in seeds.values():
                    raise ContractViolation("derived seeds collide")
                seeds[(method, fold, repeat)] = seed

    runners = {
        "gcn": run_gcn_baseline,
        "dgi-kmeans": run_dgi_kmeans,
        "spectral": run_spectral,
    }
    reports, failures = [], 0
    with open(out_dir / "metrics.csv", "w", newline="") as metrics_file:
        writer = csv.writer(metrics_file)
        writer.writerow(METRICS_HEADER.split(","))
        metrics_file.flush()
        for method in plan.methods:
            for fold in folds:
                val_fold = (fold + 1) % fold_count
                split = open_world_split(graph, masks, fold_plan, fold, val_fold)
                for repeat in range(plan.repeats):
                    seed = seeds[(method, fold, repeat)]
                    run_id = f"{method}_f{fold}_r{repeat}"
                    try:
                        if method == "pown":
                            report, result = run_pown(
                                graph, masks, split, config, seed,
                                plan.dataset, fold, repeat)
                            (out_dir / f"trace_{run_id}.csv").write_text(
                                result.trace.to_csv())
                            _write_edge_reports(
                                out_dir / f"edge_weights_{run_id}.csv",
                                result.edge_reports)
                        else:
                            report = runners[method](
                                graph, masks, split, config, seed,
                                plan.dataset, fold, repeat)
                    except Exception:
                        failures += 1
                        (out_dir / "failures.log").open("a").write(
                            f"{run_id}\n{traceback.format_exc()}\n")
                        continue
                    reports.append(report)
                    writer.writerow([
                        report.method, report.dataset, report.fold,
                        report.repeat, _format_metric(report.acc_all),
                        _format_metric(report.acc_known),
                        _format_metric(report.acc_new), report.seed])
                    metrics_file.flush()
    emit_report(out_dir, reports)
    return (2 if failures else 0), reports


def scaling_probe(config, base_seed=0, sizes=(1000, 2000, 4000),
                  num_classes=5, timed_epochs=3):
    """Median per-epoch time at each synthetic size (constant average degree).

    Returns {n: seconds} plus the consecutive growth ratios.
    """
    timings = {}
    for n in sizes:
        p_in = min(9.0 * num_classes / n, 1.0)
        p_out = 2.0 * num_classes / ((num_classes - 1) * n)
        graph, masks = generate_sbm(n, num_classes, p_in, p_out, 16, 0.5,
                                    [base_seed, 9100])
        fold_count = feasible_fold_count(num_classes, 0.4)
        fold_plan = make_class_folds(num_classes, 0.4, base_seed,
                                     num_folds=fold_count)
        split = open_world_split(graph, masks, fold_plan, 0, 1)
        probe_config = replace(config, seed=base_seed, hidden_dim=64,
                               num_layers=2, dropout=0.2)
        state = init_model(graph, split, probe_config)
        train_epoch(state, graph, split, probe_config, 1)  # warm-up
        elapsed = []
        for epoch in range(2, 2 + timed_epochs):
            start = time.perf_counter()
            train_epoch(state, graph, split, probe_config, epoch)
            elapsed.append(time.perf_counter() - start)
        timings[n] = float(np.median(elapsed))
    ordered = [timings[n] for n in sizes]
    ratios = [ordered[i + 1] / ordered[i] for i in range(len(ordered) - 1)]
    return timings, ratios


PROBE_EPOCHS = 120


def train_probe_encoder(graph, labeled_nodes, config, seed):
    """Supervised prototype training only, used by the class-count estimator."""
    rng = np.random.default_rng([seed, 41])
    from .encoder import init_gcn_params
    params = init_gcn_params(graph.d, config.hidden_dim, config.num_layers,
                             min(config.dropout, 0.2), rng)
    classes = sorted(set(int(c) for c in graph.labels[labeled_nodes]))
    protos = init_prototypes(classes, 0, config.hidden_dim, config.tau_s,
                             config.tau_p, rng)
    adam = nd.AdamState(config.learning_rate)
    adj_norm = normalize_adjacency(graph)
    features = prepare_features(graph.features)
    trainable = params.weights + [protos.vectors]
    for epoch in range(1, PROBE_EPOCHS + 1):
        erng = np.random.default_rng([seed, 43, epoch])
        z = encode(params, adj_norm, features, train_mode=True, rng=erng)
        nd.forward(z)
        loss = supervised_loss(z, protos, labeled_nodes, graph.labels)
        nd.forward(loss)
        grads = nd.backward(loss)
        for w in params.weights:
            if config.weight_decay:
                grads[w] = grads[w] + config.weight_decay * w.value
        nd.adam_step(trainable, grads, adam)
        renormalize(protos)
    return params


def estimate_class_count(graph, masks, known_classes, config, seed, k_max):
    """Full estimation protocol: split known classes 50/50 into encoder-training
    and probe classes, train on the training-class subgraph, embed everything,
    then run the anchored-k-means sweep."""
    known = np.array(sorted(int(c) for c in known_classes))
    if known.size < 2:
        raise ContractViolation("class-count estimation needs >= 2 known classes")
    rng = np.random.default_rng([seed, 47])
    order = rng.permutation(known)
    half = known.size // 2
    train_classes = np.sort(order[:half])
    probe_classes = np.sort(order[half:])

    labels = graph.labels
    labeled_all = masks.train & np.isin(labels, known)
    sub_nodes = np.flatnonzero(np.isin(labels, train_classes))
    sub = subgraph(graph, sub_nodes)
    position = {int(node): i for i, node in enumerate(sub_nodes)}
    sub_labeled = np.array([position[int(v)] for v in np.flatnonzero(
        labeled_all & np.isin(labels, train_classes))], dtype=np.intp)
    params = train_probe_encoder(sub, sub_labeled, config, seed)

    adj_norm = normalize_adjacency(graph)
    z = encode(params, adj_norm, prepare_features(graph.features))
    embeddings = nd.forward(z)

    probe_nodes = np.flatnonzero(labeled_all & np.isin(labels, probe_classes))
    anchors, validators = [], []
    for c in probe_classes:
        members = rng.permutation(probe_nodes[labels[probe_nodes] == c])
        cut = max(1, len(members) // 2)
        anchors.extend(members[:cut])
        validators.extend(members[cut:])
    anchors = np.array(sorted(anchors), dtype=np.intp)
    validators = np.array(sorted(validators), dtype=np.intp)
    unlabeled = np.setdiff1d(np.arange(graph.n), np.flatnonzero(labeled_all))
    return estimate_num_classes(embeddings, anchors, labels[anchors],
                                validators, labels[validators], unlabeled,
                                k_max, seed)
