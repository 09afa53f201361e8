"""Experiment runner: data staging, mode dispatch, metrics, and artifacts.

A run writes everything under <out>/<config-hash>/: the resolved config, a
per-round metrics CSV (accuracy and macro-F1 on each client's secret
validation split), the federation round log, serialized models, per-client
synthetic datasets with their accountant audit files, and SVG charts. Two
runs of the same resolved config produce byte-identical CSV/JSON artifacts.

Data-flow modes:
    pppfl            federate on synthetic splits, budget-weighted aggregation
    fedmeta          same loop, uniform weights, no EMA, constant outer lr
    fedavg           parameter averaging after local epochs on synthetic data
    local_secret     no federation; every client trains alone on its secrets
    local_synthetic  no federation; every client trains alone on synthetic data
    collab_secret    ablation: the federation loop runs on raw secret splits

When federation.finetune_steps > 0 the per-round evaluation first adapts a
copy of the current model on the client's secret training split (the
train-on-synthetic / fine-tune-on-secret / test-on-secret flow).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import attack, datagen, federation as fed, metrics, nn, privacy, serialize, svg
from .config import config_hash, dump_config
from .data import (
    AuditedDataset,
    LabeledDataset,
    digits14,
    dirichlet_partition,
    downsample,
    load_cifar_batch,
    load_csv_dataset,
    load_idx,
    split_train_val,
    two_moons,
)
from .util import fmt


@dataclass
class RunResult:
    run_dir: Optional[Path]
    config: dict
    acc_matrix: np.ndarray
    f1_matrix: np.ndarray
    bmta: float
    bmt_f1: float
    epsilons: list[float]
    per_client_best_acc: list[float]
    reports: list


def build_dataset(dataset_cfg: dict, rng: np.random.Generator) -> LabeledDataset:
    name = dataset_cfg["name"]
    if name == "digits14":
        ds = digits14()
    elif name == "moons":
        ds = two_moons(dataset_cfg["moons_n"], dataset_cfg["moons_noise"], rng)
    elif name == "idx":
        ds = load_idx(dataset_cfg["images_path"], dataset_cfg["labels_path"])
    elif name == "csv":
        ds = load_csv_dataset(dataset_cfg["csv_path"])
    elif name == "cifar":
        ds = load_cifar_batch(dataset_cfg["cifar_path"])
    else:
        raise ValueError(f"unknown dataset {name!r}")
    if dataset_cfg.get("downsample_factor", 1) > 1:
        ds = downsample(ds, dataset_cfg["downsample_factor"])
    limit = dataset_cfg.get("limit", 0)
    if limit and limit < len(ds):
        ds = ds.subset(np.sort(rng.permutation(len(ds))[:limit]))
    return ds


def build_net(sample_dim: int, n_classes: int, model_cfg: dict) -> nn.NetworkSpec:
    dims = [sample_dim, *model_cfg["hidden"], n_classes]
    return nn.mlp(dims)


def partition_clients(
    ds: LabeledDataset, cfg: dict, rng: np.random.Generator
) -> dict[int, fed.ClientState]:
    k = cfg["federation"]["clients"]
    plan = dirichlet_partition(ds.labels, k, cfg["dataset"]["concentration"], rng)
    eps_list = cfg["epsilons"] or [cfg["dpgan"]["epsilon_target"]] * k
    clients = {}
    for cid, idx in enumerate(plan.client_indices):
        tr, va = split_train_val(idx, cfg["dataset"]["val_fraction"], rng, labels=ds.labels)
        if va.size == 0:  # tiny client: keep at least one held-out sample
            tr, va = tr[:-1], np.concatenate([va, tr[-1:]])
        clients[cid] = fed.ClientState(
            client_id=cid,
            epsilon=float(eps_list[cid]),
            secret_train=AuditedDataset(ds.subset(tr)),
            secret_val=AuditedDataset(ds.subset(va)),
        )
    return clients


def dpgan_config(cfg: dict, epsilon: float) -> datagen.DpGanConfig:
    payload = dict(cfg["dpgan"])
    payload["epsilon_target"] = epsilon
    return datagen.DpGanConfig(**payload)


def attach_synthetic(
    clients: dict[int, fed.ClientState],
    cfg: dict,
    rng: np.random.Generator,
    out_dir: Optional[Path] = None,
) -> dict[int, datagen.DpGeneratorSet]:
    """Train each client's generators on its secret data; attach synthetic splits."""
    gensets = {}
    n_tr = cfg["synth_per_class"]
    n_va = max(1, int(round(cfg["synth_per_class"] * cfg["dataset"]["val_fraction"])))
    for cid, client in sorted(clients.items()):
        gan_cfg = dpgan_config(cfg, client.epsilon)
        secret = client.secret_train.unwrap()
        secret_val = client.secret_val.unwrap()
        samples = np.concatenate([secret.samples, secret_val.samples])
        labels = np.concatenate([secret.labels, secret_val.labels])
        genset = datagen.train_dp_generator(samples, labels, gan_cfg, rng.spawn(1)[0])
        synth_tr = datagen.synthesize(
            genset, n_tr, rng.spawn(1)[0], client_id=cid, n_classes=secret.n_classes
        )
        synth_va = datagen.synthesize(
            genset, n_va, rng.spawn(1)[0], client_id=cid, n_classes=secret.n_classes
        )
        client.fed_train = LabeledDataset(
            synth_tr.samples, synth_tr.labels, secret.n_classes, name=f"synthetic{cid}"
        )
        client.fed_val = LabeledDataset(
            synth_va.samples, synth_va.labels, secret.n_classes, name=f"synthetic{cid}"
        )
        client.fed_source = "synthetic"
        client.epsilon = genset.epsilon_spent() if gan_cfg.dp_enabled else math.inf
        gensets[cid] = genset
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            serialize.save_synthetic(synth_tr, out_dir / f"client{cid}_train.bin")
            serialize.save_synthetic(synth_va, out_dir / f"client{cid}_val.bin")
            serialize.synthetic_csv(synth_tr, out_dir / f"client{cid}_train.csv")
            if genset.accountant is not None:
                privacy.save_accountant(
                    genset.accountant,
                    out_dir / f"client{cid}_audit.json",
                    extra={
                        "top_k": gan_cfg.top_k,
                        "noise_sigma": gan_cfg.noise_sigma,
                        "steps_per_class": genset.report["steps_per_class"],
                        "total_steps": genset.report["total_steps"],
                        "epsilon_spent": genset.report["epsilon_spent"],
                        "epsilon_target": gan_cfg.epsilon_target,
                        "client_id": cid,
                    },
                )
    return gensets


def attach_secret_flow(clients: dict[int, fed.ClientState]) -> None:
    """Ablation wiring: the federation splits are plain copies of the secrets."""
    for client in clients.values():
        client.fed_train = client.secret_train.unwrap()
        client.fed_val = client.secret_val.unwrap()
        client.fed_source = "secret"


def federation_config(net: nn.NetworkSpec, cfg: dict) -> fed.FederationConfig:
    f = cfg["federation"]
    mode = cfg["mode"]
    kwargs = dict(
        net=net,
        rounds=f["rounds"],
        cycles=f["cycles"],
        inner_lr=f["inner_lr"],
        inner_steps=f["inner_steps"],
        batch_size=f["batch_size"],
        outer_lr_max=f["outer_lr_max"],
        outer_lr_min=f["outer_lr_min"],
        temperature=f["temperature"],
        ema_momentum=f["ema_momentum"],
        ema_scope=f["ema_scope"],
        aggregation="eps_weighted",
        sample_clients=f["sample_clients"],
        finetune_steps=f["finetune_steps"],
        finetune_lr=f["finetune_lr"],
        finetune_optimizer=f["finetune_optimizer"],
        fedavg_epochs=f["fedavg_epochs"],
    )
    if mode == "fedmeta":
        kwargs.update(
            aggregation="uniform",
            ema_momentum=1.0,
            cycles=1,
            outer_lr_min=f["outer_lr_max"],
        )
    if mode == "collab_secret":
        kwargs.update(allow_secret_flow=True)
    return fed.FederationConfig(**kwargs)


def evaluate_round(
    net: nn.NetworkSpec,
    per_client_params: dict[int, nn.ParamSet],
    clients: dict[int, fed.ClientState],
    finetune_steps: int,
    finetune_lr: float,
    finetune_optimizer: str,
    batch_size: int,
) -> tuple[list[float], list[float]]:
    """Secret-validation accuracy and macro-F1 per client, sorted by id."""
    accs, f1s = [], []
    for cid, client in sorted(clients.items()):
        theta = per_client_params[cid]
        if finetune_steps > 0:
            theta = fed.local_adapt(
                net, theta, client.secret_train.unwrap(), finetune_steps, finetune_lr,
                finetune_optimizer, batch_size,
            )
        val = client.secret_val.unwrap()
        preds = nn.predict(net, theta, val.samples)
        accs.append(metrics.accuracy(preds, val.labels))
        f1s.append(metrics.compute_macro_f1(preds, val.labels, val.n_classes))
    return accs, f1s


def run_experiment(cfg: dict, out_root=None) -> RunResult:
    """Stages: data -> (datagen) -> training per mode -> evaluation -> artifacts."""
    mode = cfg["mode"]
    seed = cfg["seed"]
    run_dir = None
    if out_root is not None:
        run_dir = Path(out_root) / config_hash(cfg)
        run_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, run_dir / "config.json")

    ds = build_dataset(cfg["dataset"], np.random.default_rng([seed, 1]))
    clients = partition_clients(ds, cfg, np.random.default_rng([seed, 2]))
    net = build_net(ds.dim, ds.n_classes, cfg["model"])

    needs_synth = mode in ("pppfl", "fedmeta", "fedavg", "local_synthetic")
    if needs_synth:
        attach_synthetic(
            clients, cfg, np.random.default_rng([seed, 3]),
            out_dir=None if run_dir is None else run_dir / "synth",
        )
    if mode == "collab_secret":
        attach_secret_flow(clients)

    f = cfg["federation"]
    acc_rows: list[list[float]] = []
    f1_rows: list[list[float]] = []
    reports: list[fed.RoundReport] = []
    adapted: dict[int, nn.ParamSet] = {}
    final_global: Optional[nn.ParamSet] = None

    def eval_and_record(per_client_params):
        accs, f1s = evaluate_round(
            net, per_client_params, clients, f["finetune_steps"], f["finetune_lr"],
            f["finetune_optimizer"], f["batch_size"],
        )
        acc_rows.append(accs)
        f1_rows.append(f1s)

    if mode in ("local_secret", "local_synthetic"):
        source = {
            cid: (c.secret_train.unwrap() if mode == "local_secret" else c.fed_train)
            for cid, c in clients.items()
        }
        params = {
            cid: nn.init_params(net, np.random.default_rng([seed, 4, cid]))
            for cid in clients
        }
        opt = {
            cid: nn.make_optimizer(cfg["local"]["optimizer"], params[cid]) for cid in clients
        }
        for _ in range(f["rounds"]):
            for cid in sorted(clients):
                train = source[cid]
                p, st = params[cid], opt[cid]
                for step_i in range(f["inner_steps"]):
                    rows = fed._batch_rows(len(train), f["batch_size"], step_i)
                    _, grads = nn.loss_and_grad(
                        net, p, train.samples[rows], train.labels[rows]
                    )
                    st, p = nn.optimizer_step(st, p, grads, cfg["local"]["lr"])
                params[cid], opt[cid] = p, st
            accs, f1s = evaluate_round(net, params, clients, 0, 0.0, "sgd", f["batch_size"])
            acc_rows.append(accs)
            f1_rows.append(f1s)
        adapted = params
    elif mode == "fedavg":
        def on_round(server, cl, report):
            reports.append(report)
            eval_and_record({cid: server.params for cid in cl})

        server, _ = fed.run_fedavg(clients, federation_config(net, cfg),
                                   np.random.default_rng([seed, 4]), on_round)
        final_global = server.params
        adapted = {
            cid: fed.local_adapt(
                net, server.params, c.secret_train.unwrap(), f["finetune_steps"],
                f["finetune_lr"], f["finetune_optimizer"], f["batch_size"],
            )
            for cid, c in sorted(clients.items())
        }
    else:  # pppfl, fedmeta, collab_secret
        def on_round(server, cl, report):
            reports.append(report)
            eval_and_record({cid: server.params for cid in cl})

        server, adapted, _ = fed.run_pppfl(
            clients, federation_config(net, cfg), np.random.default_rng([seed, 4]), on_round
        )
        final_global = server.params

    acc_matrix = np.array(acc_rows)
    f1_matrix = np.array(f1_rows)
    result = RunResult(
        run_dir=run_dir,
        config=cfg,
        acc_matrix=acc_matrix,
        f1_matrix=f1_matrix,
        bmta=metrics.compute_bmta(acc_matrix),
        bmt_f1=metrics.compute_bmta(f1_matrix),
        epsilons=[clients[cid].epsilon for cid in sorted(clients)],
        per_client_best_acc=[float(v) for v in acc_matrix.max(axis=0)],
        reports=reports,
    )
    if run_dir is not None:
        write_artifacts(result, net, final_global, adapted)
    return result


def write_metrics_csv(acc_matrix, f1_matrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "client_id", "accuracy", "macro_f1"])
        for r in range(acc_matrix.shape[0]):
            for c in range(acc_matrix.shape[1]):
                writer.writerow([r + 1, c, fmt(float(acc_matrix[r, c])), fmt(float(f1_matrix[r, c]))])


def write_rounds_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["round", "client_id", "support_loss", "query_loss", "grad_norm", "weight", "lr"]
        )
        for rep in reports:
            for i, cid in enumerate(rep.client_ids):
                writer.writerow(
                    [
                        rep.round,
                        cid,
                        fmt(rep.support_losses[i]),
                        fmt(rep.query_losses[i]),
                        fmt(rep.grad_norms[i]),
                        fmt(rep.weights[i]),
                        fmt(rep.lr),
                    ]
                )


def write_artifacts(result: RunResult, net, final_global, adapted) -> None:
    run_dir = result.run_dir
    write_metrics_csv(result.acc_matrix, result.f1_matrix, run_dir / "metrics.csv")
    if result.reports:
        write_rounds_csv(result.reports, run_dir / "rounds.csv")
    summary = {
        "mode": result.config["mode"],
        "seed": result.config["seed"],
        "config_hash": config_hash(result.config),
        "bmta": result.bmta,
        "bmt_f1": result.bmt_f1,
        "epsilons": result.epsilons,
        "per_client_best_acc": result.per_client_best_acc,
        "rounds": int(result.acc_matrix.shape[0]),
        "clients": int(result.acc_matrix.shape[1]),
    }
    with open(run_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    models = run_dir / "models"
    models.mkdir(exist_ok=True)
    if final_global is not None:
        serialize.save_params(final_global, models / "global.bin")
    for cid, params in sorted(adapted.items()):
        serialize.save_params(params, models / f"client{cid}.bin")

    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    if result.reports:
        svg.line_chart(
            {
                "support+query loss": [
                    float(np.mean(r.support_losses) + np.mean(r.query_losses))
                    for r in result.reports
                ],
                "query loss": [float(np.mean(r.query_losses)) for r in result.reports],
            },
            plots / "loss_curves.svg",
            title="federation losses",
            ylabel="loss",
        )
    svg.line_chart(
        {"mean accuracy": list(result.acc_matrix.mean(axis=1)),
         "mean macro-F1": list(result.f1_matrix.mean(axis=1))},
        plots / "accuracy.svg",
        title="secret-validation metrics",
        ylabel="score",
    )


def run_sweep(cfg: dict, out_root=None) -> list[dict]:
    """One experiment per privacy level; returns level summaries, low->high utility."""
    rows = []
    for level_name in sorted(cfg["sweep"]["levels"]):
        overrides = cfg["sweep"]["levels"][level_name]
        level_cfg = json.loads(json.dumps({k: v for k, v in cfg.items() if k != "sweep"}))
        level_cfg["dpgan"] = {**level_cfg["dpgan"], **overrides}
        result = run_experiment(level_cfg, out_root)
        rows.append(
            {
                "level": level_name,
                "noise_sigma": level_cfg["dpgan"]["noise_sigma"],
                "dp_enabled": level_cfg["dpgan"]["dp_enabled"],
                "mean_epsilon": float(np.mean(result.epsilons)),
                "bmta": result.bmta,
                "bmt_f1": result.bmt_f1,
            }
        )
    if out_root is not None:
        out = Path(out_root)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["level", "noise_sigma", "dp_enabled", "mean_epsilon", "bmta", "bmt_f1"])
            for row in rows:
                writer.writerow(
                    [row["level"], fmt(row["noise_sigma"]), row["dp_enabled"],
                     fmt(row["mean_epsilon"]), fmt(row["bmta"]), fmt(row["bmt_f1"])]
                )
        finite = [r for r in rows if math.isfinite(r["mean_epsilon"])]
        if len(finite) >= 2:
            svg.scatter(
                [r["mean_epsilon"] for r in finite],
                [r["bmta"] for r in finite],
                out / "sweep.svg",
                title="privacy-utility sweep",
                xlabel="spent epsilon",
                ylabel="BMTA",
                labels=[r["level"] for r in finite],
            )
    return rows


def incentive_report(
    local_accs, federated_accs, out_dir=None
) -> tuple[np.ndarray, float]:
    """Per-client gain from participating plus its rank correlation with local skill."""
    local_accs = np.asarray(local_accs, dtype=np.float64)
    federated_accs = np.asarray(federated_accs, dtype=np.float64)
    if local_accs.shape != federated_accs.shape:
        raise ValueError("client count mismatch")
    gains = federated_accs - local_accs
    rho = metrics.spearman(local_accs, gains)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "incentive.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["client_id", "local_acc", "federated_acc", "gain"])
            for cid, (la, fa, g) in enumerate(zip(local_accs, federated_accs, gains)):
                writer.writerow([cid, fmt(float(la)), fmt(float(fa)), fmt(float(g))])
        svg.scatter(
            list(local_accs),
            list(gains),
            out / "incentive.svg",
            title=f"participation gain vs local skill (spearman {rho:.2f})",
            xlabel="local accuracy",
            ylabel="gain",
        )
    return gains, rho
