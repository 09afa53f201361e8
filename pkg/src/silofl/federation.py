"""Federated meta-learning loop, budget-weighted aggregation, and baselines.

One communication round: sampled clients adapt the global model on their
federation training split (synthetic data under the normal flow), compute
the cross-entropy gradient at the adapted parameters on their held-out
federation split, and upload it. The server combines the uploads, uniformly
or softmax-weighted by the clients' privacy budgets, steps with a cosine-
annealed outer learning rate, and smooths the result with an exponential
moving average. Secret splits stay untouched until post-federation local
adaptation; an access counter on the secret splits is asserted unchanged
across every round.

Client order inside the aggregation sum is fixed (ascending id), so a
parallel implementation of the per-client work would reproduce these
results bit for bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .data import AuditedDataset, LabeledDataset


class SecretAccessError(RuntimeError):
    """A federation round touched a client's secret split."""


@dataclass(frozen=True)
class FederationConfig:
    net: nn.NetworkSpec
    rounds: int = 30
    cycles: int = 3
    inner_lr: float = 1e-4
    inner_steps: int = 5
    batch_size: int = 64
    outer_lr_max: float = 3e-4
    outer_lr_min: float = 0.0
    temperature: float = 1.0
    ema_momentum: float = 0.95
    ema_scope: str = "server"
    aggregation: str = "eps_weighted"
    sample_clients: Optional[int] = None
    finetune_steps: int = 0
    finetune_lr: float = 1e-3
    finetune_optimizer: str = "sgd"
    fedavg_epochs: int = 1
    allow_secret_flow: bool = False

    def __post_init__(self):
        if self.rounds < 1 or self.cycles < 1:
            raise ValueError("rounds and cycles must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if self.ema_scope not in ("server", "client"):
            raise ValueError("ema_scope must be 'server' or 'client'")
        if self.aggregation not in ("uniform", "eps_weighted"):
            raise ValueError("aggregation must be 'uniform' or 'eps_weighted'")


@dataclass
class ClientState:
    """One silo: its budget, model, federation splits, and guarded secrets."""

    client_id: int
    epsilon: float
    secret_train: AuditedDataset
    secret_val: AuditedDataset
    fed_train: Optional[LabeledDataset] = None
    fed_val: Optional[LabeledDataset] = None
    fed_source: str = "synthetic"
    params: Optional[nn.ParamSet] = None


@dataclass
class ServerState:
    params: nn.ParamSet
    round: int = 0


@dataclass
class RoundReport:
    round: int
    client_ids: list[int]
    support_losses: list[float]
    query_losses: list[float]
    grad_norms: list[float]
    weights: list[float]
    lr: float
    wall_clock: float

    def __post_init__(self):
        if self.weights and abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("aggregation weights must sum to 1")


def _batch_rows(n: int, batch_size: int, step: int) -> np.ndarray:
    bsz = min(batch_size, n)
    start = (step * bsz) % n
    return np.arange(start, start + bsz) % n


def _train_steps(
    net: nn.NetworkSpec,
    params: nn.ParamSet,
    samples: np.ndarray,
    labels: np.ndarray,
    steps: int,
    lr: float,
    batch_size: int,
    opt_state: Optional[nn.OptimState] = None,
) -> nn.ParamSet:
    """Deterministic mini-batch windows over the data, one gradient step each."""
    state = opt_state if opt_state is not None else nn.make_optimizer("sgd", params)
    for step in range(steps):
        rows = _batch_rows(samples.shape[0], batch_size, step)
        _, grads = nn.loss_and_grad(net, params, samples[rows], labels[rows])
        state, params = nn.optimizer_step(state, params, grads, lr)
    return params


def loss_value(net: nn.NetworkSpec, params: nn.ParamSet, ds: LabeledDataset) -> float:
    loss, _ = nn.loss_and_grad(net, params, ds.samples, ds.labels)
    return loss


def client_inner_update(
    net: nn.NetworkSpec,
    theta: nn.ParamSet,
    support: LabeledDataset,
    inner_lr: float,
    n_steps: int,
    batch_size: int = 64,
) -> nn.ParamSet:
    """n_steps mini-batch SGD steps on the support cross-entropy, from theta."""
    if len(support) == 0:
        raise ValueError("empty support set")
    if inner_lr <= 0:
        raise ValueError("inner_lr must be positive")
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    return _train_steps(net, theta, support.samples, support.labels, n_steps, inner_lr, batch_size)


def client_query_grad(
    net: nn.NetworkSpec, theta_i: nn.ParamSet, query: LabeledDataset
) -> nn.GradSet:
    """Exact cross-entropy gradient at the adapted parameters (first order)."""
    if len(query) == 0:
        raise ValueError("empty query set")
    _, grads = nn.loss_and_grad(net, theta_i, query.samples, query.labels)
    return grads


def softmax_weights(epsilons: Sequence[float], temperature: float) -> np.ndarray:
    """Softmax over budget/temperature; infinite budgets take the whole mass."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    eps = np.asarray(epsilons, dtype=np.float64)
    if eps.size == 0:
        raise ValueError("no budgets to weight")
    if math.isinf(temperature):
        scores = np.zeros_like(eps)
    else:
        scores = eps / temperature
    if np.any(np.isinf(scores)):
        top = np.isinf(scores) & (scores > 0)
        return top.astype(np.float64) / top.sum()
    scores = scores - scores.max()
    w = np.exp(scores)
    return w / w.sum()


def server_aggregate(
    theta: nn.ParamSet,
    contributions: Sequence[tuple[int, nn.GradSet, float]],
    mode: str,
    lr: float,
    temperature: float = 1.0,
) -> nn.ParamSet:
    """One outer step from (client_id, gradient, budget) triples.

    Contributions are summed in ascending client-id order, so the result does
    not depend on the order the caller collected them in.
    """
    if not contributions:
        raise ValueError("no contributions to aggregate")
    if lr <= 0:
        raise ValueError("lr must be positive")
    ordered = sorted(contributions, key=lambda c: c[0])
    grads = [g for _, g, _ in ordered]
    if mode == "uniform":
        weights = np.full(len(ordered), 1.0 / len(ordered))
    elif mode == "eps_weighted":
        weights = softmax_weights([e for _, _, e in ordered], temperature)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    step = nn.combine(grads, weights)
    return nn.sgd_step(theta, step, lr)


def aggregation_weights(
    contributions: Sequence[tuple[int, nn.GradSet, float]], mode: str, temperature: float
) -> np.ndarray:
    ordered = sorted(contributions, key=lambda c: c[0])
    if mode == "uniform":
        return np.full(len(ordered), 1.0 / len(ordered))
    return softmax_weights([e for _, _, e in ordered], temperature)


def _sample_client_ids(
    clients: dict[int, ClientState], m: Optional[int], rng: np.random.Generator
) -> list[int]:
    ids = sorted(clients)
    m = len(ids) if m is None else m
    if not 1 <= m <= len(ids):
        raise ValueError(f"cannot sample {m} of {len(ids)} clients")
    picked = rng.choice(ids, size=m, replace=False)
    return sorted(int(i) for i in picked)


def run_round(
    server: ServerState,
    clients: dict[int, ClientState],
    cfg: FederationConfig,
    rng: np.random.Generator,
) -> tuple[ServerState, dict[int, ClientState], RoundReport]:
    """One communication round; never reads any client's secret splits."""
    t0 = time.perf_counter()
    audit_before = {
        cid: (c.secret_train.reads, c.secret_val.reads) for cid, c in clients.items()
    }
    sampled = _sample_client_ids(clients, cfg.sample_clients, rng)
    t = server.round + 1
    lr = nn.cosine_lr(t, cfg.rounds, cfg.cycles, cfg.outer_lr_max, cfg.outer_lr_min)

    contributions = []
    support_losses, query_losses, grad_norms = [], [], []
    for cid in sampled:
        client = clients[cid]
        if client.fed_train is None or client.fed_val is None:
            raise ValueError(f"client {cid}: no federation data attached")
        try:
            theta_i = client_inner_update(
                cfg.net, server.params, client.fed_train, cfg.inner_lr, cfg.inner_steps,
                cfg.batch_size,
            )
            if cfg.ema_scope == "client" and client.params is not None:
                theta_i = nn.ema_update(theta_i, client.params, cfg.ema_momentum)
            g_i = client_query_grad(cfg.net, theta_i, client.fed_val)
        except Exception as exc:
            raise RuntimeError(f"client {cid}: {exc}") from exc
        client.params = theta_i
        support_losses.append(loss_value(cfg.net, theta_i, client.fed_train))
        query_losses.append(loss_value(cfg.net, theta_i, client.fed_val))
        grad_norms.append(nn.grad_norm(g_i))
        contributions.append((cid, g_i, client.epsilon))

    weights = aggregation_weights(contributions, cfg.aggregation, cfg.temperature)
    theta_new = server_aggregate(server.params, contributions, cfg.aggregation, lr, cfg.temperature)
    if cfg.ema_scope == "server":
        theta_new = nn.ema_update(theta_new, server.params, cfg.ema_momentum)

    for cid, client in clients.items():
        if (client.secret_train.reads, client.secret_val.reads) != audit_before[cid]:
            raise SecretAccessError(f"client {cid}: secret split read during round {t}")

    report = RoundReport(
        round=t,
        client_ids=sampled,
        support_losses=support_losses,
        query_losses=query_losses,
        grad_norms=grad_norms,
        weights=list(weights),
        lr=lr,
        wall_clock=time.perf_counter() - t0,
    )
    return ServerState(params=theta_new, round=t), clients, report


def local_adapt(
    net: nn.NetworkSpec,
    theta: nn.ParamSet,
    secret_train: LabeledDataset,
    steps: int,
    lr: float,
    optimizer: str = "sgd",
    batch_size: int = 64,
) -> nn.ParamSet:
    """Post-federation fine-tuning on the client's own secret training split."""
    if len(secret_train) == 0:
        raise ValueError("empty adaptation set")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0:
        return theta
    opt = nn.make_optimizer(optimizer, theta)
    return _train_steps(
        net, theta, secret_train.samples, secret_train.labels, steps, lr, batch_size, opt
    )


def run_pppfl(
    clients: dict[int, ClientState],
    cfg: FederationConfig,
    rng: np.random.Generator,
    on_round: Optional[Callable[[ServerState, dict[int, ClientState], RoundReport], None]] = None,
) -> tuple[ServerState, dict[int, nn.ParamSet], list[RoundReport]]:
    """Full protocol: T rounds of federation, then per-client local adaptation."""
    for cid, client in sorted(clients.items()):
        if client.fed_train is None or client.fed_val is None:
            raise ValueError(f"client {cid}: no federation data")
        if client.fed_source != "synthetic" and not cfg.allow_secret_flow:
            raise ValueError(
                f"client {cid}: federation data comes from {client.fed_source!r}; "
                "secret data flow requires allow_secret_flow"
            )
    server = ServerState(params=nn.init_params(cfg.net, rng), round=0)
    reports: list[RoundReport] = []
    for _ in range(cfg.rounds):
        server, clients, report = run_round(server, clients, cfg, rng)
        reports.append(report)
        if on_round is not None:
            on_round(server, clients, report)
    adapted = {
        cid: local_adapt(
            cfg.net,
            server.params,
            client.secret_train.unwrap(),
            cfg.finetune_steps,
            cfg.finetune_lr,
            cfg.finetune_optimizer,
            cfg.batch_size,
        )
        for cid, client in sorted(clients.items())
    }
    return server, adapted, reports


def run_fedavg(
    clients: dict[int, ClientState],
    cfg: FederationConfig,
    rng: np.random.Generator,
    on_round: Optional[Callable[[ServerState, dict[int, ClientState], RoundReport], None]] = None,
) -> tuple[ServerState, list[RoundReport]]:
    """Size-weighted parameter averaging after local epochs on the federation split."""
    server = ServerState(params=nn.init_params(cfg.net, rng), round=0)
    reports: list[RoundReport] = []
    for _ in range(cfg.rounds):
        t0 = time.perf_counter()
        sampled = _sample_client_ids(clients, cfg.sample_clients, rng)
        t = server.round + 1
        sizes = np.array([len(clients[cid].fed_train) for cid in sampled], dtype=np.float64)
        weights = sizes / sizes.sum()
        locals_, support_losses, query_losses, norms = [], [], [], []
        for cid in sampled:
            client = clients[cid]
            steps = cfg.fedavg_epochs * max(
                1, math.ceil(len(client.fed_train) / cfg.batch_size)
            )
            theta_i = _train_steps(
                cfg.net,
                server.params,
                client.fed_train.samples,
                client.fed_train.labels,
                steps,
                cfg.inner_lr,
                cfg.batch_size,
            )
            client.params = theta_i
            locals_.append(theta_i)
            support_losses.append(loss_value(cfg.net, theta_i, client.fed_train))
            query_losses.append(loss_value(cfg.net, theta_i, client.fed_val))
            norms.append(nn.grad_norm(nn.map2(lambda a, b: a - b, theta_i, server.params)))
        theta = nn.combine(locals_, weights)
        reports.append(
            RoundReport(
                round=t,
                client_ids=sampled,
                support_losses=support_losses,
                query_losses=query_losses,
                grad_norms=norms,
                weights=list(weights),
                lr=cfg.inner_lr,
                wall_clock=time.perf_counter() - t0,
            )
        )
        server = ServerState(params=theta, round=t)
        if on_round is not None:
            on_round(server, clients, reports[-1])
    return server, reports
