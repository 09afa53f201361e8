"""Command-line entry points.

Subcommands:
    datagen   train per-client DP generators, write synthetic datasets + audits
    train     run one experiment (mode from config or --mode)
    attack    gradient-leakage demos: passive inversion, trap weights, containment
    report    re-emit plots/summary from a run directory; incentive vs a baseline
    sweep     privacy-utility sweep over the configured noise levels

All subcommands accept --config PATH --seed N --out DIR; train/sweep also
honor --mode NAME. Exit code 0 on success; failures print a stage-tagged
diagnostic to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import attack, federation as fed, harness, metrics, nn, serialize, svg
from .config import config_hash, dump_config, load_config


@contextmanager
def _stage(name: str, config_path):
    try:
        yield
    except BrokenPipeError:
        raise
    except Exception as exc:
        origin = f" (config {config_path})" if config_path else ""
        print(f"[stage:{name}]{origin} error: {exc}", file=sys.stderr)
        raise SystemExit(2)


def _common_flags(sub):
    sub.add_argument("--config", default=None, help="JSON config file")
    sub.add_argument("--seed", type=int, default=None, help="override config seed")
    sub.add_argument("--out", default="runs", help="output directory")


def cmd_datagen(args) -> int:
    with _stage("config", args.config):
        cfg = load_config(args.config, seed=args.seed)
    with _stage("data", args.config):
        ds = harness.build_dataset(cfg["dataset"], np.random.default_rng([cfg["seed"], 1]))
        clients = harness.partition_clients(ds, cfg, np.random.default_rng([cfg["seed"], 2]))
    with _stage("datagen", args.config):
        out_dir = Path(args.out) / config_hash(cfg) / "synth"
        gensets = harness.attach_synthetic(
            clients, cfg, np.random.default_rng([cfg["seed"], 3]), out_dir=out_dir
        )
        dump_config(cfg, out_dir.parent / "config.json")
    for cid, genset in sorted(gensets.items()):
        spent = genset.epsilon_spent()
        print(
            f"client {cid}: steps={genset.report['total_steps']} "
            f"epsilon_spent={spent:.6g} target={cfg['dpgan']['epsilon_target']}"
        )
    print(f"artifacts: {out_dir}")
    return 0


def cmd_train(args) -> int:
    with _stage("config", args.config):
        cfg = load_config(args.config, seed=args.seed, mode=args.mode)
    with _stage("train", args.config):
        result = harness.run_experiment(cfg, out_root=args.out)
    print(f"mode={cfg['mode']} seed={cfg['seed']} bmta={result.bmta:.4f} bmt_f1={result.bmt_f1:.4f}")
    print(f"run dir: {result.run_dir}")
    return 0


def cmd_sweep(args) -> int:
    with _stage("config", args.config):
        cfg = load_config(args.config, seed=args.seed, mode=args.mode)
    with _stage("sweep", args.config):
        rows = harness.run_sweep(cfg, out_root=args.out)
    for row in rows:
        eps = row["mean_epsilon"]
        eps_s = "inf" if math.isinf(eps) else f"{eps:.4g}"
        print(f"{row['level']}: sigma={row['noise_sigma']} epsilon={eps_s} bmta={row['bmta']:.4f}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.out)
    with _stage("report", args.config):
        summary_path = run_dir / "summary.json"
        if not summary_path.exists():
            raise FileNotFoundError(f"{summary_path} not found; is {run_dir} a run directory?")
        summary = json.loads(summary_path.read_text())
        print(json.dumps(summary, indent=2, sort_keys=True))
        manifest = []
        models = run_dir / "models"
        if models.exists():
            for path in sorted(models.glob("*.bin")):
                manifest.append({path.name: serialize.params_manifest(path)})
        if manifest:
            print(json.dumps(manifest, indent=2))
        if args.baseline:
            base = json.loads((Path(args.baseline) / "summary.json").read_text())
            gains, rho = harness.incentive_report(
                base["per_client_best_acc"], summary["per_client_best_acc"], out_dir=run_dir
            )
            print(f"incentive: gains={[round(g, 4) for g in gains]} spearman={rho:.4f}")
    return 0


def cmd_attack(args) -> int:
    with _stage("config", args.config):
        cfg = load_config(args.config, seed=args.seed)
    acfg = cfg["attack"]
    seed = cfg["seed"]
    out_dir = Path(args.out) / f"attack-{config_hash(cfg)}"
    out_dir.mkdir(parents=True, exist_ok=True)

    with _stage("data", args.config):
        ds = harness.build_dataset(cfg["dataset"], np.random.default_rng([seed, 1]))
        net = harness.build_net(ds.dim, ds.n_classes, cfg["model"])

    summary: dict = {}
    with _stage("attack-passive", args.config):
        exact = 0
        for v in range(acfg["victims"]):
            rng = np.random.default_rng([seed, 10, v])
            params = nn.init_params(net, rng)
            row = int(rng.integers(0, len(ds)))
            x = ds.samples[row : row + 1]
            label = ds.labels[row : row + 1]
            dW, db = attack.first_layer_grads(net, params, x, label)
            rec = attack.recover_all(dW, db, tol=acfg["db_tol"])
            if attack.exact_recoveries(rec.samples, x):
                exact += 1
        summary["passive_batch1_victims"] = acfg["victims"]
        summary["passive_batch1_exact"] = exact

    with _stage("attack-trap", args.config):
        mean = float(ds.samples.mean())
        std = float(ds.samples.std())
        totals = {"trap": 0, "random": 0}
        batch_size = acfg["batch_size"]
        for s in range(acfg["trap_seeds"]):
            rng = np.random.default_rng([seed, 11, s])
            params = nn.init_params(net, rng)
            batch = rng.normal(mean, std, size=(batch_size, ds.dim))
            labels = rng.integers(0, ds.n_classes, size=batch_size)
            trap = attack.trap_weight_init(
                ds.dim, net.layers[0].out_dim, mean, std, 1.0 - 1.0 / batch_size, rng
            )
            for kind, victim in (("trap", trap.graft(params)), ("random", params)):
                dW, db = attack.first_layer_grads(net, victim, batch, labels)
                rec = attack.recover_all(dW, db, tol=acfg["db_tol"])
                totals[kind] += len(attack.exact_recoveries(rec.samples, batch))
        summary["trap_recoveries"] = totals["trap"]
        summary["random_recoveries"] = totals["random"]

    with _stage("attack-containment", args.config):
        clients = harness.partition_clients(ds, cfg, np.random.default_rng([seed, 2]))
        harness.attach_synthetic(clients, cfg, np.random.default_rng([seed, 3]))
        client = clients[0]
        rng = np.random.default_rng([seed, 12])
        params = nn.init_params(net, rng)
        synth = client.fed_train
        row = int(rng.integers(0, len(synth)))
        x = synth.samples[row : row + 1]
        dW, db = attack.first_layer_grads(net, params, x, synth.labels[row : row + 1])
        rec = attack.recover_all(dW, db, tol=acfg["db_tol"])
        secret = client.secret_train.unwrap()
        report = attack.evaluate_leakage(
            rec, secret.samples, synth.samples, match_tol=acfg["match_tol"]
        )
        residuals = np.array(
            [np.linalg.norm(r - x[0]) for r in rec.samples]
        )
        attack.leakage_csv(report, out_dir / "leakage.csv", residuals=residuals)
        summary["containment_match_rate_secret"] = report.match_rate_secret
        summary["containment_match_rate_synthetic"] = report.match_rate_synthetic
        side = int(round(math.sqrt(ds.dim)))
        if side * side == ds.dim and rec.samples.shape[0] > 0:
            pairs = [(x[0], rec.samples[i]) for i in range(min(4, rec.samples.shape[0]))]
            svg.image_gallery(pairs, side, out_dir / "gallery.svg")

    with open(out_dir / "attack_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"artifacts: {out_dir}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="silofl",
        description="privacy-preserving personalized federated learning simulator",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("datagen", help="train DP generators, emit synthetic data + audits")
    _common_flags(p)
    p.set_defaults(func=cmd_datagen)

    p = subs.add_parser("train", help="run a federation experiment")
    _common_flags(p)
    p.add_argument("--mode", default=None, help="override config mode")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("attack", help="gradient-leakage threat demos")
    _common_flags(p)
    p.set_defaults(func=cmd_attack)

    p = subs.add_parser("report", help="summarize a run directory")
    _common_flags(p)
    p.add_argument("--baseline", default=None, help="local-baseline run dir for incentive analysis")
    p.set_defaults(func=cmd_report)

    p = subs.add_parser("sweep", help="privacy-utility sweep over noise levels")
    _common_flags(p)
    p.add_argument("--mode", default=None, help="override config mode")
    p.set_defaults(func=cmd_sweep)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
