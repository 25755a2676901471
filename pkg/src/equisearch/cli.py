"""Command line front end.

Every run command resolves its settings the same way: built-in defaults,
then a config file of `key=value` lines, then `key=value` tokens on the
command line, with `--seed` as a final override.  The resolved settings
are written into the output directory so a run can be reproduced from
its artifacts alone.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ck
from . import data as dt
from . import model as md
from . import nas_diff as nd
from . import nas_evo as ne
from . import reports
from . import train as tr
from . import verify as vf
from . import autodiff as ad


class BadConfig(ValueError):
    pass


_DATA_DEFAULTS = {
    "dataset": "glyphs",
    "data_dir": "",
    "augment": "none",
    "n_train": 2000,
    "n_val": 200,
    "n_test": 1000,
}

DEFAULTS = {
    "verify": {"suites": "", "seed": 0},
    "train": {
        **_DATA_DEFAULTS,
        "genotype": "D4-D4-C4-C4",
        "width": 16,
        "k": 3,
        "init": "direct",       # direct | prior
        "epochs": 5.0,
        "optimizer": "adam",    # adam | sgd
        "lr": 0.01,
        "batch_size": 64,
        "record_every": 10,
        "seed": 0,
    },
    "evo": {
        **_DATA_DEFAULTS,
        "generations": 10,
        "n_parents": 5,
        "epochs_per_gen": 0.5,
        "lr": 0.01,
        "batch_size": 64,
        "width": 16,
        "n_layers": 4,
        "selection": "pareto",
        "seed": 0,
    },
    "diff": {
        **_DATA_DEFAULTS,
        "iterations": 100,
        "lr_z": 0.01,
        "lr_w": 0.01,
        "batch_size": 64,
        "width": 16,
        "n_layers": 4,
        "ablation": "none",
        "record_every": 10,
        "retrain_epochs": 0.0,
        "seed": 0,
    },
    "collapse": {"probe_batch": 4, "probe_size": 16, "seed": 0},
    "report": {"figs": ""},
}


def _coerce(command: str, key: str, value: str, defaults: dict):
    if key not in defaults:
        raise BadConfig(f"unknown key {key!r} for {command}; "
                        f"valid keys: {', '.join(sorted(defaults))}")
    ref = defaults[key]
    try:
        if isinstance(ref, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(ref, int):
            return int(value)
        if isinstance(ref, float):
            return float(value)
        return value
    except ValueError:
        raise BadConfig(f"bad value for {key}: {value!r} "
                        f"(expected {type(ref).__name__})") from None


def load_config_file(path: str) -> dict:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BadConfig(f"{path}:{lineno}: expected key=value, "
                                f"got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def resolve_config(command: str, args) -> dict:
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    raw = {}
    if getattr(args, "config", None):
        raw.update(load_config_file(args.config))
    for token in getattr(args, "overrides", []) or []:
        if "=" not in token:
            raise BadConfig(f"expected key=value override, got {token!r}")
        key, value = token.split("=", 1)
        raw[key.strip()] = value.strip()
    for key, value in raw.items():
        cfg[key] = _coerce(command, key, value, defaults)
    if getattr(args, "seed", None) is not None and "seed" in defaults:
        cfg["seed"] = args.seed
    return cfg


def write_config(path: str, cfg: dict, workers: int) -> None:
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    lines.append(f"workers={workers}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _dataset(cfg: dict) -> dt.Dataset:
    return dt.make_dataset(
        name=cfg["dataset"],
        n_train=cfg["n_train"], n_val=cfg["n_val"], n_test=cfg["n_test"],
        seed=cfg["seed"],
        augment=None if cfg["augment"] == "none" else cfg["augment"],
        data_dir=cfg["data_dir"] or None)


def _out_dir(args, command: str) -> str:
    out = args.out or os.path.join("runs", command)
    os.makedirs(out, exist_ok=True)
    return out


def cmd_verify(args) -> int:
    cfg = resolve_config("verify", args)
    names = [s for s in cfg["suites"].split(",") if s] or None
    results = vf.run(names, seed=cfg["seed"])
    n_fail = 0
    for r in results:
        mark = "pass" if r.passed else "FAIL"
        n_fail += not r.passed
        print(f"[{mark}] {r.suite}: {r.name} ({r.detail})")
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return 1 if n_fail else 0


def cmd_train(args) -> int:
    cfg = resolve_config("train", args)
    ds = _dataset(cfg)
    genotype = cfg["genotype"].split("-")

    if args.eval_only:
        if not args.checkpoint:
            raise BadConfig("--eval-only needs --checkpoint")
        net, _ = ck.load_network(args.checkpoint, expect_mode="static")
        loss, acc = tr.evaluate(net, ds.x_test, ds.y_test)
        print(f"test loss {loss:.4f}  test acc {acc:.4f}")
        return 0

    out = _out_dir(args, "train")
    write_config(os.path.join(out, "config.txt"), cfg, args.workers)

    if cfg["init"] == "prior":
        net = ne.prior_network(genotype, width=cfg["width"],
                               n_classes=ds.n_classes, k=cfg["k"],
                               seed=cfg["seed"])
    elif cfg["init"] == "direct":
        net = md.Network(genotype, width=cfg["width"], n_classes=ds.n_classes,
                         k=cfg["k"], seed=cfg["seed"],
                         image_channels=ds.image_channels)
    else:
        raise BadConfig(f"init must be direct or prior, got {cfg['init']!r}")

    steps = tr.steps_for_fraction(len(ds.x_train), cfg["batch_size"],
                                  cfg["epochs"])
    batcher = tr.Batcher(ds.x_train, ds.y_train, cfg["batch_size"],
                         np.random.default_rng(np.random.SeedSequence(
                             cfg["seed"], spawn_key=(10,))))
    if cfg["optimizer"] == "adam":
        opt = ad.Adam(net.parameters(), lr=cfg["lr"])
    elif cfg["optimizer"] == "sgd":
        opt = ad.SGD(net.parameters(), lr=cfg["lr"])
    else:
        raise BadConfig(f"optimizer must be adam or sgd, got {cfg['optimizer']!r}")
    records = tr.train_steps(net, batcher, steps, opt,
                             record_every=cfg["record_every"])
    net.refresh_stats(ds.x_train)
    tr.write_rows(os.path.join(out, "train_log.csv"), ["step", "loss"], records)

    metrics = []
    for split, x, y in [("train", ds.x_train, ds.y_train),
                        ("val", ds.x_val, ds.y_val),
                        ("test", ds.x_test, ds.y_test)]:
        loss, acc = tr.evaluate(net, x, y)
        metrics.append({"split": split, "loss": loss, "acc": acc})
        print(f"{split} loss {loss:.4f}  acc {acc:.4f}")
    tr.write_rows(os.path.join(out, "metrics.csv"), ["split", "loss", "acc"],
                  metrics)
    ck.save_network(os.path.join(out, "model.ckpt"), net,
                    extra={"steps": steps, "dataset": ds.name})
    print(f"wrote {out}/train_log.csv, metrics.csv, model.ckpt")
    return 0


def cmd_evo(args) -> int:
    cfg = resolve_config("evo", args)
    ds = _dataset(cfg)
    out = _out_dir(args, "evo")
    write_config(os.path.join(out, "config.txt"), cfg, args.workers)

    ecfg = ne.EvoConfig(generations=cfg["generations"],
                        n_parents=cfg["n_parents"],
                        epochs_per_gen=cfg["epochs_per_gen"], lr=cfg["lr"],
                        batch_size=cfg["batch_size"], width=cfg["width"],
                        n_layers=cfg["n_layers"], seed=cfg["seed"],
                        selection=cfg["selection"])
    result = ne.evolve(ds, ecfg)
    tr.write_rows(os.path.join(out, "evo_history.csv"), ne.EVO_FIELDS,
                  result.rows)
    best = max(result.population, key=lambda ind: ind.val_acc)
    ck.save_network(os.path.join(out, "best.ckpt"), best.net,
                    extra={"lineage": best.lineage, "val_acc": best.val_acc,
                           "steps_trained": best.steps_trained})
    print(f"best genotype {best.genotype_str()}  val acc {best.val_acc:.4f}  "
          f"params {best.params}")
    print(f"wrote {out}/evo_history.csv, best.ckpt")
    return 0


def cmd_diff(args) -> int:
    cfg = resolve_config("diff", args)
    ds = _dataset(cfg)
    out = _out_dir(args, "diff")
    write_config(os.path.join(out, "config.txt"), cfg, args.workers)

    dcfg = nd.DiffConfig(iterations=cfg["iterations"], lr_z=cfg["lr_z"],
                         lr_w=cfg["lr_w"], batch_size=cfg["batch_size"],
                         width=cfg["width"], n_layers=cfg["n_layers"],
                         seed=cfg["seed"], ablation=cfg["ablation"],
                         record_every=cfg["record_every"])
    result = nd.diff_search(ds, dcfg)
    tr.write_rows(os.path.join(out, "diff_trajectory.csv"), result.fieldnames,
                  result.rows)
    ck.save_network(os.path.join(out, "searched.ckpt"), result.net)

    names = nd.discretize(result.net)
    with open(os.path.join(out, "genotype.txt"), "w") as f:
        f.write("-".join(names) + "\n")
    print(f"discretized genotype {'-'.join(names)}")

    if cfg["retrain_epochs"] > 0:
        steps = tr.steps_for_fraction(len(ds.x_train), cfg["batch_size"],
                                      cfg["retrain_epochs"])
        net, records = nd.retrain(ds, dcfg, result.net, steps)
        tr.write_rows(os.path.join(out, "retrain_log.csv"), ["step", "loss"],
                      records)
        loss, acc = tr.evaluate(net, ds.x_test, ds.y_test)
        print(f"retrained test loss {loss:.4f}  acc {acc:.4f}")
        ck.save_network(os.path.join(out, "retrained.ckpt"), net)
    print(f"wrote {out}/diff_trajectory.csv, searched.ckpt, genotype.txt")
    return 0


def cmd_collapse(args) -> int:
    cfg = resolve_config("collapse", args)
    if not args.checkpoint:
        raise BadConfig("collapse needs --checkpoint")
    out = _out_dir(args, "collapse")
    net, _ = ck.load_network(args.checkpoint)
    flat = net.collapse()

    rng = np.random.default_rng(cfg["seed"])
    x = rng.standard_normal((cfg["probe_batch"], net.image_channels,
                             cfg["probe_size"], cfg["probe_size"]))
    dev = float(np.max(np.abs(flat.forward(x)
                              - net.forward(x, training=False).data)))
    print(f"collapse probe: max |logit dev| {dev:.3e} over "
          f"{cfg['probe_batch']} inputs")

    arrays = {}
    for l, w in enumerate(flat.filters):
        arrays[f"conv{l}_w"] = w
    for l, (gamma, beta, mean, var) in enumerate(flat.bn_params):
        arrays[f"bn{l}_gamma"] = gamma
        arrays[f"bn{l}_beta"] = beta
        arrays[f"bn{l}_mean"] = mean
        arrays[f"bn{l}_var"] = var
    arrays["dense1_w"], arrays["dense1_b"] = flat.dense1
    g, b, m, v = flat.bn_dense
    arrays.update(bn_dense_gamma=g, bn_dense_beta=b, bn_dense_mean=m,
                  bn_dense_var=v)
    arrays["dense2_w"], arrays["dense2_b"] = flat.dense2
    path = os.path.join(out, "collapsed.ckpt")
    ck.save_arrays(path, arrays,
                   extra={"genotype": net.genotype_names(),
                          "pool_block": flat.pool_block,
                          "probe_dev": dev,
                          "source": os.path.basename(args.checkpoint)})
    print(f"wrote {path} ({len(arrays)} arrays, "
          f"{flat.param_count()} parameters)")
    return 0


def cmd_report(args) -> int:
    cfg = resolve_config("report", args)
    run_dir = args.out or "."
    written = reports.render_run_dir(run_dir, cfg["figs"] or None)
    if not written:
        print(f"no known CSV files in {run_dir}")
        return 1
    for p in written:
        print(f"wrote {p}")
    return 0


COMMANDS = {
    "verify": cmd_verify,
    "train": cmd_train,
    "evo": cmd_evo,
    "diff": cmd_diff,
    "collapse": cmd_collapse,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="equisearch",
        description="train, search, and inspect networks with per-layer "
                    "equivariance constraints")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "verify": "run structural property suites",
        "train": "train a fixed-genotype network",
        "evo": "evolutionary search over relaxation moves",
        "diff": "gradient search over mixture weights",
        "collapse": "bake a checkpoint to plain convolutions",
        "report": "render figures for a run directory",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="file of key=value lines")
        p.add_argument("--out", help="output directory (default runs/<command>)")
        p.add_argument("--seed", type=int, help="override the seed key")
        p.add_argument("--workers", type=int, default=1,
                       help="worker count, recorded with the run "
                            "(execution is single-process)")
        if name in ("train", "collapse"):
            p.add_argument("--checkpoint", help="saved network to load")
        if name == "train":
            p.add_argument("--eval-only", action="store_true",
                           help="evaluate --checkpoint on the test split")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="settings overriding defaults and --config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (BadConfig, ck.BadCheckpoint, ck.WrongMode, dt.InsufficientData,
            md.InvalidSpec, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
