"""Differentiable symmetry search on mixed networks.

Every iteration alternates two updates with separate Adam states: first
the mixture logits Z on one minibatch, then the branch weights on a
second minibatch from an independently shuffled stream of the same
training split.  Weight-norm gains stay frozen throughout, so Z moves
only in response to how useful each branch's direction is, not its
scale.

The random-Z ablation keeps everything identical but permutes each
layer's logit gradient before the Z step, destroying the architecture
signal while preserving its magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import groups as gr
from . import model as md
from . import train as tr


@dataclass
class DiffConfig:
    iterations: int = 100
    lr_z: float = 0.01
    lr_w: float = 0.01
    batch_size: int = 64
    width: int = 16
    n_layers: int = 4
    seed: int = 0
    ablation: str = "none"          # "none" | "random_z"
    record_every: int = 10


@dataclass
class DiffResult:
    rows: list
    fieldnames: list
    net: md.Network


def split_params(net: md.Network):
    """(logits, everything else trainable); the weight-norm gains are in
    neither because they are frozen."""
    z = [layer.logits for layer in net.layers]
    zset = set(map(id, z))
    w = [p for p in net.parameters() if p.trainable and id(p) not in zset]
    return z, w


def mixture_fieldnames(net: md.Network):
    names = ["iter", "loss_z", "loss_w"]
    for l, layer in enumerate(net.layers):
        for g in layer.branch_groups:
            names.append(f"z{l}_{g.name}")
    return names


def _mixture_row(net: md.Network, it: int, loss_z: float, loss_w: float):
    row = {"iter": it, "loss_z": loss_z, "loss_w": loss_w}
    for l, layer in enumerate(net.layers):
        z = layer.mixture().data
        for g, zi in zip(layer.branch_groups, z):
            row[f"z{l}_{g.name}"] = float(zi)
    return row


def diff_search(dataset, cfg: DiffConfig) -> DiffResult:
    if cfg.ablation not in ("none", "random_z"):
        raise ValueError(f"unknown ablation {cfg.ablation!r}")
    net = md.Network(["D4"] * cfg.n_layers, width=cfg.width,
                     n_classes=dataset.n_classes, seed=cfg.seed, mode="mixed",
                     image_channels=dataset.image_channels)
    z_params, w_params = split_params(net)
    opt_z = ad.Adam(z_params, lr=cfg.lr_z)
    opt_w = ad.Adam(w_params, lr=cfg.lr_w)
    bz = tr.Batcher(dataset.x_train, dataset.y_train, cfg.batch_size,
                    np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,))))
    bw = tr.Batcher(dataset.x_train, dataset.y_train, cfg.batch_size,
                    np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,))))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))

    rows = []
    for it in range(cfg.iterations):
        xb, yb = bz.next_batch()
        opt_z.zero_grad()
        loss_z = net.loss(xb, yb, training=True)
        vz = float(loss_z.data)
        if not np.isfinite(vz):
            raise tr.DivergedLoss(f"Z loss {vz} at iteration {it}")
        loss_z.backward()
        if cfg.ablation == "random_z":
            for p in z_params:
                if p.grad is not None:
                    p.grad = p.grad[shuffle_rng.permutation(p.grad.size)]
        opt_z.step()

        xb, yb = bw.next_batch()
        opt_w.zero_grad()
        loss_w = net.loss(xb, yb, training=True)
        vw = float(loss_w.data)
        if not np.isfinite(vw):
            raise tr.DivergedLoss(f"weight loss {vw} at iteration {it}")
        loss_w.backward()
        opt_w.step()

        if it % cfg.record_every == 0 or it == cfg.iterations - 1:
            rows.append(_mixture_row(net, it, vz, vw))
    return DiffResult(rows=rows, fieldnames=mixture_fieldnames(net), net=net)


def z_mass(net: md.Network, layer: int, group_names) -> float:
    """Total mixture weight a layer puts on the named branches."""
    lay = net.layers[layer]
    z = lay.mixture().data
    wanted = set(group_names)
    return float(sum(zi for g, zi in zip(lay.branch_groups, z)
                     if g.name in wanted))


def discretize(net: md.Network) -> list[str]:
    """Project per-layer argmax mixtures onto a valid genotype: each
    layer takes its highest-z branch among subgroups of the layer
    above's choice."""
    names = []
    prev = None
    for layer in net.layers:
        z = layer.mixture().data
        best, best_z = None, -1.0
        for g, zi in zip(layer.branch_groups, z):
            if prev is not None and not gr.is_subgroup(g, prev):
                continue
            if zi > best_z:
                best, best_z = g, float(zi)
        names.append(best.name)
        prev = best
    return names


def retrain(dataset, cfg: DiffConfig, searched: md.Network,
            steps: int, lr: float = 0.01, seed: int | None = None):
    """Fresh mixed net with the searched mixture frozen in; only the
    branch weights train.  Returns (net, records)."""
    seed = cfg.seed if seed is None else seed
    net = md.Network(["D4"] * cfg.n_layers, width=cfg.width,
                     n_classes=dataset.n_classes, seed=seed + 1, mode="mixed",
                     image_channels=dataset.image_channels)
    for fresh, old in zip(net.layers, searched.layers):
        fresh.logits.data = old.logits.data.copy()
        fresh.logits.trainable = False
    _, w_params = split_params(net)
    opt = ad.Adam([p for p in w_params if p.trainable], lr=lr)
    batcher = tr.Batcher(dataset.x_train, dataset.y_train, cfg.batch_size,
                         np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,))))
    records = tr.train_steps(net, batcher, steps, opt)
    net.refresh_stats(dataset.x_train)
    return net, records
