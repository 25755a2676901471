"""Evolutionary search over layer-wise symmetry genotypes.

A genotype assigns one group per conv layer, non-increasing up the
stack.  The founder is fully D4-equivariant; mutation relaxes one layer
to a maximal proper subgroup through the weight-preserving morphism, so
children are born computing exactly their parent's function.  Each
generation every individual trains for a fractional epoch, then
survivors are picked Pareto-first on (validation accuracy up, parameter
count down).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import groups as gr
from . import model as md
from . import train as tr


EVO_FIELDS = ["gen", "lineage", "parent", "genotype", "params",
              "steps_trained", "val_loss", "val_acc", "selected"]


@dataclass
class Individual:
    net: md.Network | None
    lineage: int
    parent: int | None
    params: int = 0
    steps_trained: int = 0
    val_loss: float = float("nan")
    val_acc: float = float("nan")
    batcher: tr.Batcher | None = field(default=None, repr=False)

    def genotype_str(self) -> str:
        return "-".join(self.net.genotype_names())


def mutate_children(genotype) -> list[tuple[int, gr.PointGroup]]:
    """All valid single-layer relaxations: (layer, subgroup) pairs where
    the subgroup is maximal proper in that layer's group and the layer
    below (if any) stays contained in it."""
    genotype = md.normalize_genotype(genotype)
    out = []
    for l, g in enumerate(genotype):
        for h in gr.maximal_proper_subgroups(g):
            if l + 1 < len(genotype) and not gr.is_subgroup(genotype[l + 1], h):
                continue
            out.append((l, h))
    return out


def spawn_child(parent: Individual, layer: int, target: gr.PointGroup,
                lineage: int) -> Individual:
    net = copy.deepcopy(parent.net)
    net.relax_layer(layer, target)
    return Individual(net=net, lineage=lineage, parent=parent.lineage,
                      params=net.param_count(),
                      steps_trained=parent.steps_trained)


def pareto_front(accs, params) -> list[int]:
    """Indices of the non-dominated points, maximizing acc and
    minimizing params.  Duplicates of a front point stay on the front."""
    accs = np.asarray(accs, dtype=np.float64)
    params = np.asarray(params, dtype=np.int64)
    n = len(accs)
    order = sorted(range(n), key=lambda i: (-accs[i], params[i]))
    front = []
    best_above = None  # min params among strictly higher accs
    i = 0
    while i < n:
        j = i
        group = []
        while j < n and accs[order[j]] == accs[order[i]]:
            group.append(order[j])
            j += 1
        pmin = min(params[g] for g in group)
        if best_above is None or pmin < best_above:
            front.extend(g for g in group if params[g] == pmin)
            best_above = pmin if best_above is None else min(best_above, pmin)
        i = j
    return sorted(front)


def select(population: list[Individual], k: int, mode: str = "pareto",
           rng=None) -> list[Individual]:
    """Survivor selection: the Pareto front, then accuracy-descending
    fill; ties break on fewer params, then earlier lineage."""
    if mode == "random":
        if rng is None:
            rng = np.random.default_rng(0)
        idx = rng.choice(len(population), size=min(k, len(population)),
                         replace=False)
        return [population[i] for i in sorted(idx)]
    if mode != "pareto":
        raise ValueError(f"unknown selection mode {mode!r}")
    key = lambda ind: (-ind.val_acc, ind.params, ind.lineage)
    front_idx = set(pareto_front([i.val_acc for i in population],
                                 [i.params for i in population]))
    front = sorted((population[i] for i in front_idx), key=key)
    if len(front) >= k:
        return front[:k]
    rest = sorted((ind for i, ind in enumerate(population)
                   if i not in front_idx), key=key)
    return front + rest[:k - len(front)]


def prior_network(genotype, width: int, n_classes: int, k: int = 3,
                  seed: int = 0) -> md.Network:
    """Fixed-symmetry baseline: a fully D4 net relaxed to the genotype at
    birth, so its init distribution matches what search individuals
    inherit along the morphism path."""
    genotype = md.normalize_genotype(genotype)
    net = md.Network(["D4"] * len(genotype), width=width, n_classes=n_classes,
                     k=k, seed=seed)
    net.relax_all(genotype)
    return net


@dataclass
class EvoConfig:
    generations: int = 10
    n_parents: int = 5
    epochs_per_gen: float = 0.5
    lr: float = 0.01
    batch_size: int = 64
    width: int = 16
    n_layers: int = 4
    seed: int = 0
    selection: str = "pareto"


@dataclass
class EvoResult:
    rows: list
    population: list


def _lineage_rng(seed: int, lineage: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(lineage,)))


def evolve(dataset, cfg: EvoConfig) -> EvoResult:
    steps = tr.steps_for_fraction(len(dataset.x_train), cfg.batch_size,
                                  cfg.epochs_per_gen)
    founder = md.Network(["D4"] * cfg.n_layers, width=cfg.width,
                         n_classes=dataset.n_classes, seed=cfg.seed)
    population = [Individual(net=founder, lineage=0, parent=None,
                             params=founder.param_count())]
    next_lineage = 1
    select_rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(0, 1)))
    rows = []
    for gen in range(cfg.generations):
        if gen > 0:
            children = []
            for parent in population:
                for layer, target in mutate_children(parent.net.genotype):
                    children.append(spawn_child(parent, layer, target, next_lineage))
                    next_lineage += 1
            population = population + children
        for ind in population:
            if ind.batcher is None:
                ind.batcher = tr.Batcher(dataset.x_train, dataset.y_train,
                                         cfg.batch_size,
                                         _lineage_rng(cfg.seed, ind.lineage))
            # fresh per-generation Adam: group-tied kernels see |G|-fold
            # gradient accumulation, so a shared plain-SGD rate cannot be
            # fair across genotypes; Adam normalizes the scale away
            opt = ad.Adam(ind.net.parameters(), lr=cfg.lr)
            tr.train_steps(ind.net, ind.batcher, steps, opt)
            ind.steps_trained += steps
            # exponential batchnorm estimates trail the weights; score on
            # pinned statistics so selection is not an artifact of lag
            ind.net.refresh_stats(dataset.x_train)
            ind.val_loss, ind.val_acc = tr.evaluate(ind.net, dataset.x_val,
                                                    dataset.y_val)
        population_rows = []
        for ind in population:
            population_rows.append({
                "gen": gen, "lineage": ind.lineage,
                "parent": -1 if ind.parent is None else ind.parent,
                "genotype": ind.genotype_str(), "params": ind.params,
                "steps_trained": ind.steps_trained,
                "val_loss": ind.val_loss, "val_acc": ind.val_acc,
                "selected": 0,
            })
        population = select(population, cfg.n_parents, cfg.selection, select_rng)
        kept = {ind.lineage for ind in population}
        for row in population_rows:
            row["selected"] = int(row["lineage"] in kept)
        rows.extend(population_rows)
    return EvoResult(rows=rows, population=population)
