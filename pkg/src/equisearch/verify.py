"""Named property suites behind the `verify` subcommand.

Each suite re-derives a structural guarantee from scratch at small
scale: group axioms, expansion against the direct convolution sum,
morphism preservation, mixture equivalence, logit invariance, Pareto
selection against brute force, and gradients against finite
differences.  They are meant to be cheap enough to run on every change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import gconv
from . import groups as gr
from . import model as md
from . import nas_evo as ne


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str


SUITES: dict = {}


def _suite(name):
    def deco(fn):
        SUITES[name] = fn
        return fn
    return deco


@_suite("groups")
def _groups(seed: int):
    checks = []
    ok = True
    for g in gr.ALL_GROUPS:
        for a in g.elements:
            for b in g.elements:
                if gr.product(a, b) not in g:
                    ok = False
            if gr.product(a, gr.inverse(a)) != gr.IDENTITY:
                ok = False
    checks.append(("closure and inverses", ok, "all six groups"))

    ok = True
    for small in gr.ALL_GROUPS:
        for big in gr.ALL_GROUPS:
            if not gr.is_subgroup(small, big):
                continue
            reps = gr.coset_representatives(small, big)
            if reps[0] != gr.IDENTITY:
                ok = False
            seen = set()
            for x in big.elements:
                h, s = gr.coset_decompose(x, small, reps)
                if gr.product(h, s) != x:
                    ok = False
                seen.add((h, s))
            if len(seen) != big.order:
                ok = False
    checks.append(("transversals identity-first and bijective", ok, "all pairs"))

    ok = True
    for a in gr.D4.elements:
        for b in gr.D4.elements:
            pa = gr.act_on_grid(a, 3)
            pb = gr.act_on_grid(b, 3)
            if not np.array_equal(pb[pa], gr.act_on_grid(gr.product(a, b), 3)):
                ok = False
    checks.append(("grid action composes", ok, "D4 on 3x3"))
    return checks


@_suite("expansion")
def _expansion(seed: int):
    rng = np.random.default_rng(seed)
    checks = []
    worst = 0.0
    for g in gr.ALL_GROUPS:
        layer = gconv.GConvLayer(g, 1, 2, 3, rng=rng)
        x = rng.normal(size=(2, g.order, 7, 7))
        got = layer.forward(ad.tensor(x)).data
        want = gconv.gconv_reference(layer.params.data, g, x)
        worst = max(worst, float(np.max(np.abs(got - want))))
    checks.append(("matches direct sum", worst < 1e-10, f"max dev {worst:.2e}"))

    layer = gconv.GConvLayer(gr.D4, 1, 2, 3, lifting=True, rng=rng)
    x = rng.normal(size=(2, 1, 7, 7))
    dev = float(np.max(np.abs(
        layer.forward(ad.tensor(x)).data
        - gconv.gconv_reference(layer.params.data, gr.D4, x, lifting=True))))
    checks.append(("lifting matches direct sum", dev < 1e-10, f"max dev {dev:.2e}"))
    return checks


@_suite("morphism")
def _morphism(seed: int):
    rng = np.random.default_rng(seed)
    checks = []
    worst = 0.0
    for g, h in [(gr.D4, gr.C4), (gr.D4, gr.D2), (gr.C4, gr.C2),
                 (gr.D2, gr.D1), (gr.D4, gr.C1)]:
        layer = gconv.GConvLayer(g, 1, 2, 3, rng=rng)
        x = rng.normal(size=(2, g.order, 7, 7))
        old = layer.forward(ad.tensor(x)).data
        new_layer = gconv.relax(layer, h)
        new = new_layer.forward(ad.tensor(x)).data
        rho = gconv.output_channel_perm(2, g, h)
        worst = max(worst, float(np.max(np.abs(new[:, rho] - old))))
    checks.append(("function preserved", worst < 1e-9, f"max dev {worst:.2e}"))

    layer = gconv.GConvLayer(gr.D4, 1, 2, 3, rng=rng)
    stepped = gconv.relax(gconv.relax(layer, gr.C4), gr.C2)
    direct = gconv.relax(layer, gr.C2)
    same = np.array_equal(stepped.params.data, direct.params.data)
    checks.append(("canonical chain is bit-stable", same,
                   "D4->C4->C2 vs D4->C2"))
    return checks


@_suite("mixed")
def _mixed(seed: int):
    rng = np.random.default_rng(seed)
    layer = gconv.MixedLayer(gr.ALL_GROUPS, 8, 8, 3, rng=rng)
    layer.logits.data = rng.normal(size=6)
    x = rng.normal(size=(2, 8, 7, 7))
    a = layer.forward(ad.tensor(x)).data
    b = layer.branch_sum_forward(ad.tensor(x)).data
    dev = float(np.max(np.abs(a - b)))
    checks = [("summed kernel equals branch sum", dev < 1e-10,
               f"max dev {dev:.2e}")]

    net = md.Network(["D4", "D4"], width=8, n_classes=4, seed=seed, mode="mixed")
    x = rng.normal(size=(2, 1, 16, 16))
    dev = float(np.max(np.abs(net.collapse().forward(x)
                              - net.forward(x, training=False).data)))
    checks.append(("network collapse", dev < 1e-9, f"max dev {dev:.2e}"))
    return checks


@_suite("invariance")
def _invariance(seed: int):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for g in gr.ALL_GROUPS:
        net = md.Network([g.name] * 2, width=8, n_classes=4, seed=seed)
        x = rng.normal(size=(2, 1, 16, 16))
        base = net.forward(x, training=False).data
        for a in g.elements:
            moved = net.forward(gr.apply_grid_action(a, x), training=False).data
            worst = max(worst, float(np.max(np.abs(moved - base))))
    return [("eval logits invariant", worst < 1e-6, f"max dev {worst:.2e}")]


@_suite("pareto")
def _pareto(seed: int):
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(30):
        n = int(rng.integers(1, 24))
        accs = rng.choice([0.2, 0.4, 0.6, 0.8], size=n).tolist()
        params = rng.choice([5, 10, 20], size=n).tolist()
        got = ne.pareto_front(accs, params)
        brute = [i for i in range(n)
                 if not any((accs[j] >= accs[i] and params[j] <= params[i]
                             and (accs[j] > accs[i] or params[j] < params[i]))
                            for j in range(n))]
        if got != sorted(brute):
            ok = False
    return [("front matches brute force", ok, "30 random populations")]


@_suite("gradients")
def _gradients(seed: int):
    rng = np.random.default_rng(seed)
    layer = gconv.GConvLayer(gr.C4, 1, 1, 3, rng=rng)
    x = rng.normal(size=(1, 4, 5, 5))

    def f():
        return ad.sum_squares(layer.forward(ad.tensor(x)))

    e1 = ad.grad_check(f, [layer.params], rng=rng, max_entries=20)

    mixed = gconv.MixedLayer([gr.C1, gr.C4], 4, 4, 3, rng=rng)
    xm = rng.normal(size=(1, 4, 5, 5))

    def fm():
        return ad.sum_squares(mixed.forward(ad.tensor(xm)))

    e2 = ad.grad_check(fm, [*mixed.directions, mixed.logits], rng=rng,
                       max_entries=20)
    return [("group conv backward", e1 < 1e-3, f"rel err {e1:.2e}"),
            ("mixed layer backward", e2 < 1e-3, f"rel err {e2:.2e}")]


def run(names=None, seed: int = 0) -> list[CheckResult]:
    if names is None:
        names = list(SUITES)
    out = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"no suite named {name!r}; have {sorted(SUITES)}")
        for check_name, ok, detail in SUITES[name](seed):
            out.append(CheckResult(name, check_name, bool(ok), detail))
    return out
