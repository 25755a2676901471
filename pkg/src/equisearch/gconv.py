"""Group-equivariant convolution layers and the relaxation morphism.

A kernel over point group G is stored (c_out, c_in, S_G, k, k) and
expanded on the fly to a standard convolution filter
(c_out*S_G, c_in*S_G, k, k) with the compound channel layout
``flat = base * S_G + element_index``:

    expanded[(d,t), (c,s), u] = params[d, c, idx(t^-1 s), t^-1 u]

Lifting kernels lack the input group dimension.  When a layer's group is
a proper subgroup of the incoming feature map's group (``in_group``),
the incoming flat channels are re-read through the canonical coset
transversal; that bookkeeping is a pure column permutation of the
expanded filter.

`relax` rewrites a layer's kernel over a subgroup so that the expanded
filter computes the same function with more independent channels (the
equivariance relaxation morphism).  The flat output channels come out
permuted block-wise, so the caller must co-rewrite whatever consumes
them; `corelax_input` does that for a downstream layer and the model
module handles batchnorm buffers and the pooled head.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from . import groups as gr
from .groups import PointGroup, coset_representatives, inverse, product


class GroupMismatch(ValueError):
    pass


def _spatial_perms(group: PointGroup, k: int) -> np.ndarray:
    return np.stack([gr.act_on_grid(t, k) for t in group.elements])


def _group_table(group: PointGroup) -> np.ndarray:
    # gidx[t, s] = idx(t^-1 s)
    s_g = group.order
    tab = np.empty((s_g, s_g), dtype=np.int64)
    for ti, t in enumerate(group.elements):
        tinv = inverse(t)
        for si, s in enumerate(group.elements):
            tab[ti, si] = group.index(product(tinv, s))
    return tab


def expand_kernel(params: Tensor, group: PointGroup, lifting: bool = False) -> Tensor:
    """Expand a group kernel to its standard-convolution filter (autodiff op)."""
    s_g = group.order
    if lifting:
        co, ci, k, _ = params.shape
    else:
        co, ci, s_g2, k, _ = params.shape
        if s_g2 != s_g:
            raise GroupMismatch(f"kernel S dim {s_g2} != |{group.name}| = {s_g}")
    k2 = k * k
    sperm = _spatial_perms(group, k)
    inv_sperm = np.empty_like(sperm)
    for t in range(s_g):
        inv_sperm[t, sperm[t]] = np.arange(k2)

    if lifting:
        p3 = params.data.reshape(co, ci, k2)
        exp = p3[:, :, sperm]                      # (co, ci, S, k2)
        out = np.ascontiguousarray(exp.transpose(0, 2, 1, 3)).reshape(co * s_g, ci, k, k)

        def backward(g):
            g4 = g.reshape(co, s_g, ci, k2).transpose(0, 2, 1, 3)
            gp = np.zeros((co, ci, k2))
            for t in range(s_g):
                gp[:, :, sperm[t]] += g4[:, :, t]
            ad._accum(params, gp.reshape(params.shape))

        return ad._make(out, (params,), backward)

    gidx = _group_table(group)
    p4 = params.data.reshape(co, ci, s_g, k2)
    exp = p4[:, :, gidx, :]                        # (co, ci, t, s, k2)
    exp = np.take_along_axis(exp, sperm[None, None, :, None, :], axis=4)
    out = np.ascontiguousarray(exp.transpose(0, 2, 1, 3, 4)).reshape(
        co * s_g, ci * s_g, k, k)

    def backward(g):
        g5 = g.reshape(co, s_g, ci, s_g, k2).transpose(0, 2, 1, 3, 4)
        g5 = np.take_along_axis(g5, inv_sperm[None, None, :, None, :], axis=4)
        gp = np.zeros((co, ci, s_g, k2))
        for t in range(s_g):
            gp[:, :, gidx[t], :] += g5[:, :, t]
        ad._accum(params, gp.reshape(params.shape))

    return ad._make(out, (params,), backward)


def gather_columns(w: Tensor, colmap: np.ndarray) -> Tensor:
    """Permute filter input channels (axis 1) by colmap (autodiff op)."""
    colmap = np.asarray(colmap, dtype=np.int64)
    inv = np.empty_like(colmap)
    inv[colmap] = np.arange(colmap.size)

    def backward(g):
        ad._accum(w, g[:, inv])

    return ad._make(w.data[:, colmap], (w,), backward)


def input_column_map(group: PointGroup, in_group: PointGroup, c_in_base: int) -> np.ndarray:
    """Map incoming (base, in_group-element) flat channels to kernel slots.

    The expanded filter's input channels follow ((c, s), h) with s from
    the canonical transversal of group\\in_group; an incoming channel
    (c, a) with a = h*s lands on that compound index.
    """
    reps = coset_representatives(group, in_group)
    n = len(reps)
    s_h = group.order
    per_elt = np.empty(in_group.order, dtype=np.int64)
    for ai, a in enumerate(in_group.elements):
        h, s = gr.coset_decompose(a, group, reps)
        per_elt[ai] = reps.index(s) * s_h + group.index(h)
    cols = np.empty(c_in_base * in_group.order, dtype=np.int64)
    block = n * s_h
    for c in range(c_in_base):
        cols[c * in_group.order:(c + 1) * in_group.order] = c * block + per_elt
    return cols


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GConvLayer:
    """One group-equivariant convolution (no bias; He-uniform init).

    ``in_group`` is the group structure of the incoming feature map and
    must contain ``group``; lifting layers take plain images instead.
    """

    def __init__(self, group: PointGroup, c_in_base: int, c_out: int, k: int,
                 in_group: PointGroup | None = None, lifting: bool = False,
                 rng: np.random.Generator | None = None, name: str = ""):
        if k % 2 == 0:
            raise gr.EvenKernel(f"kernel size must be odd, got {k}")
        if lifting:
            in_group = None
        else:
            in_group = in_group or group
            if not gr.is_subgroup(group, in_group):
                raise gr.NotASubgroup(
                    f"layer group {group.name} not a subgroup of input group {in_group.name}")
        self.group = group
        self.in_group = in_group
        self.lifting = lifting
        self.c_in_base = c_in_base
        self.c_out = c_out
        self.k = k
        self.name = name
        if lifting:
            shape = (c_out, c_in_base, k, k)
            fan_in = c_in_base * k * k
        else:
            n_reps = in_group.order // group.order
            shape = (c_out, c_in_base * n_reps, group.order, k, k)
            fan_in = c_in_base * in_group.order * k * k
        if rng is None:
            rng = np.random.default_rng(0)
        self.params = Parameter(_he_uniform(rng, shape, fan_in), name=name or "gconv")

    @property
    def e_out(self) -> int:
        return self.c_out * self.group.order

    @property
    def e_in(self) -> int:
        return self.c_in_base if self.lifting else self.c_in_base * self.in_group.order

    def effective_filter(self) -> Tensor:
        w = expand_kernel(self.params, self.group, lifting=self.lifting)
        if not self.lifting and self.in_group.order != self.group.order:
            w = gather_columns(w, input_column_map(self.group, self.in_group, self.c_in_base))
        return w

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.e_in:
            raise GroupMismatch(f"{self.name or 'gconv'}: expected {self.e_in} input "
                                f"channels, got {x.shape[1]}")
        return ad.conv2d(x, self.effective_filter())

    def param_count(self) -> int:
        return self.params.data.size


def gconv_reference(params: np.ndarray, group: PointGroup, x: np.ndarray,
                    lifting: bool = False) -> np.ndarray:
    """Direct group-convolution sum; tiny shapes only (oracle).

    Assembles per-element transformed kernels with apply_grid_action and
    group products, independent of the table machinery above.
    """
    if lifting:
        co, ci, k, _ = params.shape
    else:
        co, ci, s_g, k, _ = params.shape
    s_g = group.order
    filt = np.zeros((co * s_g, x.shape[1], k, k))
    for d in range(co):
        for ti, t in enumerate(group.elements):
            tinv = inverse(t)
            for c in range(ci):
                if lifting:
                    filt[d * s_g + ti, c] = gr.apply_grid_action(t, params[d, c])
                else:
                    for si, s in enumerate(group.elements):
                        ker = params[d, c, group.index(product(tinv, s))]
                        filt[d * s_g + ti, c * s_g + si] = gr.apply_grid_action(t, ker)
    return ad.conv2d_reference(x, filt)


def transform_feature_map(x: np.ndarray, a: gr.Element, group: PointGroup) -> np.ndarray:
    """The action of a on a (B, C*S_G, H, W) feature map: rotate pixels,
    permute group channels by the left-regular representation."""
    b, e, h, w = x.shape
    s_g = group.order
    if e % s_g:
        raise GroupMismatch(f"{e} channels not divisible by |{group.name}|")
    perm = gr.regular_perm(a, group)
    spat = gr.apply_grid_action(a, x).reshape(b, e // s_g, s_g, h, w)
    out = np.empty_like(spat)
    out[:, :, perm] = spat
    return out.reshape(b, e, h, w)


def group_pool(x: Tensor, block: int) -> Tensor:
    """Average over group-channel blocks: (B, C*block, H, W) -> (B, C, H, W)."""
    return ad.channel_block_mean(x, block)


# ---------------------------------------------------------------------------
# relaxation morphism

def _rebase_input(params: np.ndarray, h_group: PointGroup, c_in_base: int,
                  from_reps: list, to_reps: list) -> np.ndarray:
    """Re-express a kernel's input slots under a different transversal.

    Both lists must be transversals of the same quotient h\\big.  The
    slot for to_reps[i] copies from the slot whose representative lies
    in the same left coset, with the kernel's group axis twisted by
    delta = to*from^-1 (an element of h).
    """
    n = len(from_reps)
    s_h = h_group.order
    co = params.shape[0]
    k = params.shape[-1]
    src = np.empty(n, dtype=np.int64)
    gperm = np.empty((n, s_h), dtype=np.int64)
    for i_c, s_c in enumerate(to_reps):
        for i_x, s_x in enumerate(from_reps):
            delta = product(s_c, inverse(s_x))
            if delta in h_group:
                src[i_c] = i_x
                for mi, m in enumerate(h_group.elements):
                    gperm[i_c, mi] = h_group.index(product(m, delta))
                break
        else:
            raise GroupMismatch("transversals cover different cosets")
    p6 = params.reshape(co, c_in_base, n, s_h, k, k)
    out = np.empty_like(p6)
    for i_c in range(n):
        out[:, :, i_c] = p6[:, :, src[i_c]][:, :, gperm[i_c]]
    return out.reshape(params.shape)


def relax(layer: GConvLayer, target: PointGroup) -> GConvLayer:
    """Reparameterize a layer over a subgroup of its group, preserving its
    function.  Output channels come out block-permuted (see
    output_channel_perm); the caller co-rewrites downstream consumers.
    """
    g_old = layer.group
    if not gr.is_subgroup(target, g_old):
        raise gr.NotASubgroup(f"{target.name} is not a subgroup of {g_old.name}")
    reps = coset_representatives(target, g_old)
    r = len(reps)
    k = layer.k
    k2 = k * k
    co = layer.c_out

    if layer.lifting:
        ci = layer.c_in_base
        pflat = layer.params.data.reshape(co, ci, k2)
        new = np.empty((co * r, ci, k2))
        for ti, t in enumerate(reps):
            sperm = gr.act_on_grid(t, k)
            new[ti::r] = pflat[:, :, sperm]  # block (d, t) sits at d*r + ti
        out = GConvLayer.__new__(GConvLayer)
        out.group = target
        out.in_group = None
        out.lifting = True
        out.c_in_base = ci
        out.c_out = co * r
        out.k = k
        out.name = layer.name
        out.params = Parameter(new.reshape(co * r, ci, k, k), name=layer.params.name)
        return out

    s_old = g_old.order
    s_new = target.order
    ci_slots = layer.params.shape[1]
    pflat = layer.params.data.reshape(co, ci_slots, s_old, k2)
    tmp = np.empty((co, r, ci_slots, r, s_new, k2))
    for ti, t in enumerate(reps):
        sperm = gr.act_on_grid(t, k)
        tinv = inverse(t)
        for si, sh in enumerate(reps):
            gidx = [g_old.index(product(product(tinv, hp), sh)) for hp in target.elements]
            tmp[:, ti, :, si] = pflat[:, :, gidx, :][:, :, :, sperm]
    new = tmp.reshape(co * r, ci_slots * r, s_new, k, k)

    # rebase the input slots from the stepwise-composed transversal to the
    # canonical one for (target, in_group)
    old_in_reps = coset_representatives(g_old, layer.in_group)
    composed = [product(sh, s_a) for s_a in old_in_reps for sh in reps]
    canonical = coset_representatives(target, layer.in_group)
    new = _rebase_input(new, target, layer.c_in_base, composed, canonical)

    out = GConvLayer.__new__(GConvLayer)
    out.group = target
    out.in_group = layer.in_group
    out.lifting = False
    out.c_in_base = layer.c_in_base
    out.c_out = co * r
    out.k = k
    out.name = layer.name
    out.params = Parameter(new, name=layer.params.name)
    return out


def output_channel_perm(c_out: int, g_old: PointGroup, target: PointGroup) -> np.ndarray:
    """Flat output permutation rho of a relaxation: the old channel
    (d, g) with g = g''*t lands at ((d*r + idx_reps(t)), g'').

    new_fm[rho[j]] == old_fm[j]; batchnorm buffers and any per-channel
    consumer must be re-indexed the same way.
    """
    reps = coset_representatives(target, g_old)
    r = len(reps)
    s_old, s_new = g_old.order, target.order
    rho = np.empty(c_out * s_old, dtype=np.int64)
    for d in range(c_out):
        for gi, g in enumerate(g_old.elements):
            h, t = gr.coset_decompose(g, target, reps)
            rho[d * s_old + gi] = (d * r + reps.index(t)) * s_new + target.index(h)
    return rho


def corelax_input(layer: GConvLayer, new_in_group: PointGroup) -> None:
    """Rewrite a layer in place after its upstream neighbour relaxed from
    layer.in_group down to new_in_group (same flat channel count)."""
    old_in = layer.in_group
    if layer.lifting or old_in is None:
        raise GroupMismatch("lifting layers have no group-structured input")
    if not gr.is_subgroup(new_in_group, old_in):
        raise gr.NotASubgroup(
            f"{new_in_group.name} is not a subgroup of {old_in.name}")
    if not gr.is_subgroup(layer.group, new_in_group):
        raise gr.NotASubgroup(
            f"layer group {layer.group.name} exceeds new input group {new_in_group.name}")
    r_step = coset_representatives(new_in_group, old_in)
    old_reps = coset_representatives(layer.group, old_in)
    new_reps = coset_representatives(layer.group, new_in_group)
    # new slot ((c,t), s_hat) reads the upstream element s_hat*t; rebase from
    # the canonical old transversal onto that composed list
    composed = [product(s_hat, t) for t in r_step for s_hat in new_reps]
    layer.params.data = _rebase_input(
        layer.params.data, layer.group, layer.c_in_base, old_reps, composed)
    layer.in_group = new_in_group
    layer.c_in_base = layer.c_in_base * len(r_step)


# ---------------------------------------------------------------------------
# mixed layers (searchable equivariance)

class MixedLayer:
    """Softmax-weighted mixture of group-conv branches sharing one
    expanded width.  Branch kernels are weight-normalized with frozen
    gains so the mixing weights z are not confounded by kernel scale.
    The forward path sums the expanded filters first and runs a single
    convolution; `branch_sum_forward` keeps the per-branch convolutions
    as the equivalence oracle.
    """

    def __init__(self, branch_groups, e_in: int, e_out: int, k: int,
                 lifting: bool = False, c_in_image: int = 1,
                 rng: np.random.Generator | None = None, name: str = ""):
        if rng is None:
            rng = np.random.default_rng(0)
        self.branch_groups = list(branch_groups)
        self.e_in = c_in_image if lifting else e_in
        self.e_out = e_out
        self.k = k
        self.lifting = lifting
        self.name = name
        self.directions: list[Parameter] = []
        self.gains: list[Parameter] = []
        fan_in = self.e_in * k * k
        for g in self.branch_groups:
            s_g = g.order
            if e_out % s_g or (not lifting and e_in % s_g):
                raise GroupMismatch(
                    f"widths ({e_in}, {e_out}) not divisible by |{g.name}| = {s_g}")
            if lifting:
                shape = (e_out // s_g, c_in_image, k, k)
            else:
                shape = (e_out // s_g, e_in // s_g, s_g, k, k)
            v = Parameter(_he_uniform(rng, shape, fan_in), name=f"{name}.{g.name}.v")
            gain = Parameter(np.array(np.linalg.norm(v.data)), trainable=False,
                             name=f"{name}.{g.name}.gain")
            self.directions.append(v)
            self.gains.append(gain)
        self.logits = Parameter(np.zeros(len(self.branch_groups)), name=f"{name}.z")

    def mixture(self) -> Tensor:
        return ad.softmax_vec(self.logits)

    def _branch_filter(self, i: int) -> Tensor:
        w = ad.weight_norm(self.directions[i], self.gains[i])
        return expand_kernel(w, self.branch_groups[i], lifting=self.lifting)

    def summed_filter(self) -> Tensor:
        z = self.mixture()
        total = None
        for i in range(len(self.branch_groups)):
            term = ad.scale(self._branch_filter(i), _pick(z, i))
            total = term if total is None else ad.add(total, term)
        return total

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.summed_filter())

    def branch_sum_forward(self, x: Tensor) -> Tensor:
        """Weighted sum of per-branch convolutions (reference path)."""
        z = self.mixture()
        total = None
        for i in range(len(self.branch_groups)):
            term = ad.scale(ad.conv2d(x, self._branch_filter(i)), _pick(z, i))
            total = term if total is None else ad.add(total, term)
        return total

    def collapsed_filter(self) -> np.ndarray:
        return self.summed_filter().data.copy()

    def parameters(self) -> list[Parameter]:
        return [*self.directions, *self.gains, self.logits]

    def param_count(self) -> int:
        return sum(v.data.size for v in self.directions) + self.logits.data.size


def _pick(z: Tensor, i: int) -> Tensor:
    """0-d view of z[i] keeping the graph connected."""
    def backward(g):
        gz = np.zeros_like(z.data)
        gz[i] = float(g)
        ad._accum(z, gz)

    return ad._make(z.data[i], (z,), backward)
