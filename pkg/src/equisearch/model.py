"""The searchable backbone.

A network is a lifting convolution, a stack of group convolutions with
batchnorm/ReLU, 2x2 average pools after every second layer (the last of
those is a global spatial pool), a group-channel average with the block
size frozen at construction, then dense(64)+BN+ReLU and a classifier.

Channel widths are expanded widths (flat channels after expansion), so
layers over smaller groups get proportionally more independent base
channels and proportionally more parameters at the same activation
cost.  The width doubles halfway up the stack.

`mode="static"` builds one group per layer (the genotype, non-increasing
up the stack); `mode="mixed"` builds every layer as a softmax mixture
over all six groups.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import gconv
from . import groups as gr
from .autodiff import Parameter, Tensor
from .gconv import GConvLayer, MixedLayer
from .groups import ALL_GROUPS, PointGroup


class InvalidSpec(ValueError):
    pass


DENSE_WIDTH = 64


def normalize_genotype(genotype) -> list[PointGroup]:
    out = []
    for g in genotype:
        if isinstance(g, PointGroup):
            out.append(g)
        else:
            try:
                out.append(gr.by_name(str(g)))
            except KeyError:
                raise InvalidSpec(f"unknown group {g!r}") from None
    return out


def validate_genotype(groups_list: list[PointGroup]) -> None:
    """Genotypes must be non-increasing up the stack so every layer's
    input carries at least its own symmetry."""
    if len(groups_list) < 2 or len(groups_list) % 2 != 0:
        raise InvalidSpec(f"need an even number (>= 2) of conv layers, "
                          f"got {len(groups_list)}")
    for i in range(len(groups_list) - 1):
        if not gr.is_subgroup(groups_list[i + 1], groups_list[i]):
            raise InvalidSpec(
                f"layer {i + 1} group {groups_list[i + 1].name} is not a "
                f"subgroup of layer {i} group {groups_list[i].name}")


class _BNState:
    def __init__(self, n: int, name: str):
        self.gamma = Parameter(np.ones(n), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(n), name=f"{name}.beta")
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.momentum = 0.1

    def apply(self, x: Tensor, training: bool) -> Tensor:
        return ad.batchnorm(x, self.gamma, self.beta,
                            self.running_mean, self.running_var, training,
                            momentum=self.momentum)

    def permute(self, perm: np.ndarray) -> None:
        self.gamma.data = self.gamma.data[perm]
        self.beta.data = self.beta.data[perm]
        self.running_mean = self.running_mean[perm]
        self.running_var = self.running_var[perm]

    def state_arrays(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class _Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        bound = np.sqrt(6.0 / n_in)
        self.w = Parameter(rng.uniform(-bound, bound, size=(n_out, n_in)),
                           name=f"{name}.w")
        self.b = Parameter(np.zeros(n_out), name=f"{name}.b")

    def apply(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.w, self.b)


class Network:
    def __init__(self, genotype, width: int, n_classes: int, k: int = 3,
                 seed: int = 0, mode: str = "static", image_channels: int = 1,
                 branch_groups=None, pool_block: int | None = None):
        if mode not in ("static", "mixed"):
            raise InvalidSpec(f"unknown mode {mode!r}")
        genotype = normalize_genotype(genotype)
        validate_genotype(genotype)
        n_layers = len(genotype)
        if mode == "mixed":
            branch_groups = list(branch_groups or ALL_GROUPS)
        widths = [width if l < n_layers // 2 else 2 * width
                  for l in range(n_layers)]
        need = max(g.order for g in (branch_groups if mode == "mixed" else genotype))
        for e in widths:
            if e % need:
                raise InvalidSpec(f"width {e} not divisible by group order {need}")

        self.genotype = genotype
        self.width = width
        self.widths = widths
        self.n_classes = n_classes
        self.k = k
        self.seed = seed
        self.mode = mode
        self.image_channels = image_channels
        self.branch_groups = branch_groups

        seeds = np.random.SeedSequence(seed).spawn(n_layers + 2)
        self.layers: list = []
        self.bns: list[_BNState] = []
        for l in range(n_layers):
            rng = np.random.default_rng(seeds[l])
            e_out = widths[l]
            if mode == "static":
                g = genotype[l]
                if l == 0:
                    layer = GConvLayer(g, image_channels, e_out // g.order, k,
                                       lifting=True, rng=rng, name=f"conv{l}")
                else:
                    g_prev = genotype[l - 1]
                    layer = GConvLayer(g, widths[l - 1] // g_prev.order,
                                       e_out // g.order, k, in_group=g_prev,
                                       rng=rng, name=f"conv{l}")
            else:
                layer = MixedLayer(branch_groups,
                                   widths[l - 1] if l else image_channels,
                                   e_out, k, lifting=(l == 0),
                                   c_in_image=image_channels, rng=rng,
                                   name=f"conv{l}")
            self.layers.append(layer)
            self.bns.append(_BNState(e_out, name=f"bn{l}"))

        # the group-pool block size is frozen at construction; a network
        # relaxed after birth keeps its birth block, which an explicit
        # pool_block (e.g. from a checkpoint) reinstates
        if pool_block is None:
            if mode == "static":
                pool_block = genotype[-1].order
            else:
                pool_block = max(g.order for g in branch_groups)
        floor = genotype[-1].order if mode == "static" else 1
        if widths[-1] % pool_block or pool_block % floor:
            raise InvalidSpec(f"pool block {pool_block} incompatible with "
                              f"final width {widths[-1]} and group "
                              f"{genotype[-1].name}")
        self.pool_block = pool_block
        feat = widths[-1] // self.pool_block
        self.dense1 = _Dense(feat, DENSE_WIDTH,
                             np.random.default_rng(seeds[n_layers]), "dense1")
        self.bn_dense = _BNState(DENSE_WIDTH, "bn_dense")
        self.dense2 = _Dense(DENSE_WIDTH, n_classes,
                             np.random.default_rng(seeds[n_layers + 1]), "dense2")

    # ----- running the net -------------------------------------------------

    def forward(self, x, training: bool = False) -> Tensor:
        h = x if isinstance(x, Tensor) else ad.tensor(x)
        n = len(self.layers)
        for l, (layer, bn) in enumerate(zip(self.layers, self.bns)):
            h = layer.forward(h)
            h = bn.apply(h, training)
            h = ad.relu(h)
            if l % 2 == 1 and l < n - 1:
                h = ad.avgpool2d(h, 2)
        h = gconv.group_pool(h, self.pool_block)
        h = ad.global_avgpool(h)
        h = ad.relu(self.bn_dense.apply(self.dense1.apply(h), training))
        return self.dense2.apply(h)

    def loss(self, x, labels, training: bool = True) -> Tensor:
        return ad.softmax_cross_entropy(self.forward(x, training), labels)

    def refresh_stats(self, x, n: int = 256) -> None:
        """Replace batchnorm running statistics with the statistics of one
        forward pass over up to n samples of x.

        The exponential estimates trail the weights by design; after fast
        optimizers or weight-preserving surgery they can sit far from the
        current activation distribution, and eval-mode accuracy pays for
        it.  One momentum-1 pass pins every buffer to the live statistics.
        """
        bns = [*self.bns, self.bn_dense]
        saved = [bn.momentum for bn in bns]
        for bn in bns:
            bn.momentum = 1.0
        try:
            self.forward(x[:n], training=True)
        finally:
            for bn, m in zip(bns, saved):
                bn.momentum = m

    # ----- bookkeeping -----------------------------------------------------

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer, bn in zip(self.layers, self.bns):
            if isinstance(layer, GConvLayer):
                out.append(layer.params)
            else:
                out.extend(layer.parameters())
            out.extend([bn.gamma, bn.beta])
        out.extend([self.dense1.w, self.dense1.b,
                    self.bn_dense.gamma, self.bn_dense.beta,
                    self.dense2.w, self.dense2.b])
        return out

    def conv_param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters() if p.trainable)

    def bn_buffers(self):
        buffers = {}
        for l, bn in enumerate(self.bns):
            buffers[f"bn{l}"] = bn.state_arrays()
        buffers["bn_dense"] = self.bn_dense.state_arrays()
        return buffers

    def genotype_names(self) -> list[str]:
        return [g.name for g in self.genotype]

    # ----- morphism --------------------------------------------------------

    def relax_layer(self, idx: int, target) -> None:
        """Relax conv layer idx to a subgroup, preserving the network
        function; rewires the following layer and this layer's batchnorm."""
        if self.mode != "static":
            raise InvalidSpec("relaxation applies to static networks")
        target = normalize_genotype([target])[0]
        old = self.layers[idx]
        if not gr.is_subgroup(target, old.group):
            raise gr.NotASubgroup(
                f"{target.name} is not a subgroup of {old.group.name}")
        if idx + 1 < len(self.layers):
            below = self.genotype[idx + 1]
            if not gr.is_subgroup(below, target):
                raise InvalidSpec(
                    f"relaxing layer {idx} to {target.name} would break the "
                    f"ordering against layer {idx + 1} ({below.name})")
        if target is old.group:
            return
        rho = gconv.output_channel_perm(old.c_out, old.group, target)
        inv_rho = np.empty_like(rho)
        inv_rho[rho] = np.arange(rho.size)
        self.layers[idx] = gconv.relax(old, target)
        self.bns[idx].permute(inv_rho)
        if idx + 1 < len(self.layers):
            gconv.corelax_input(self.layers[idx + 1], target)
        self.genotype[idx] = target

    def relax_all(self, genotype) -> None:
        """Relax every layer to the given genotype, last layer first."""
        genotype = normalize_genotype(genotype)
        if len(genotype) != len(self.layers):
            raise InvalidSpec("genotype length mismatch")
        for idx in reversed(range(len(self.layers))):
            self.relax_layer(idx, genotype[idx])

    # ----- collapse --------------------------------------------------------

    def collapse(self) -> "CollapsedNetwork":
        return CollapsedNetwork(self)


class CollapsedNetwork:
    """Plain-convolution snapshot of a network: every (mixed or group)
    conv layer baked to its expanded filter.  Inference only."""

    def __init__(self, net: Network):
        self.filters = []
        for layer in net.layers:
            if isinstance(layer, GConvLayer):
                self.filters.append(layer.effective_filter().data.copy())
            else:
                self.filters.append(layer.collapsed_filter())
        self.bn_params = [(bn.gamma.data.copy(), bn.beta.data.copy(),
                           bn.running_mean.copy(), bn.running_var.copy())
                          for bn in net.bns]
        self.pool_block = net.pool_block
        self.dense1 = (net.dense1.w.data.copy(), net.dense1.b.data.copy())
        self.bn_dense = (net.bn_dense.gamma.data.copy(), net.bn_dense.beta.data.copy(),
                         net.bn_dense.running_mean.copy(), net.bn_dense.running_var.copy())
        self.dense2 = (net.dense2.w.data.copy(), net.dense2.b.data.copy())

    def forward(self, x) -> np.ndarray:
        h = ad.tensor(np.asarray(x, dtype=np.float64))
        n = len(self.filters)
        for l, w in enumerate(self.filters):
            h = ad.conv2d(h, ad.tensor(w))
            gamma, beta, mean, var = self.bn_params[l]
            h = ad.batchnorm(h, ad.tensor(gamma), ad.tensor(beta), mean, var,
                             training=False)
            h = ad.relu(h)
            if l % 2 == 1 and l < n - 1:
                h = ad.avgpool2d(h, 2)
        h = gconv.group_pool(h, self.pool_block)
        h = ad.global_avgpool(h)
        h = ad.dense(h, ad.tensor(self.dense1[0]), ad.tensor(self.dense1[1]))
        gamma, beta, mean, var = self.bn_dense
        h = ad.batchnorm(h, ad.tensor(gamma), ad.tensor(beta), mean, var,
                         training=False)
        h = ad.relu(h)
        h = ad.dense(h, ad.tensor(self.dense2[0]), ad.tensor(self.dense2[1]))
        return h.data

    def param_count(self) -> int:
        n = sum(w.size for w in self.filters)
        n += sum(g.size + b.size for g, b, _, _ in self.bn_params)
        n += self.dense1[0].size + self.dense1[1].size
        n += self.bn_dense[0].size + self.bn_dense[1].size
        n += self.dense2[0].size + self.dense2[1].size
        return n
