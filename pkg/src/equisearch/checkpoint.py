"""Deterministic binary checkpoints.

Layout: an 8-byte magic, a little-endian uint64 manifest length, a
compact sorted-key JSON manifest, then each array's raw float64 bytes in
manifest order.  No timestamps or compression anywhere, so saving the
same network twice yields byte-identical files (archive formats with
embedded mtimes do not).

The manifest carries everything needed to rebuild the network shell
(mode, genotype, widths, seed) plus per-array names, shapes, and
trainable flags; batchnorm running buffers ride along with the
parameters.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import model as md

MAGIC = b"EQSCKPT1"


class BadCheckpoint(ValueError):
    pass


class WrongMode(ValueError):
    pass


def _named_arrays(net: md.Network):
    """(name, array, trainable, owner, attr) in a fixed storage order;
    the owner/attr pair lets the loader write buffers back in place."""
    out = []
    for p in net.parameters():
        out.append((p.name, p.data, p.trainable, p, "data"))
    for l, bn in enumerate(net.bns):
        out.append((f"bn{l}.running_mean", bn.running_mean, False, bn, "running_mean"))
        out.append((f"bn{l}.running_var", bn.running_var, False, bn, "running_var"))
    bn = net.bn_dense
    out.append(("bn_dense.running_mean", bn.running_mean, False, bn, "running_mean"))
    out.append(("bn_dense.running_var", bn.running_var, False, bn, "running_var"))
    return out


def save_network(path: str, net: md.Network, extra: dict | None = None) -> None:
    arrays = _named_arrays(net)
    manifest = {
        "mode": net.mode,
        "genotype": net.genotype_names(),
        "width": net.width,
        "n_classes": net.n_classes,
        "k": net.k,
        "seed": net.seed,
        "image_channels": net.image_channels,
        "pool_block": net.pool_block,
        "branch_groups": ([g.name for g in net.branch_groups]
                          if net.branch_groups else None),
        "arrays": [{"name": name, "shape": list(arr.shape),
                    "trainable": bool(tr)} for name, arr, tr, _, _ in arrays],
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr, _, _, _ in arrays:
            f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def _read_header(f, path: str) -> dict:
    head = f.read(len(MAGIC))
    if head != MAGIC:
        raise BadCheckpoint(f"{path}: bad magic {head!r}")
    raw_n = f.read(8)
    if len(raw_n) != 8:
        raise BadCheckpoint(f"{path}: header cut short")
    (n,) = struct.unpack("<Q", raw_n)
    blob = f.read(n)
    if len(blob) != n:
        raise BadCheckpoint(f"{path}: manifest cut short")
    try:
        return json.loads(blob)
    except json.JSONDecodeError as e:
        raise BadCheckpoint(f"{path}: manifest is not JSON ({e})") from None


def read_manifest(path: str) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def save_arrays(path: str, arrays: dict, extra: dict | None = None) -> None:
    """Same container, but a flat name->array bag (e.g. collapsed
    filters) instead of a rebuildable network."""
    items = sorted(arrays.items())
    manifest = {
        "mode": "arrays",
        "arrays": [{"name": k, "shape": list(np.asarray(v).shape),
                    "trainable": False} for k, v in items],
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, v in items:
            f.write(np.ascontiguousarray(v, dtype=np.float64).tobytes())


def load_arrays(path: str):
    with open(path, "rb") as f:
        manifest = _read_header(f, path)
        if manifest.get("mode") != "arrays":
            raise WrongMode(f"{path} holds a {manifest.get('mode')!r} "
                            f"checkpoint, expected raw arrays")
        out = {}
        for spec in manifest["arrays"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise BadCheckpoint(f"{path}: payload cut short at {spec['name']}")
            out[spec["name"]] = np.frombuffer(raw, dtype=np.float64).reshape(
                spec["shape"]).copy()
    return out, manifest.get("extra", {})


def load_network(path: str, expect_mode: str | None = None):
    """Rebuild the saved network; returns (net, extra).

    Raises WrongMode when expect_mode is given and the file holds a
    different kind of network.
    """
    with open(path, "rb") as f:
        manifest = _read_header(f, path)
        mode = manifest.get("mode")
        if mode == "arrays":
            raise WrongMode(f"{path} holds raw arrays, not a network")
        if expect_mode is not None and mode != expect_mode:
            raise WrongMode(f"{path} holds a {mode!r} checkpoint, "
                            f"expected {expect_mode!r}")
        net = md.Network(manifest["genotype"], width=manifest["width"],
                         n_classes=manifest["n_classes"], k=manifest["k"],
                         seed=manifest["seed"], mode=mode,
                         image_channels=manifest["image_channels"],
                         pool_block=manifest.get("pool_block"),
                         branch_groups=(manifest["branch_groups"] and
                                        [md.gr.by_name(n) for n in manifest["branch_groups"]]))
        slots = _named_arrays(net)
        specs = manifest["arrays"]
        if len(slots) != len(specs):
            raise BadCheckpoint(f"{path}: {len(specs)} arrays in manifest, "
                                f"network wants {len(slots)}")
        for (name, arr, _, owner, attr), spec in zip(slots, specs):
            if name != spec["name"] or list(arr.shape) != spec["shape"]:
                raise BadCheckpoint(
                    f"{path}: array {spec['name']}{spec['shape']} does not "
                    f"match slot {name}{list(arr.shape)}")
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise BadCheckpoint(f"{path}: payload cut short at {name}")
            value = np.frombuffer(raw, dtype=np.float64).reshape(spec["shape"])
            if attr == "data":
                owner.data = value.copy()
                owner.trainable = spec["trainable"]
            else:
                setattr(owner, attr, value.copy())
    return net, manifest.get("extra", {})
