"""Discrete planar point groups C1, C2, C4, D1, D2, D4 and their actions.

Conventions (load-bearing; everything downstream indexes off these):

* An element is a pair ``(refl, rot)`` encoding ``r^rot * m^refl`` where
  ``r`` is a 90-degree counterclockwise rotation and ``m`` a horizontal
  (left-right) flip.  The product follows from ``m r = r^-1 m``:

      (i1, j1) * (i2, j2) = ((i1 + i2) mod 2, (j1 + (-1)^i1 * j2) mod 4)

* Canonical element order within a group is ascending ``(refl, rot)``,
  i.e. rotations first: D4 = [e, r, r2, r3, m, rm, r2m, r3m].
* D1 embeds as {e, m} (horizontal axis); D2 as the axis-aligned
  reflections {e, r2, m, r2m}.
* Grid actions use odd square kernels only, centered at (k-1)/2.
"""

from __future__ import annotations

import numpy as np


class NotAMember(ValueError):
    pass


class NotASubgroup(ValueError):
    pass


class EvenKernel(ValueError):
    pass


Element = tuple[int, int]

IDENTITY: Element = (0, 0)

_ELT_NAMES = {
    (0, 0): "e", (0, 1): "r", (0, 2): "r2", (0, 3): "r3",
    (1, 0): "m", (1, 1): "rm", (1, 2): "r2m", (1, 3): "r3m",
}


def product(a: Element, b: Element) -> Element:
    i1, j1 = a
    i2, j2 = b
    return ((i1 + i2) % 2, (j1 + j2) % 4 if i1 == 0 else (j1 - j2) % 4)


def inverse(a: Element) -> Element:
    i, j = a
    return (i, j if i else (-j) % 4)


def elt_name(a: Element) -> str:
    return _ELT_NAMES[a]


class PointGroup:
    """One of the six subgroups of D4, with a fixed canonical element order."""

    def __init__(self, name: str, elements: tuple[Element, ...]):
        self.name = name
        self.elements = elements
        self._index = {g: i for i, g in enumerate(elements)}

    @property
    def order(self) -> int:
        return len(self.elements)

    def index(self, a: Element) -> int:
        try:
            return self._index[a]
        except KeyError:
            raise NotAMember(f"{elt_name(a)} is not in {self.name}") from None

    def __contains__(self, a: Element) -> bool:
        return a in self._index

    def __iter__(self):
        return iter(self.elements)

    def __len__(self) -> int:
        return len(self.elements)

    def __repr__(self) -> str:
        return f"PointGroup({self.name})"


C1 = PointGroup("C1", ((0, 0),))
C2 = PointGroup("C2", ((0, 0), (0, 2)))
C4 = PointGroup("C4", ((0, 0), (0, 1), (0, 2), (0, 3)))
D1 = PointGroup("D1", ((0, 0), (1, 0)))
D2 = PointGroup("D2", ((0, 0), (0, 2), (1, 0), (1, 2)))
D4 = PointGroup("D4", ((0, 0), (0, 1), (0, 2), (0, 3),
                       (1, 0), (1, 1), (1, 2), (1, 3)))

GROUPS: dict[str, PointGroup] = {g.name: g for g in (C1, C2, C4, D1, D2, D4)}
ALL_GROUPS = (C1, C2, C4, D1, D2, D4)


def by_name(name: str) -> PointGroup:
    try:
        return GROUPS[name.upper()]
    except KeyError:
        raise KeyError(f"unknown group {name!r}; expected one of {sorted(GROUPS)}") from None


def is_subgroup(h: PointGroup, g: PointGroup) -> bool:
    return all(a in g for a in h)


# Maximal proper subgroups within the six-group lattice.  The preference
# order here also fixes the canonical relaxation chains: rotation
# subgroups are preferred whenever they contain the target.
_MAXIMAL = {
    "D4": ("C4", "D2"),
    "C4": ("C2",),
    "D2": ("C2", "D1"),
    "C2": ("C1",),
    "D1": ("C1",),
    "C1": (),
}


def maximal_proper_subgroups(g: PointGroup) -> tuple[PointGroup, ...]:
    return tuple(GROUPS[n] for n in _MAXIMAL[g.name])


def canonical_chain(g: PointGroup, h: PointGroup) -> list[PointGroup]:
    """Descending chain g = A_0 > A_1 > ... > A_n = h of maximal steps.

    At each step the first maximal proper subgroup (in preference order)
    containing h is taken.  Coset representatives compose transitively
    exactly along these chains; see coset_representatives.
    """
    if not is_subgroup(h, g):
        raise NotASubgroup(f"{h.name} is not a subgroup of {g.name}")
    chain = [g]
    cur = g
    while cur.name != h.name:
        for cand in maximal_proper_subgroups(cur):
            if is_subgroup(h, cand):
                chain.append(cand)
                cur = cand
                break
        else:  # pragma: no cover - lattice is complete, cannot happen
            raise NotASubgroup(f"no chain from {g.name} down to {h.name}")
    return chain


def _atomic_reps(h: PointGroup, g: PointGroup) -> list[Element]:
    # Lowest-canonical-index representative per left coset h*x, identity first.
    reps: list[Element] = []
    seen: set[Element] = set()
    for x in g.elements:
        if x not in seen:
            reps.append(x)
            seen.update(product(a, x) for a in h.elements)
    return reps


def coset_representatives(h: PointGroup, g: PointGroup) -> list[Element]:
    """Ordered transversal of the left quotient h\\g (cosets h*x).

    Defined by composing lowest-canonical-index transversals down the
    canonical maximal chain from g to h: descending A > M1 > ... > h,
    the first step's representative is the slowest-varying index and the
    composed representative for (t1, ..., tn) is tn * ... * t1.  The
    identity comes first, and relaxing a layer stepwise along the chain
    reproduces the direct relaxation bit for bit.
    """
    chain = canonical_chain(g, h)
    reps: list[Element] = [IDENTITY]
    for big, small in zip(chain, chain[1:]):
        step = _atomic_reps(small, big)
        reps = [product(s, t) for t in reps for s in step]
    return reps


def coset_decompose(x: Element, h: PointGroup, reps: list[Element]) -> tuple[Element, Element]:
    """Write x = k * s with k in h and s in the transversal. Returns (k, s)."""
    for s in reps:
        k = product(x, inverse(s))
        if k in h:
            return k, s
    raise NotAMember(f"{elt_name(x)} not covered by transversal {[elt_name(t) for t in reps]}")


def _coord_apply(a: Element, i: int, j: int, k: int) -> tuple[int, int]:
    # Position map on grid indices (row i, col j).  Flip first, then
    # rotate, matching a = r^rot * m^refl acting as an operator.
    refl, rot = a
    if refl:
        j = k - 1 - j
    for _ in range(rot % 4):
        i, j = k - 1 - j, i
    return i, j


def act_on_grid(a: Element, k: int) -> np.ndarray:
    """Index permutation of a flattened k x k grid under a.

    transformed.flat[p] = original.flat[perm[p]], so applying the
    permutation for r to a 3x3 grid reproduces np.rot90.
    """
    if k % 2 == 0:
        raise EvenKernel(f"kernel size must be odd, got {k}")
    ainv = inverse(a)
    perm = np.empty(k * k, dtype=np.int64)
    for i in range(k):
        for j in range(k):
            si, sj = _coord_apply(ainv, i, j, k)
            perm[i * k + j] = si * k + sj
    return perm


def apply_grid_action(a: Element, arr: np.ndarray) -> np.ndarray:
    """Apply a to the last two axes of arr (rows x cols, square)."""
    refl, rot = a
    out = arr[..., ::-1] if refl else arr
    if rot % 4:
        out = np.rot90(out, rot % 4, axes=(-2, -1))
    return np.ascontiguousarray(out)


def regular_perm(a: Element, g: PointGroup) -> np.ndarray:
    """Left-regular permutation of g's canonical order: perm[idx(s)] = idx(a*s)."""
    if a not in g:
        raise NotAMember(f"{elt_name(a)} is not in {g.name}")
    perm = np.empty(g.order, dtype=np.int64)
    for i, s in enumerate(g.elements):
        perm[i] = g.index(product(a, s))
    return perm
