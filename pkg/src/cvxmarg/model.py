"""Region graphs, learnable weight tables and per-observation weight vectors.

Beliefs are stored in one flat vector. Region ``r`` owns the block
``offsets[r]:offsets[r + 1]`` and a hidden configuration ``x_r`` is
flattened row-major over the region's hidden indices in ascending
variable order, so for an edge ``(i, j)`` the block reads
``(0,0), (0,1), (1,0), (1,1)``. Observed configurations ``y_r`` use the
same rule over the region's observed indices.

Each tie group owns one table per convex function, of shape
``(hidden_arity**k, observed_arity**m)``. The parameter vector ``theta``
concatenates, for each function in family order, every tie group's table
raveled row-major (hidden configuration major). Tables for functions
flagged ``positive`` hold log-weights.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, ParseError
from .functions import FAMILY, ConvexFunction

MODEL_FORMAT = "cvxmarg-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Region:
    hidden: tuple[int, ...]
    observed: tuple[int, ...]
    tie_group: str

    @property
    def kind(self) -> str:
        return "singleton" if len(self.hidden) == 1 else "clique"


class RegionGraph:
    """Regions over hidden and observed variables with tied weight tables.

    Parameters
    ----------
    num_hidden, num_observed : int
        Number of hidden and observed variables.
    hidden_arity, observed_arity : int
        States per hidden and per observed variable.
    regions : sequence of Region
        Singletons hold one hidden index, cliques two or more. Every hidden
        variable that appears in a clique must also have a singleton.
    shape : (int, int), optional
        Grid shape, recorded for serialization and image reshaping.
    """

    def __init__(
        self,
        num_hidden: int,
        hidden_arity: int,
        num_observed: int,
        observed_arity: int,
        regions: Sequence[Region],
        shape: tuple[int, int] | None = None,
    ):
        if num_hidden < 1 or num_observed < 0:
            raise InvalidArgument("need at least one hidden variable")
        if hidden_arity < 2 or observed_arity < 2:
            raise InvalidArgument("arities must be >= 2")
        self.num_hidden = int(num_hidden)
        self.hidden_arity = int(hidden_arity)
        self.num_observed = int(num_observed)
        self.observed_arity = int(observed_arity)
        self.regions = tuple(regions)
        self.shape = shape
        self._validate()
        self._index()

    def _validate(self) -> None:
        group_dims: dict[str, tuple[int, int]] = {}
        singletons: dict[int, int] = {}
        for r, reg in enumerate(self.regions):
            if len(reg.hidden) == 0:
                raise InvalidArgument(f"region {r} has no hidden variables")
            if list(reg.hidden) != sorted(set(reg.hidden)):
                raise InvalidArgument(f"region {r}: hidden indices must be strictly ascending")
            if any(not 0 <= i < self.num_hidden for i in reg.hidden):
                raise InvalidArgument(f"region {r}: hidden index out of range")
            if any(not 0 <= o < self.num_observed for o in reg.observed):
                raise InvalidArgument(f"region {r}: observed index out of range")
            dims = (len(reg.hidden), len(reg.observed))
            if group_dims.setdefault(reg.tie_group, dims) != dims:
                raise InvalidArgument(
                    f"tie group {reg.tie_group!r} mixes region sizes {group_dims[reg.tie_group]} and {dims}"
                )
            if reg.kind == "singleton":
                i = reg.hidden[0]
                if i in singletons:
                    raise InvalidArgument(f"hidden variable {i} has two singleton regions")
                singletons[i] = r
        for r, reg in enumerate(self.regions):
            for i in reg.hidden:
                if i not in singletons:
                    raise InvalidArgument(f"hidden variable {i} (region {r}) has no singleton region")
        self.singleton_of = singletons

    def _index(self) -> None:
        ha, oa = self.hidden_arity, self.observed_arity
        sizes = [ha ** len(reg.hidden) for reg in self.regions]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.size = int(self.offsets[-1])

        groups: list[str] = []
        for reg in self.regions:
            if reg.tie_group not in groups:
                groups.append(reg.tie_group)
        self.tie_groups = tuple(groups)
        self.group_shape: dict[str, tuple[int, int]] = {}
        self.group_offset: dict[str, int] = {}
        offset = 0
        for g in groups:
            reg = next(rg for rg in self.regions if rg.tie_group == g)
            shp = (ha ** len(reg.hidden), oa ** len(reg.observed))
            self.group_shape[g] = shp
            self.group_offset[g] = offset
            offset += shp[0] * shp[1]
        self.block_size = offset

        # Per belief position: owning region, and table cell minus the y-config term.
        self.position_region = np.repeat(np.arange(len(self.regions)), sizes)
        base = np.empty(self.size, dtype=np.int64)
        for r, reg in enumerate(self.regions):
            ny = self.group_shape[reg.tie_group][1]
            lo, hi = self.offsets[r], self.offsets[r + 1]
            base[lo:hi] = self.group_offset[reg.tie_group] + np.arange(hi - lo) * ny
        self._cell_base = base

        self._obs_by_size: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for m in sorted({len(reg.observed) for reg in self.regions}):
            ridx = np.array([r for r, reg in enumerate(self.regions) if len(reg.observed) == m])
            oidx = np.array([self.regions[r].observed for r in ridx], dtype=np.int64).reshape(len(ridx), m)
            self._obs_by_size[m] = (ridx, oidx)
        self._y_powers = {m: oa ** np.arange(m - 1, -1, -1) for m in self._obs_by_size}

    # -- convenience ------------------------------------------------------

    def block(self, r: int) -> slice:
        return slice(int(self.offsets[r]), int(self.offsets[r + 1]))

    @property
    def singleton_regions(self) -> list[int]:
        return [r for r, reg in enumerate(self.regions) if reg.kind == "singleton"]

    @property
    def clique_regions(self) -> list[int]:
        return [r for r, reg in enumerate(self.regions) if reg.kind == "clique"]

    def check_observation(self, y) -> np.ndarray:
        y = np.asarray(y).reshape(-1)
        if y.size != self.num_observed:
            raise InvalidArgument(f"observation has {y.size} entries, expected {self.num_observed}")
        if y.size and (not np.issubdtype(y.dtype, np.integer)):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise InvalidArgument("observed states must be integers")
            y = y.astype(np.int64)
        if y.size and (y.min() < 0 or y.max() >= self.observed_arity):
            raise InvalidArgument(f"observed state out of range [0, {self.observed_arity})")
        return y.astype(np.int64)

    def cell_index(self, y) -> np.ndarray:
        """Table cell (within one function's block) feeding each belief position."""
        y = self.check_observation(y)
        yconf = np.zeros(len(self.regions), dtype=np.int64)
        for m, (ridx, oidx) in self._obs_by_size.items():
            if m:
                yconf[ridx] = y[oidx] @ self._y_powers[m]
        return self._cell_base + yconf[self.position_region]

    def param_layout(self, family: Sequence[ConvexFunction] = FAMILY) -> "ParamLayout":
        return ParamLayout(
            family=tuple(family),
            groups=self.tie_groups,
            shapes=tuple(self.group_shape[g] for g in self.tie_groups),
            offsets=tuple(self.group_offset[g] for g in self.tie_groups),
            block_size=self.block_size,
        )

    def __repr__(self) -> str:
        return (
            f"RegionGraph(regions={len(self.regions)}, beliefs={self.size}, "
            f"hidden_arity={self.hidden_arity}, observed_arity={self.observed_arity}, shape={self.shape})"
        )


def build_grid_model(height: int, width: int, hidden_arity: int = 2, observed_arity: int = 2) -> RegionGraph:
    """Pixel grid with same-location observations and 4-neighbour edges.

    Singletons come first in row-major pixel order, followed by edges: for
    each pixel in row-major order its right neighbour edge, then its lower
    neighbour edge. Horizontal and vertical edges share the tie group
    ``"edge"``; all singletons share ``"node"``.
    """
    if height < 1 or width < 1:
        raise InvalidArgument("grid dimensions must be >= 1")
    n = height * width
    regions = [Region((i,), (i,), "node") for i in range(n)]
    for r in range(height):
        for c in range(width):
            i = r * width + c
            if c + 1 < width:
                regions.append(Region((i, i + 1), (i, i + 1), "edge"))
            if r + 1 < height:
                regions.append(Region((i, i + width), (i, i + width), "edge"))
    return RegionGraph(n, hidden_arity, n, observed_arity, regions, shape=(height, width))


def build_chain_model(length: int, hidden_arity: int = 2, observed_arity: int = 2) -> RegionGraph:
    return build_grid_model(1, length, hidden_arity, observed_arity)


@dataclass(frozen=True)
class ParamLayout:
    family: tuple[ConvexFunction, ...]
    groups: tuple[str, ...]
    shapes: tuple[tuple[int, int], ...]
    offsets: tuple[int, ...]
    block_size: int

    @property
    def size(self) -> int:
        return len(self.family) * self.block_size

    def function_index(self, name: str) -> int:
        for k, f in enumerate(self.family):
            if f.name == name:
                return k
        raise InvalidArgument(f"unknown function {name!r}")

    def index(self, fname: str, group: str, xconf: int, yconf: int) -> int:
        k = self.function_index(fname)
        g = self.groups.index(group)
        nx, ny = self.shapes[g]
        if not (0 <= xconf < nx and 0 <= yconf < ny):
            raise InvalidArgument("table cell out of range")
        return k * self.block_size + self.offsets[g] + xconf * ny + yconf

    def describe(self, j: int) -> tuple[str, str, int, int]:
        """Inverse of :meth:`index`."""
        if not 0 <= j < self.size:
            raise InvalidArgument(f"parameter index {j} out of range [0, {self.size})")
        k, cell = divmod(j, self.block_size)
        for g, off, (nx, ny) in zip(self.groups, self.offsets, self.shapes):
            if off <= cell < off + nx * ny:
                xconf, yconf = divmod(cell - off, ny)
                return self.family[k].name, g, xconf, yconf
        raise AssertionError("unreachable")

    def positive_mask(self) -> np.ndarray:
        """True on parameters that are log-weights."""
        return np.repeat([f.positive for f in self.family], self.block_size)


class ParameterSet:
    """Immutable learnable weight tables.

    ``theta`` holds linear weights directly and log-weights for positive
    functions, so every entry is unconstrained.
    """

    def __init__(self, layout: ParamLayout, theta=None):
        self.layout = layout
        if theta is None:
            theta = np.zeros(layout.size)
        theta = np.array(theta, dtype=np.float64).reshape(-1)
        if theta.size != layout.size:
            raise InvalidArgument(f"theta has {theta.size} entries, layout needs {layout.size}")
        if not np.all(np.isfinite(theta)):
            raise InvalidArgument("theta must be finite")
        theta.flags.writeable = False
        self.theta = theta

    @classmethod
    def zeros(cls, graph: RegionGraph, family: Sequence[ConvexFunction] = FAMILY) -> "ParameterSet":
        return cls(graph.param_layout(family))

    @property
    def family(self) -> tuple[ConvexFunction, ...]:
        return self.layout.family

    def with_theta(self, theta) -> "ParameterSet":
        return ParameterSet(self.layout, theta)

    def block(self, k: int) -> np.ndarray:
        n = self.layout.block_size
        return self.theta[k * n : (k + 1) * n]

    def table(self, fname: str, group: str) -> np.ndarray:
        """Raw parameter table (log-weights for positive functions)."""
        k = self.layout.function_index(fname)
        g = self.layout.groups.index(group)
        nx, ny = self.layout.shapes[g]
        off = self.layout.offsets[g]
        return self.block(k)[off : off + nx * ny].reshape(nx, ny)

    def weight_table(self, fname: str, group: str) -> np.ndarray:
        t = self.table(fname, group)
        return np.exp(t) if self.family[self.layout.function_index(fname)].positive else t.copy()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParameterSet)
            and self.layout == other.layout
            and np.array_equal(self.theta, other.theta)
        )

    def __repr__(self) -> str:
        return f"ParameterSet(n_params={self.layout.size}, groups={self.layout.groups})"


def realize_weights(graph: RegionGraph, params: ParameterSet, y) -> np.ndarray:
    """Weight vectors for observation ``y``, one row per convex function."""
    cell = graph.cell_index(y)
    out = np.empty((len(params.family), graph.size))
    for k, f in enumerate(params.family):
        vals = params.block(k)[cell]
        out[k] = np.exp(vals) if f.positive else vals
    return out


def dweights_dtheta(graph: RegionGraph, params: ParameterSet, y, j: int) -> np.ndarray:
    """Derivative of every realized weight with respect to ``theta[j]``.

    Returns an array shaped like :func:`realize_weights`; only the row of
    the function that owns ``j`` can be nonzero.
    """
    if not isinstance(j, (int, np.integer)) or not 0 <= j < params.layout.size:
        raise InvalidArgument(f"parameter index {j!r} out of range")
    k, cell = divmod(int(j), params.layout.block_size)
    out = np.zeros((len(params.family), graph.size))
    hit = graph.cell_index(y) == cell
    out[k, hit] = np.exp(params.theta[j]) if params.family[k].positive else 1.0
    return out


def bethe_counting_numbers(graph: RegionGraph) -> np.ndarray:
    """Bethe counting numbers: 1 for cliques, 1 - (#cliques containing i) for singletons."""
    memberships = np.zeros(graph.num_hidden, dtype=np.int64)
    for reg in graph.regions:
        if reg.kind == "clique":
            memberships[list(reg.hidden)] += 1
    out = np.ones(len(graph.regions))
    for r, reg in enumerate(graph.regions):
        if reg.kind == "singleton":
            out[r] = 1 - memberships[reg.hidden[0]]
    return out


# -- model files -------------------------------------------------------------


def dumps_model(graph: RegionGraph, params: ParameterSet) -> str:
    if graph.shape is None:
        raise InvalidArgument("only grid-shaped graphs can be serialized")
    tables: dict[str, dict] = {}
    log_tables: dict[str, dict] = {}
    for f in params.family:
        tables[f.name] = {g: params.weight_table(f.name, g).tolist() for g in graph.tie_groups}
        if f.positive:
            log_tables[f.name] = {g: params.table(f.name, g).tolist() for g in graph.tie_groups}
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "topology": "grid",
        "height": graph.shape[0],
        "width": graph.shape[1],
        "hidden_arity": graph.hidden_arity,
        "observed_arity": graph.observed_arity,
        "tie_groups": list(graph.tie_groups),
        "cell_order": "rows: hidden configuration, columns: observed configuration; "
        "each row-major over ascending variable index",
        "weights": tables,
        "log_weights": log_tables,
    }
    return json.dumps(doc, indent=1) + "\n"


def loads_model(text: str, shape: tuple[int, int] | None = None) -> tuple[RegionGraph, ParameterSet]:
    """Parse a model document.

    ``shape`` rebuilds the grid at a different size; tied tables do not
    depend on the grid size.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"model file is not valid JSON at byte {exc.pos}: {exc.msg}") from exc
    if doc.get("format") != MODEL_FORMAT:
        raise ParseError("not a cvxmarg model file")
    if doc.get("version") != MODEL_VERSION:
        raise ParseError(f"unsupported model version {doc.get('version')!r}")
    h, w = shape if shape is not None else (doc["height"], doc["width"])
    graph = build_grid_model(h, w, doc["hidden_arity"], doc["observed_arity"])
    missing = set(graph.tie_groups) - set(doc["tie_groups"])
    if missing:
        raise ParseError(f"model file lacks tables for tie groups {sorted(missing)}")
    layout = graph.param_layout()
    theta = np.zeros(layout.size)
    for k, f in enumerate(layout.family):
        for g, off, (nx, ny) in zip(layout.groups, layout.offsets, layout.shapes):
            if f.positive and f.name in doc.get("log_weights", {}):
                table = np.asarray(doc["log_weights"][f.name][g], dtype=np.float64)
            else:
                table = np.asarray(doc["weights"][f.name][g], dtype=np.float64)
                if f.positive:
                    table = np.log(table)
            if table.shape != (nx, ny):
                raise ParseError(f"table {f.name}/{g} has shape {table.shape}, expected {(nx, ny)}")
            start = k * layout.block_size + off
            theta[start : start + nx * ny] = table.ravel()
    return graph, ParameterSet(layout, theta)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write to a temporary sibling then rename, so readers never see a partial file."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(path, graph: RegionGraph, params: ParameterSet) -> None:
    atomic_write_text(path, dumps_model(graph, params))


def load_model(path, shape: tuple[int, int] | None = None) -> tuple[RegionGraph, ParameterSet]:
    with open(path) as fh:
        return loads_model(fh.read(), shape=shape)
