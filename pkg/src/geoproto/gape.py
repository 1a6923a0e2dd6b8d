"""Grid-pooled local prototypes and their geometry-aware enrichment.

Prototypes are stored stacked (``n x C``) with a parallel array of grid
cell ids, which keeps pooling and matching to a handful of matrix ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import numerics as nx
from .geometry import edt
from .numerics import DiffTensor, ShapeError

FUSION_MODES = ("additive", "concat_proj", "scale_gate")
MLP_INIT = 1e-4


class DegenerateSupportError(ValueError):
    """No grid cell reaches the foreground occupancy threshold."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    G: int
    h: int
    w: int
    tau_occ: float = 0.05

    def __post_init__(self):
        if self.G < 1:
            raise ConfigError(f"grid side must be >= 1, got {self.G}")

    @property
    def row_edges(self) -> np.ndarray:
        return (np.arange(self.G + 1) * self.h) // self.G

    @property
    def col_edges(self) -> np.ndarray:
        return (np.arange(self.G + 1) * self.w) // self.G

    def cell_index(self) -> np.ndarray:
        """h x w map of cell ids (row-major over the G x G grid)."""
        r = np.searchsorted(self.row_edges, np.arange(self.h), side="right") - 1
        c = np.searchsorted(self.col_edges, np.arange(self.w), side="right") - 1
        return r[:, None] * self.G + c[None, :]

    def cell_sizes(self) -> np.ndarray:
        return np.bincount(self.cell_index().ravel(), minlength=self.G * self.G)


@dataclass
class PrototypeSet:
    fg_cells: np.ndarray
    fg_raw: DiffTensor  # n_fg x C
    bg_cells: np.ndarray
    bg: Optional[DiffTensor]  # n_bg x C, None when no cell qualifies
    fg_enriched: Optional[DiffTensor] = None
    fg_meandist: Optional[DiffTensor] = None  # n_fg expected bins, in [0, K-1]
    K: Optional[int] = None

    @property
    def n_fg(self) -> int:
        return len(self.fg_cells)

    @property
    def n_bg(self) -> int:
        return len(self.bg_cells)

    @property
    def fg(self) -> DiffTensor:
        """The prototypes used for foreground scoring."""
        return self.fg_enriched if self.fg_enriched is not None else self.fg_raw


def _cell_weights(cell_of: np.ndarray, cells: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Row i holds 1/|region in cell i| on that cell's region pixels."""
    flat_cell = cell_of.ravel()
    flat_reg = region.ravel()
    W = (flat_cell[None, :] == cells[:, None]) & flat_reg[None, :]
    return W / W.sum(axis=1, keepdims=True)


def _pool(feat: DiffTensor, weights: np.ndarray) -> DiffTensor:
    C = feat.shape[0]
    return nx.matmul(DiffTensor(weights), feat.reshape(C, -1).T)


def pool_prototypes(feat: DiffTensor, mask: np.ndarray, grid: GridSpec) -> PrototypeSet:
    """Masked-average prototype per grid cell, for foreground and background.

    A cell contributes a foreground prototype when its mean foreground
    occupancy reaches ``grid.tau_occ``, and a background prototype when its
    mean background occupancy does.
    """
    m = np.asarray(mask, dtype=bool)
    if feat.ndim != 3 or m.shape != feat.shape[1:] or m.shape != (grid.h, grid.w):
        raise ShapeError(f"feature {feat.shape}, mask {m.shape}, grid {grid.h}x{grid.w}")
    cell_of = grid.cell_index()
    sizes = grid.cell_sizes()
    nonempty = sizes > 0
    fg_count = np.bincount(cell_of.ravel(), weights=m.ravel(), minlength=sizes.size)
    occ = np.divide(fg_count, sizes, out=np.zeros(sizes.size), where=nonempty)
    fg_cells = np.flatnonzero(nonempty & (fg_count > 0) & (occ >= grid.tau_occ))
    bg_cells = np.flatnonzero(nonempty & (sizes - fg_count > 0) & (1.0 - occ >= grid.tau_occ))
    if fg_cells.size == 0:
        raise DegenerateSupportError("no grid cell meets the foreground occupancy threshold")
    fg_raw = _pool(feat, _cell_weights(cell_of, fg_cells, m))
    bg = _pool(feat, _cell_weights(cell_of, bg_cells, ~m)) if bg_cells.size else None
    return PrototypeSet(fg_cells, fg_raw, bg_cells, bg)


def expected_bin_map(probs: DiffTensor) -> DiffTensor:
    """Per-pixel expectation sum_k k * p_k(x), shape h x w."""
    K = probs.shape[0]
    return (probs * np.arange(K, dtype=np.float64)[:, None, None]).sum(axis=0)


def expected_bin(probs: DiffTensor, grid: GridSpec, cells: np.ndarray,
                 mask: np.ndarray | None = None) -> DiffTensor:
    """Mean expected bin over each listed cell.

    By default the average runs over every pixel of the cell; passing
    ``mask`` restricts it to the masked pixels instead.
    """
    cell_of = grid.cell_index()
    region = np.ones(cell_of.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    W = _cell_weights(cell_of, np.asarray(cells), region)
    E = expected_bin_map(probs).reshape(-1, 1)
    return nx.matmul(DiffTensor(W), E).reshape(-1)


@dataclass
class GapeMlpParams:
    W1: DiffTensor  # H_e x 1
    b1: DiffTensor
    W2: DiffTensor  # C x H_e
    b2: DiffTensor
    use_bias: bool = True

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, hidden: int = 16,
             use_bias: bool = True, scale: float = MLP_INIT) -> "GapeMlpParams":
        # biases start at exactly zero so the offset stays below hidden * scale**2
        return cls(
            nx.param(rng.uniform(-scale, scale, size=(hidden, 1))),
            nx.param(np.zeros(hidden)),
            nx.param(rng.uniform(-scale, scale, size=(channels, hidden))),
            nx.param(np.zeros(channels)),
            use_bias,
        )

    @classmethod
    def zeros(cls, channels: int, hidden: int = 16, use_bias: bool = True) -> "GapeMlpParams":
        return cls(nx.param(np.zeros((hidden, 1))), nx.param(np.zeros(hidden)),
                   nx.param(np.zeros((channels, hidden))), nx.param(np.zeros(channels)), use_bias)

    def tensors(self) -> dict[str, DiffTensor]:
        out = {"W1": self.W1, "W2": self.W2}
        if self.use_bias:
            out.update(b1=self.b1, b2=self.b2)
        return out


def mlp_forward(u: DiffTensor, mlp: GapeMlpParams) -> DiffTensor:
    """Two-layer ReLU MLP on a column of scalars (n) -> n x C."""
    x = u.reshape(-1, 1)
    hid = nx.matmul(x, mlp.W1.T)
    if mlp.use_bias:
        hid = hid + mlp.b1
    out = nx.matmul(nx.relu(hid), mlp.W2.T)
    if mlp.use_bias:
        out = out + mlp.b2
    return out


def geometric_embedding(d_bar, K: int, mlp: GapeMlpParams) -> DiffTensor:
    """Offset e = W2 relu(W1 * d_bar / (K-1)) for one or many expected bins."""
    if K < 2:
        raise ValueError("K must be >= 2")
    d = d_bar if isinstance(d_bar, DiffTensor) else DiffTensor(d_bar)
    e = mlp_forward(d * (1.0 / (K - 1)), mlp)
    return e.reshape(-1) if d.ndim == 0 else e


@dataclass
class ProjParams:
    """2C -> C linear projection used by the concat fusion mode."""

    W: DiffTensor  # C x 2C
    b: DiffTensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> "ProjParams":
        bound = 1.0 / np.sqrt(2 * channels)
        return cls(nx.param(rng.uniform(-bound, bound, size=(channels, 2 * channels))),
                   nx.param(np.zeros(channels)))

    def tensors(self) -> dict[str, DiffTensor]:
        return {"W": self.W, "b": self.b}


def fuse(proto: DiffTensor, e: DiffTensor, mode: str = "additive",
         proj: ProjParams | None = None) -> DiffTensor:
    """Combine appearance prototypes with geometric offsets (row-wise for n x C)."""
    if mode == "additive":
        return proto + e
    if mode == "scale_gate":
        return proto * (nx.softplus(e) + 1.0)
    if mode == "concat_proj":
        if proj is None:
            raise ConfigError("concat_proj fusion needs projection parameters")
        axis = proto.ndim - 1
        cat = nx.concat([proto, e], axis=axis)
        if cat.ndim == 1:
            return nx.matmul(proj.W, cat.reshape(-1, 1)).reshape(-1) + proj.b
        return nx.matmul(cat, proj.W.T) + proj.b
    raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")


def enrich(protos: PrototypeSet, binpred, grid: GridSpec, mlp: GapeMlpParams,
           mode: str = "additive", proj: ProjParams | None = None,
           mask: np.ndarray | None = None) -> PrototypeSet:
    """Attach expected bins, offsets and enriched prototypes to the foreground slots.

    ``mask`` switches the expected bin to the foreground-only average.
    Background prototypes pass through unchanged.
    """
    K = binpred.K
    d_bar = expected_bin(binpred.probs, grid, protos.fg_cells, mask=mask)
    e = geometric_embedding(d_bar, K, mlp)
    enriched = fuse(protos.fg_raw, e, mode, proj)
    return replace(protos, fg_enriched=enriched, fg_meandist=d_bar, K=K)


def background_distance(mask: np.ndarray) -> np.ndarray:
    """Distance from each background pixel to the foreground, scaled to [0, 1]."""
    m = np.asarray(mask, dtype=bool)
    d = edt(~m)
    top = d.max()
    return d / top if top > 0 else d


def enrich_background_variant(protos: PrototypeSet, mask: np.ndarray, grid: GridSpec,
                              mlp_bg: GapeMlpParams) -> PrototypeSet:
    """Add an offset to each background prototype from its mean distance to the foreground."""
    if protos.bg is None:
        return protos
    m = np.asarray(mask, dtype=bool)
    dist = background_distance(m)  # raises NoBackgroundError when m has no foreground
    W = _cell_weights(grid.cell_index(), protos.bg_cells, ~m)
    u = W @ dist.ravel()
    e = mlp_forward(DiffTensor(u), mlp_bg)
    return replace(protos, bg=protos.bg + e)
