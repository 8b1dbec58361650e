"""Node placement, cell partition, pairing, and interference checking.

The scheme's analytic layer idealizes cells as holding exactly m nodes;
this module is the physical-plausibility counterpart: nodes land uniformly
on a square, cells are a regular grid, and simultaneous in-cell
transmissions are scheduled with a 9-group TDMA reuse pattern whose
admissibility is checked against the protocol interference model
d(receiver, interferer) >= (1 + gamma) * d(receiver, transmitter).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

TDMA_GROUPS = 9
GUARD_ZONE_LIMIT = math.sqrt(2.0) - 1.0  # largest gamma the 9-TDMA pattern tolerates


@dataclass(frozen=True)
class CellGrid:
    """Regular partition of the square into cells_per_side^2 equal cells."""

    area_side: float
    cells_per_side: int

    @property
    def cell_len(self) -> float:
        return self.area_side / self.cells_per_side

    @property
    def num_cells(self) -> int:
        return self.cells_per_side * self.cells_per_side


@dataclass
class Topology:
    area_side: float
    positions: np.ndarray  # (n, 2)
    grid: CellGrid | None = None
    cell_of: np.ndarray | None = None
    pairing: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.positions.shape[0])

    @property
    def cells_per_side(self) -> int:
        if self.grid is None:
            raise ValueError("topology has no cell grid; call with_cells first")
        return self.grid.cells_per_side

    def with_cells(self, grid: CellGrid) -> "Topology":
        return replace(self, grid=grid, cell_of=cell_index(grid, self.positions))


def place_nodes(n: int, area: float, stream: np.random.Generator) -> Topology:
    """n points uniform and independent on the square of the given area."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if not area > 0:
        raise ValueError(f"area must be > 0, got {area}")
    side = math.sqrt(area)
    return Topology(area_side=side, positions=stream.random((int(n), 2)) * side)


def build_cells(n: int, m: int, area: float) -> CellGrid:
    """Grid of n/m equal square cells of side sqrt(area * m / n).

    n/m must be a perfect square for the grid to tile the square area.
    """
    if n < 1 or m < 1 or n % m != 0:
        raise ValueError(f"need m dividing n, got n={n}, m={m}")
    cells = n // m
    per_side = math.isqrt(cells)
    if per_side * per_side != cells:
        raise ValueError(
            f"n/m = {cells} cells cannot tile a square grid; pick m so that "
            f"n/m is a perfect square (e.g. m={n // (per_side * per_side)})"
        )
    if not area > 0:
        raise ValueError(f"area must be > 0, got {area}")
    return CellGrid(area_side=math.sqrt(area), cells_per_side=per_side)


def cell_index(grid: CellGrid, points: np.ndarray) -> np.ndarray:
    """Row-major cell index of each point; boundary points go to the last cell."""
    scaled = np.floor(points / grid.cell_len).astype(np.int64)
    scaled = np.clip(scaled, 0, grid.cells_per_side - 1)
    return scaled[:, 1] * grid.cells_per_side + scaled[:, 0]


def assign_pairs(
    topology: Topology,
    stream: np.random.Generator,
    forbid_same_cell: bool = True,
    max_retries: int = 10_000,
) -> tuple[np.ndarray, int]:
    """Uniform random destination permutation, resampled until admissible.

    Admissible means no node paired with itself and, if ``forbid_same_cell``
    (requires a cell grid), no pair within one cell.  Returns the pairing
    and the number of rejected permutations; rejection sampling perturbs
    uniformity slightly, which tests measure rather than assume away.
    """
    if forbid_same_cell and topology.cell_of is None:
        raise ValueError("forbid_same_cell requires a topology with assigned cells")
    n = topology.n
    for retries in range(max_retries + 1):
        perm = stream.permutation(n)
        if np.any(perm == np.arange(n)):
            continue
        if forbid_same_cell and np.any(topology.cell_of[perm] == topology.cell_of):
            continue
        return perm, retries
    raise RuntimeError(
        f"no admissible pairing found in {max_retries} attempts; constraints "
        f"may be infeasible for this topology"
    )


@dataclass(frozen=True)
class TdmaGroups:
    """The 9 spatial-reuse groups: cells with equal (row mod 3, col mod 3)."""

    groups: tuple[tuple[int, ...], ...]


def tdma_groups(grid: CellGrid) -> TdmaGroups:
    """Partition cells into 9 groups; within a group, active cells are at
    least three grid steps apart along each axis, leaving two inactive
    cells between any two active ones."""
    per_side = grid.cells_per_side
    buckets: list[list[int]] = [[] for _ in range(TDMA_GROUPS)]
    for row in range(per_side):
        for col in range(per_side):
            buckets[(row % 3) * 3 + (col % 3)].append(row * per_side + col)
    return TdmaGroups(groups=tuple(tuple(b) for b in buckets))


@dataclass(frozen=True)
class Violation:
    """One protocol-model failure: the interferer sits inside the guard zone."""

    receiver: int
    transmitter: int
    interferer: int
    d_own: float
    d_interferer: float
    margin: float  # d_interferer - (1 + gamma) * d_own, negative here


def check_protocol_model(
    topology: Topology,
    transmissions: list[tuple[int, int]],
    gamma: float,
) -> list[Violation]:
    """Check every receiver against every other active transmitter.

    ``transmissions`` lists (transmitter, receiver) node pairs assumed
    simultaneously active.  A reception fails when some other transmitter k
    satisfies d(rx, k) < (1 + gamma) * d(rx, tx).  An empty result means
    the configuration is admissible.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    pos = topology.positions
    violations: list[Violation] = []
    for tx, rx in transmissions:
        if tx == rx:
            raise ValueError(f"transmitter and receiver coincide: node {tx}")
        d_own = float(np.linalg.norm(pos[rx] - pos[tx]))
        threshold = (1.0 + gamma) * d_own
        for other_tx, _ in transmissions:
            if other_tx == tx:
                continue
            d_int = float(np.linalg.norm(pos[rx] - pos[other_tx]))
            if d_int < threshold:
                violations.append(
                    Violation(
                        receiver=rx,
                        transmitter=tx,
                        interferer=other_tx,
                        d_own=d_own,
                        d_interferer=d_int,
                        margin=d_int - threshold,
                    )
                )
    return violations


def same_cell_transmissions(
    topology: Topology, cells: tuple[int, ...] | list[int]
) -> list[tuple[int, int]]:
    """One worst-case in-cell link per listed cell.

    For each cell holding at least two nodes, picks the farthest-apart node
    pair (the longest own-link the protocol model could face).  Cells with
    fewer than two nodes are skipped.
    """
    if topology.cell_of is None:
        raise ValueError("topology has no cell assignment")
    out: list[tuple[int, int]] = []
    for cell in cells:
        members = np.flatnonzero(topology.cell_of == cell)
        if members.size < 2:
            continue
        pts = topology.positions[members]
        diffs = pts[:, None, :] - pts[None, :, :]
        dist = np.linalg.norm(diffs, axis=2)
        i, j = np.unravel_index(np.argmax(dist), dist.shape)
        out.append((int(members[i]), int(members[j])))
    return out


def corner_case_witness(area: float = 1.0, cells_per_side: int = 5) -> tuple[Topology, list[tuple[int, int]]]:
    """Adversarial same-group configuration sitting on the guard-zone edge.

    Transmitter at a cell corner, receiver at the opposite corner (own link
    ~ r*sqrt(2)), interferer at the nearest corner of the nearest cell in
    the same TDMA group (distance ~ 2r).  Admissible at
    gamma = sqrt(2) - 1, violated for any larger guard zone.
    """
    if cells_per_side < 4:
        raise ValueError("need at least 4 cells per side to host the witness")
    grid = CellGrid(area_side=math.sqrt(area), cells_per_side=cells_per_side)
    r = grid.cell_len
    eps = 1e-9 * r
    positions = np.array(
        [
            [0.0, 0.0],              # transmitter, cell (0, 0)
            [r - eps, r - eps],      # its receiver, opposite corner of cell (0, 0)
            [3.0 * r, r - eps],      # interfering transmitter, cell (0, 3): same group
            [3.5 * r, 0.5 * r],      # interferer's own receiver
        ]
    )
    topo = Topology(area_side=grid.area_side, positions=positions).with_cells(grid)
    return topo, [(0, 1), (2, 3)]


def write_topology_csv(topology: Topology, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "x", "y", "cell_id", "dest_id"])
        cell_of = topology.cell_of
        pairing = topology.pairing
        for i in range(topology.n):
            writer.writerow(
                [
                    i,
                    repr(float(topology.positions[i, 0])),
                    repr(float(topology.positions[i, 1])),
                    "" if cell_of is None else int(cell_of[i]),
                    "" if pairing is None else int(pairing[i]),
                ]
            )


def read_topology_csv(path, area_side: float, grid: CellGrid | None = None) -> Topology:
    node_ids, xs, ys, cells, dests = [], [], [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            node_ids.append(int(row["node_id"]))
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
            cells.append(int(row["cell_id"]) if row["cell_id"] else -1)
            dests.append(int(row["dest_id"]) if row["dest_id"] else -1)
    order = np.argsort(node_ids)
    positions = np.column_stack([np.array(xs)[order], np.array(ys)[order]])
    cell_arr = np.array(cells)[order]
    dest_arr = np.array(dests)[order]
    return Topology(
        area_side=area_side,
        positions=positions,
        grid=grid,
        cell_of=None if np.all(cell_arr < 0) else cell_arr,
        pairing=None if np.all(dest_arr < 0) else dest_arr,
    )


def write_violations_csv(violations: list[Violation], gamma: float, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["receiver", "transmitter", "interferer", "d_ji", "d_jk", "gamma", "margin"]
        )
        for v in violations:
            writer.writerow(
                [
                    v.receiver,
                    v.transmitter,
                    v.interferer,
                    repr(v.d_own),
                    repr(v.d_interferer),
                    repr(gamma),
                    repr(v.margin),
                ]
            )
