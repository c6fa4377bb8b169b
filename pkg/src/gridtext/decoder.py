"""Graph-based decoding: grids to characters to reading-order lines.

Decoding runs in three steps.  Node extraction thresholds the presence map
and removes duplicate detections with NMS.  Edge resolution walks the
per-grid direction field from every node until another node is reached (or
the walk exits the lattice, revisits a grid, or hits the step cap), then
enforces the at-most-one-edge-in/one-edge-out property.  Assembly emits
each maximal chain that begins at a start-of-line node and stops at the
first end-of-line node.

Every stage is a pure function of its inputs, so repeated decodes of the
same maps are bit-identical.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box, rel_to_abs
from .predictions import PredictionMaps, step

DIS_WEIGHT = 0.8
CLS_WEIGHT = 0.2

REACHED = "reached"
BOUNDARY = "boundary"
CYCLE = "cycle"
MAX_STEPS = "max_steps"


class InvariantError(RuntimeError):
    """A decoded result violated a structural guarantee."""


@dataclass(frozen=True)
class DecodeConfig:
    dis_threshold: float = 0.5
    nms_iou: float = 0.3
    sol_eol_threshold: float = 0.9
    max_steps: int | None = None  # None: w_g + h_g


@dataclass(frozen=True)
class CharInstance:
    """One decoded character: grid cell, box, fused score, and class."""

    grid: tuple[int, int]
    box: Box
    score: float
    cls_id: int
    cls_prob: float


@dataclass
class SearchTrace:
    """Grid walk from one node toward its successor.

    ``visited`` holds the grids the walk stood on, origin first; the reached
    node's grid is never included, so ``path`` (everything after the origin)
    is exactly the character-free corridor between two nodes.
    """

    origin: tuple[int, int]
    visited: list[tuple[int, int]]
    outcome: str
    target: tuple[int, int] | None = None

    @property
    def path(self) -> list[tuple[int, int]]:
        return self.visited[1:]


@dataclass
class Line:
    chars: list[CharInstance]
    traces: list[SearchTrace]
    sol_conf: float
    eol_conf: float

    def class_ids(self) -> list[int]:
        return [c.cls_id for c in self.chars]


@dataclass
class PageResult:
    lines: list[Line]
    dropped: list[CharInstance] = field(default_factory=list)

    def transcripts(self) -> list[list[int]]:
        return [line.class_ids() for line in self.lines]

    def to_dict(self) -> dict:
        return {
            "lines": [
                {
                    "chars": [
                        {
                            "i": c.grid[0],
                            "j": c.grid[1],
                            "x": c.box.x,
                            "y": c.box.y,
                            "w": c.box.w,
                            "h": c.box.h,
                            "cls": c.cls_id,
                            "score": c.score,
                        }
                        for c in line.chars
                    ],
                    "sol_conf": line.sol_conf,
                    "eol_conf": line.eol_conf,
                }
                for line in self.lines
            ]
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PageResult":
        lines = []
        for ln in doc["lines"]:
            chars = [
                CharInstance(
                    grid=(int(c["i"]), int(c["j"])),
                    box=Box(c["x"], c["y"], c["w"], c["h"]),
                    score=float(c["score"]),
                    cls_id=int(c["cls"]),
                    cls_prob=0.0,
                )
                for c in ln["chars"]
            ]
            lines.append(
                Line(
                    chars=chars,
                    traces=[],
                    sol_conf=float(ln.get("sol_conf", 0.0)),
                    eol_conf=float(ln.get("eol_conf", 0.0)),
                )
            )
        return cls(lines=lines)


def fused_score(dis: float, cls_prob: float) -> float:
    """Detection/recognition confidence fusion, weighted 0.8/0.2."""
    return DIS_WEIGHT * dis + CLS_WEIGHT * cls_prob


def extract_nodes(
    maps: PredictionMaps,
    dis_threshold: float = 0.5,
    nms_threshold: float = 0.3,
) -> list[CharInstance]:
    """Threshold the presence map into candidates, NMS, return row-major."""
    from .geometry import nms

    cand: list[CharInstance] = []
    hits = np.argwhere(maps.dis >= dis_threshold)
    for i0, j0 in sorted(hits.tolist(), key=lambda t: (t[1], t[0])):
        i, j = i0 + 1, j0 + 1
        row = maps.cls[i0, j0]
        cls0 = int(np.argmax(row))
        rel = maps.rel_box(i, j)
        if rel.w_o <= 0 or rel.h_o <= 0:
            rel = replace(rel, w_o=max(rel.w_o, 1e-6), h_o=max(rel.h_o, 1e-6))
        cand.append(
            CharInstance(
                grid=(i, j),
                box=rel_to_abs(rel, i, j, maps.shape),
                score=fused_score(float(maps.dis[i0, j0]), float(row[cls0])),
                cls_id=cls0 + 1,
                cls_prob=float(row[cls0]),
            )
        )
    keep = nms([(c.box, c.score) for c in cand], nms_threshold, maps.shape)
    return [cand[k] for k in keep]


def _argmax_dir(maps: PredictionMaps, g: tuple[int, int]) -> int:
    return int(np.argmax(maps.rd[g[0] - 1, g[1] - 1]))


def _neighbor_node(
    maps: PredictionMaps,
    cur: tuple[int, int],
    origin: tuple[int, int],
    node_scores: Mapping[tuple[int, int], float],
) -> tuple[int, int] | None:
    """Relaxed target at a walk's final grid: the pointed node if any, else
    the highest-scoring node among the 4-neighbors (ties row-major)."""
    pointed = step(cur, _argmax_dir(maps, cur))
    if pointed != origin and pointed in node_scores:
        return pointed
    best: tuple[int, int] | None = None
    best_key = None
    for d in range(4):
        g = step(cur, d)
        if g == origin or g not in node_scores:
            continue
        key = (-node_scores[g], g[1], g[0])
        if best_key is None or key < best_key:
            best_key = key
            best = g
    return best


def follow(
    maps: PredictionMaps,
    origin: tuple[int, int],
    node_scores: Mapping[tuple[int, int], float],
    max_steps: int,
) -> SearchTrace:
    """Walk argmax directions from ``origin`` until a node is found.

    Strict termination: the next grid of a step is a node.  Relaxed
    termination: when the walk ends for any other reason after at least one
    step, a node in the final grid's 4-neighborhood also counts as reached.
    The origin itself is never a valid target.
    """
    shape = maps.shape
    visited = [origin]
    seen = {origin}
    cur = origin

    def finalize(outcome: str) -> SearchTrace:
        if len(visited) >= 2:
            target = _neighbor_node(maps, cur, origin, node_scores)
            if target is not None:
                return SearchTrace(origin, visited, REACHED, target)
        return SearchTrace(origin, visited, outcome)

    for _ in range(max_steps):
        nxt = step(cur, _argmax_dir(maps, cur))
        if not shape.in_bounds(*nxt):
            return finalize(BOUNDARY)
        if nxt != origin and nxt in node_scores:
            return SearchTrace(origin, visited, REACHED, nxt)
        if nxt in seen:
            return finalize(CYCLE)
        visited.append(nxt)
        seen.add(nxt)
        cur = nxt
    return finalize(MAX_STEPS)


def _edge_angle(src: CharInstance, dst: CharInstance) -> float:
    return math.atan2(dst.box.y - src.box.y, dst.box.x - src.box.x)


def _circular_mean(angles: Sequence[float]) -> float:
    return math.atan2(
        sum(math.sin(a) for a in angles) / len(angles),
        sum(math.cos(a) for a in angles) / len(angles),
    )


def _angle_diff(a: float, b: float) -> float:
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def resolve_edges(
    nodes: Sequence[CharInstance], traces: Sequence[SearchTrace]
) -> dict[int, int]:
    """Turn per-node traces into edges with at most one in and one out.

    Unconflicted edges commit first.  When several edges end at one node,
    the survivor is the edge whose angle is closest to the running mean
    angle of the edges already committed along its own incoming chain;
    candidates without any chain history fall back to source score.
    Discarded edges are dropped, not rerouted.
    """
    grid_to_idx = {n.grid: k for k, n in enumerate(nodes)}
    incoming: dict[int, list[int]] = defaultdict(list)
    for k, tr in enumerate(traces):
        if tr.outcome == REACHED:
            incoming[grid_to_idx[tr.target]].append(k)

    committed: dict[int, int] = {}
    pred: dict[int, int] = {}
    order = sorted(incoming, key=lambda t: (nodes[t].grid[1], nodes[t].grid[0]))
    conflicts = []
    for t in order:
        srcs = incoming[t]
        if len(srcs) == 1:
            committed[srcs[0]] = t
            pred[t] = srcs[0]
        else:
            conflicts.append(t)

    def chain_angles(s: int) -> list[float]:
        angles: list[float] = []
        cur = s
        guard = {s}
        while cur in pred:
            p = pred[cur]
            angles.append(_edge_angle(nodes[p], nodes[cur]))
            if p in guard:
                break
            guard.add(p)
            cur = p
        return angles

    for t in conflicts:
        best_key = None
        winner = None
        for s in incoming[t]:
            hist = chain_angles(s)
            if hist:
                diff = _angle_diff(_edge_angle(nodes[s], nodes[t]), _circular_mean(hist))
                key = (0, diff, -nodes[s].score, nodes[s].grid[1], nodes[s].grid[0])
            else:
                key = (1, 0.0, -nodes[s].score, nodes[s].grid[1], nodes[s].grid[0])
            if best_key is None or key < best_key:
                best_key = key
                winner = s
        committed[winner] = t
        pred[t] = winner
    return committed


def assemble(
    nodes: Sequence[CharInstance],
    edges: Mapping[int, int],
    traces: Sequence[SearchTrace],
    maps: PredictionMaps,
    sol_eol_threshold: float = 0.9,
) -> PageResult:
    """Chase edges from start-of-line nodes into ordered line results.

    A line starts at every node whose start-of-line confidence exceeds the
    threshold and that has no incoming edge; it ends at the first node
    flagged end-of-line or when no outgoing edge exists.  Nodes on no line
    are kept as diagnostics in ``dropped``.
    """

    def sol_at(g: tuple[int, int]) -> float:
        return float(maps.sol[g[0] - 1, g[1] - 1])

    def eol_at(g: tuple[int, int]) -> float:
        return float(maps.eol[g[0] - 1, g[1] - 1])

    has_incoming = set(edges.values())
    order = sorted(range(len(nodes)), key=lambda k: (nodes[k].grid[1], nodes[k].grid[0]))
    used: set[int] = set()
    lines: list[Line] = []
    for k in order:
        if k in used or k in has_incoming:
            continue
        if sol_at(nodes[k].grid) <= sol_eol_threshold:
            continue
        chain = [k]
        cur = k
        while eol_at(nodes[cur].grid) <= sol_eol_threshold and cur in edges:
            nxt = edges[cur]
            if nxt in used or nxt in chain:
                break
            chain.append(nxt)
            cur = nxt
        used.update(chain)
        lines.append(
            Line(
                chars=[nodes[m] for m in chain],
                traces=[traces[m] for m in chain],
                sol_conf=sol_at(nodes[chain[0]].grid),
                eol_conf=eol_at(nodes[chain[-1]].grid),
            )
        )
    dropped = [nodes[k] for k in order if k not in used]
    return PageResult(lines=lines, dropped=dropped)


def validate_result(result: PageResult) -> None:
    """Structural checks: disjoint simple paths, traces consistent."""
    seen: set[tuple[int, int]] = set()
    for line in result.lines:
        if not line.chars:
            raise InvariantError("empty line in result")
        for c in line.chars:
            if c.grid in seen:
                raise InvariantError(f"character at {c.grid} appears in two lines")
            seen.add(c.grid)
        if line.traces:
            for m in range(len(line.chars) - 1):
                tr = line.traces[m]
                if tr.outcome != REACHED or tr.target != line.chars[m + 1].grid:
                    raise InvariantError(
                        f"chain at {line.chars[m].grid} not backed by a reached trace"
                    )
    for c in result.dropped:
        if c.grid in seen:
            raise InvariantError(f"dropped character at {c.grid} also in a line")


def decode(maps: PredictionMaps, config: DecodeConfig = DecodeConfig()) -> PageResult:
    """Full pipeline: extract nodes, follow directions, resolve, assemble."""
    nodes = extract_nodes(maps, config.dis_threshold, config.nms_iou)
    node_scores = {n.grid: n.score for n in nodes}
    max_steps = config.max_steps
    if max_steps is None:
        max_steps = maps.shape.w_g + maps.shape.h_g
    traces = [follow(maps, n.grid, node_scores, max_steps) for n in nodes]
    edges = resolve_edges(nodes, traces)
    result = assemble(nodes, edges, traces, maps, config.sol_eol_threshold)
    validate_result(result)
    return result


# ---------------------------------------------------------------------------
# n-gram rescoring over concatenated grid sequences
# ---------------------------------------------------------------------------


@dataclass
class NGramLM:
    """Simple n-gram model over class ids (1-based).

    ``table`` maps a context tuple of length ``order - 1`` to per-class
    probabilities; unseen contexts fall back to the uniform distribution.
    """

    n_cls: int
    order: int = 3
    table: dict[tuple[int, ...], dict[int, float]] = field(default_factory=dict)

    def prob(self, cls_id: int, prefix: Sequence[int]) -> float:
        ctx = tuple(prefix[-(self.order - 1):]) if self.order > 1 else ()
        row = self.table.get(ctx)
        if row is None:
            return 1.0 / self.n_cls
        return row.get(cls_id, 0.0)

    @classmethod
    def uniform(cls, n_cls: int, order: int = 3) -> "NGramLM":
        return cls(n_cls=n_cls, order=order)

    @classmethod
    def fit(
        cls,
        sequences: Sequence[Sequence[int]],
        n_cls: int,
        order: int = 3,
        smoothing: float = 1.0,
    ) -> "NGramLM":
        counts: dict[tuple[int, ...], dict[int, int]] = defaultdict(lambda: defaultdict(int))
        for seq in sequences:
            for k, c in enumerate(seq):
                ctx = tuple(seq[max(0, k - (order - 1)):k])
                if len(ctx) == order - 1:
                    counts[ctx][c] += 1
        table = {}
        for ctx, row in counts.items():
            total = sum(row.values()) + smoothing * n_cls
            table[ctx] = {
                c: (row.get(c, 0) + smoothing) / total for c in range(1, n_cls + 1)
            }
        return cls(n_cls=n_cls, order=order, table=table)


def line_grid_sequence(line: Line) -> list[tuple[int, int]]:
    """Concatenated time steps for a line: each node grid then its search path."""
    frames: list[tuple[int, int]] = []
    for tr in line.traces:
        frames.extend(tr.visited)
    return frames


def frame_scores(
    maps: PredictionMaps, frames: Sequence[tuple[int, int]]
) -> list[tuple[float, np.ndarray]]:
    """Per-frame (blank probability, class probabilities): blank is 1 - dis."""
    out = []
    for i, j in frames:
        out.append(
            (
                1.0 - float(maps.dis[i - 1, j - 1]),
                maps.cls[i - 1, j - 1].astype(np.float64),
            )
        )
    return out


def beam_search_lm(
    frames: Sequence[tuple[float, np.ndarray]],
    lm: NGramLM,
    beam: int = 16,
    top_k: int | None = None,
) -> list[int]:
    """CTC-style prefix beam search combining frame scores with the LM.

    Repeated symbols merge unless separated by a blank frame; each new
    symbol extension is weighted by the LM probability given the prefix.
    With no pruning (``beam`` large, ``top_k`` None) the returned labeling
    maximizes sum-over-alignments probability times the LM product.
    """
    beams: dict[tuple[int, ...], list[float]] = {(): [1.0, 0.0]}
    for blank_p, probs in frames:
        if top_k is None or top_k >= len(probs):
            cand = range(1, len(probs) + 1)
        else:
            idx = np.lexsort((np.arange(len(probs)), -probs))[:top_k]
            cand = [int(i) + 1 for i in idx]
        new: dict[tuple[int, ...], list[float]] = {}

        def bucket(prefix: tuple[int, ...]) -> list[float]:
            b = new.get(prefix)
            if b is None:
                b = [0.0, 0.0]
                new[prefix] = b
            return b

        for prefix, (pb, pnb) in beams.items():
            total = pb + pnb
            bucket(prefix)[0] += blank_p * total
            if prefix:
                bucket(prefix)[1] += float(probs[prefix[-1] - 1]) * pnb
            for c in cand:
                p_sym = float(probs[c - 1]) * lm.prob(c, prefix)
                if p_sym == 0.0:
                    continue
                ext = bucket(prefix + (c,))
                if prefix and c == prefix[-1]:
                    ext[1] += p_sym * pb
                else:
                    ext[1] += p_sym * total
        ranked = sorted(new.items(), key=lambda kv: (-(kv[1][0] + kv[1][1]), kv[0]))
        beams = dict(ranked[:beam])
    best = min(beams.items(), key=lambda kv: (-(kv[1][0] + kv[1][1]), kv[0]))
    return list(best[0])


def rescore_with_lm(
    maps: PredictionMaps,
    result: PageResult,
    lm: NGramLM,
    beam: int = 16,
    top_k: int | None = None,
) -> PageResult:
    """Re-decode each line's transcript with the LM; geometry is untouched.

    The revised class sequence is paired positionally with the existing
    characters; in the rare case the lengths differ, surplus symbols are
    dropped and surplus characters keep their place in the line with their
    original class.  Lines without frames are returned unchanged.
    """
    new_lines: list[Line] = []
    for line in result.lines:
        frames = line_grid_sequence(line)
        if not frames or not line.chars:
            new_lines.append(line)
            continue
        labels = beam_search_lm(frame_scores(maps, frames), lm, beam=beam, top_k=top_k)
        chars = []
        for m, c in enumerate(line.chars):
            if m < len(labels) and labels[m] != c.cls_id:
                prob = float(maps.cls[c.grid[0] - 1, c.grid[1] - 1][labels[m] - 1])
                chars.append(replace(c, cls_id=labels[m], cls_prob=prob))
            else:
                chars.append(c)
        new_lines.append(
            Line(chars=chars, traces=line.traces, sol_conf=line.sol_conf, eol_conf=line.eol_conf)
        )
    return PageResult(lines=new_lines, dropped=list(result.dropped))
