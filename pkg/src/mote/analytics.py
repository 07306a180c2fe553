"""Routing analytics over recorded gate decisions.

Everything here works on a :class:`RoutingTrace`, a flat numpy view of which
expert each token chose at every layer, tagged by modality.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import EmptySelectionError, ExportIOError, InvalidInputError

MODALITIES = ("all", "text", "visual")


@dataclass
class RoutingTrace:
    probs: np.ndarray  # (L, N, E)
    selected: np.ndarray  # (L, N) top-1 expert
    visual: np.ndarray  # (N,) bool, True for visual tokens
    example_id: np.ndarray  # (N,)

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.selected = np.asarray(self.selected, dtype=np.int64)
        self.visual = np.asarray(self.visual, dtype=bool)
        self.example_id = np.asarray(self.example_id, dtype=np.int64)
        if self.probs.ndim != 3 or self.selected.shape != self.probs.shape[:2]:
            raise InvalidInputError("trace arrays have inconsistent shapes")
        if self.visual.shape != (self.n_tokens,) or self.example_id.shape != (self.n_tokens,):
            raise InvalidInputError("per-token tags must have one entry per token")
        if self.probs.size:
            if np.abs(self.probs.sum(axis=-1) - 1.0).max() > 1e-6:
                raise InvalidInputError("gate probabilities must sum to 1 per (layer, token)")
            if not np.array_equal(self.selected, self.probs.argmax(axis=-1)):
                raise InvalidInputError("selected expert must be the argmax gate")

    @property
    def n_layers(self) -> int:
        return self.probs.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.probs.shape[1]

    @property
    def n_experts(self) -> int:
        return self.probs.shape[2]

    def mask(self, modality: str) -> np.ndarray:
        if modality == "all":
            return np.ones(self.n_tokens, dtype=bool)
        if modality == "visual":
            return self.visual.copy()
        if modality == "text":
            return ~self.visual
        raise InvalidInputError(f"unknown modality filter {modality!r}")

    @classmethod
    def from_records(cls, records, valid, visual, example_id) -> "RoutingTrace":
        """Flatten per-layer model records over the ``valid`` (non-pad) positions of a batch."""
        valid = np.asarray(valid, dtype=bool)
        probs = np.stack([r.probs.detach().double().numpy()[valid] for r in records])
        selected = np.stack([r.top1.numpy()[valid] for r in records])
        ex = np.broadcast_to(np.asarray(example_id)[:, None], valid.shape)[valid]
        return cls(probs, selected, np.asarray(visual, dtype=bool)[valid], ex)

    @classmethod
    def concat(cls, traces: list["RoutingTrace"]) -> "RoutingTrace":
        return cls(
            np.concatenate([t.probs for t in traces], axis=1),
            np.concatenate([t.selected for t in traces], axis=1),
            np.concatenate([t.visual for t in traces]),
            np.concatenate([t.example_id for t in traces]),
        )

    def save(self, path) -> None:
        np.savez(path, probs=self.probs, selected=self.selected, visual=self.visual, example_id=self.example_id)

    @classmethod
    def load(cls, path) -> "RoutingTrace":
        with np.load(path) as z:
            return cls(z["probs"], z["selected"], z["visual"], z["example_id"])


def expert_load_distribution(trace: RoutingTrace, modality: str = "all") -> np.ndarray:
    """``(layers, E)`` matrix: share of filtered tokens whose top-1 expert is each index."""
    m = trace.mask(modality)
    n = int(m.sum())
    if n == 0:
        raise EmptySelectionError(f"trace has no {modality} tokens")
    out = np.zeros((trace.n_layers, trace.n_experts))
    for layer in range(trace.n_layers):
        out[layer] = np.bincount(trace.selected[layer, m], minlength=trace.n_experts) / n
    return out


@dataclass
class ModalityCell:
    text: float
    visual: float
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


def modality_distribution_per_expert(trace: RoutingTrace) -> list[list[ModalityCell]]:
    """For each (layer, expert), the text/visual split of the tokens routed there.

    Cells that received no tokens are flagged with ``count == 0`` and NaN fractions.
    """
    if trace.visual.all() or not trace.visual.any():
        raise EmptySelectionError("modality split needs both text and visual tokens")
    grid = []
    for layer in range(trace.n_layers):
        row = []
        for e in range(trace.n_experts):
            hit = trace.selected[layer] == e
            n = int(hit.sum())
            if n == 0:
                row.append(ModalityCell(math.nan, math.nan, 0))
                continue
            vis = int((hit & trace.visual).sum())
            row.append(ModalityCell((n - vis) / n, vis / n, n))
        grid.append(row)
    return grid


def total_variation_by_layer(trace: RoutingTrace) -> list[float]:
    """Total-variation distance between text and visual load distributions per layer."""
    t = expert_load_distribution(trace, "text")
    v = expert_load_distribution(trace, "visual")
    return (0.5 * np.abs(t - v).sum(axis=1)).tolist()


def pca_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project rows of ``x`` onto the top-2 principal axes.

    Returns ``(projection, components, explained_variance)``. Each component's
    largest-magnitude entry is made positive so results are deterministic.
    """
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / max(1, x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    n_comp = min(2, evecs.shape[1])
    comps = evecs[:, :n_comp].T.copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    if n_comp < 2:
        comps = np.vstack([comps, np.zeros((2 - n_comp, x.shape[1]))])
        evals = np.concatenate([evals, np.zeros(2 - n_comp)])
    return centred @ comps.T, comps, evals[:2]


@dataclass
class PathwayResult:
    pathways: list[tuple[tuple[int, ...], int]]  # top-k (expert sequence, count), most frequent first
    total_tokens: int
    unreturned_tokens: int
    projection: np.ndarray  # (N_filtered, 2)
    components: np.ndarray
    explained_variance: np.ndarray


def top_pathways(trace: RoutingTrace, modality: str = "all", k: int = 10, pca_input: str = "probs") -> PathwayResult:
    """The ``k`` most frequent layer-by-layer expert sequences.

    Ties in count are broken lexicographically by sequence. ``pca_input``
    selects what feeds the 2-D projection: concatenated gate probabilities
    (``"probs"``) or one-hot hard assignments (``"onehot"``).
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    m = trace.mask(modality)
    sel = trace.selected[:, m].T  # (N, L)
    counts = Counter(map(tuple, sel.tolist()))
    ranked = sorted(counts.items(), key=lambda pc: (-pc[1], pc[0]))
    top = ranked[:k]
    returned = sum(c for _, c in top)
    if pca_input == "probs":
        feats = trace.probs[:, m, :].transpose(1, 0, 2).reshape(sel.shape[0], -1)
    elif pca_input == "onehot":
        feats = np.eye(trace.n_experts)[sel].reshape(sel.shape[0], -1)
    else:
        raise InvalidInputError(f"unknown pca_input {pca_input!r}")
    if sel.shape[0]:
        proj, comps, ev = pca_2d(feats)
    else:
        proj, comps, ev = np.zeros((0, 2)), np.zeros((2, feats.shape[1])), np.zeros(2)
    return PathwayResult(top, int(sel.shape[0]), int(sel.shape[0]) - returned, proj, comps, ev)


# --- exports -----------------------------------------------------------------


def analyze(trace: RoutingTrace, k: int = 10) -> dict:
    """Bundle every analytic into one plain-data results dict."""
    loads = {}
    for mod in MODALITIES:
        try:
            loads[mod] = expert_load_distribution(trace, mod)
        except EmptySelectionError:
            continue
    results = {"n_layers": trace.n_layers, "n_experts": trace.n_experts, "n_tokens": trace.n_tokens, "loads": loads}
    if "text" in loads and "visual" in loads:
        results["modality_per_expert"] = modality_distribution_per_expert(trace)
        results["tv_text_vs_visual"] = total_variation_by_layer(trace)
    results["pathways"] = {
        mod: top_pathways(trace, mod, k) for mod in MODALITIES if mod in loads
    }
    return results


def _records(results: dict) -> list[dict]:
    rows = []
    for mod, mat in results["loads"].items():
        for layer, row in enumerate(mat):
            for e, frac in enumerate(row):
                rows.append({"layer": layer, "expert": e, "modality": mod, "fraction": float(frac)})
    return rows


def _fmt(x: float) -> str:
    return format(x, ".17g")


def _svg(results: dict) -> str:
    loads = results["loads"]
    e = results["n_experts"]
    palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"]
    bar_h, gap, width, left = 18, 6, 400, 120
    lines = []
    y = 20
    for mod, mat in loads.items():
        lines.append(f'<text x="4" y="{y + 12}" font-size="12" font-weight="bold">{escape(mod)} tokens</text>')
        y += bar_h
        for layer, row in enumerate(mat):
            lines.append(f'<text x="4" y="{y + 13}" font-size="11">layer {layer}</text>')
            x = float(left)
            for i, frac in enumerate(row):
                w = width * float(frac)
                lines.append(
                    f'<rect x="{x:.3f}" y="{y}" width="{w:.3f}" height="{bar_h}" '
                    f'fill="{palette[i % len(palette)]}"><title>expert {i}: {frac:.4f}</title></rect>'
                )
                x += w
            y += bar_h + gap
        y += gap
    legend = "".join(
        f'<rect x="{left + 70 * i}" y="{y}" width="10" height="10" fill="{palette[i % len(palette)]}"/>'
        f'<text x="{left + 70 * i + 14}" y="{y + 9}" font-size="10">expert {i}</text>'
        for i in range(e)
    )
    height = y + 24
    body = "\n".join(lines)
    return (
        f'<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 20}" height="{height}">\n'
        f"{body}\n{legend}\n</svg>\n"
    )


def _json_payload(results: dict) -> dict:
    out = {"loads": _records(results)}
    if "modality_per_expert" in results:
        out["modality_per_expert"] = [
            {"layer": l, "expert": e, "text": c.text if not c.empty else None,
             "visual": c.visual if not c.empty else None, "count": c.count}
            for l, row in enumerate(results["modality_per_expert"])
            for e, c in enumerate(row)
        ]
        out["tv_text_vs_visual"] = results["tv_text_vs_visual"]
    out["pathways"] = {
        mod: [{"path": list(p), "count": c} for p, c in res.pathways]
        for mod, res in results.get("pathways", {}).items()
    }
    return out


def export_analytics(results: dict, path, fmt: str) -> Path:
    """Write ``results`` as ``csv``, ``json`` or ``svg`` to ``path``.

    CSV columns are ``layer, expert, modality, fraction``; fractions carry 17
    significant digits so the float values round-trip exactly.
    """
    path = Path(path)
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["layer", "expert", "modality", "fraction"])
                for r in _records(results):
                    w.writerow([r["layer"], r["expert"], r["modality"], _fmt(r["fraction"])])
        elif fmt == "json":
            # json.dumps emits shortest round-trip reprs, which are lossless
            path.write_text(json.dumps(_json_payload(results), indent=1))
        elif fmt == "svg":
            path.write_text(_svg(results))
        else:
            raise InvalidInputError(f"unknown export format {fmt!r}")
    except OSError as e:
        raise ExportIOError(f"failed to write {path}: {e}") from e
    return path


def read_loads_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out: dict[str, dict[tuple[int, int], float]] = {}
    for r in rows:
        out.setdefault(r["modality"], {})[(int(r["layer"]), int(r["expert"]))] = float(r["fraction"])
    mats = {}
    for mod, cells in out.items():
        n_l = 1 + max(l for l, _ in cells)
        n_e = 1 + max(e for _, e in cells)
        m = np.zeros((n_l, n_e))
        for (l, e), v in cells.items():
            m[l, e] = v
        mats[mod] = m
    return mats
