"""Shapelet-based explanations and masking faithfulness evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import RFFModel, as_input, forward_joint
from .shapelets import best_match


@dataclass
class ExplanationEntry:
    shapelet_id: int
    length: int
    activation: float
    t_star: int
    d_min: float
    subsequence: np.ndarray  # 2 x L copy of the matched window
    shapelet: np.ndarray  # 2 x L copy of the shapelet values


def frame_activations(model: RFFModel, frames) -> np.ndarray:
    with torch.no_grad():
        x = as_input(frames)
        return model.shapelets.activations(x if x.dim() == 3 else x[None]).numpy()


def explain(model: RFFModel, frame, top_k: int = 5) -> list[ExplanationEntry]:
    """Top-``top_k`` shapelets by activation with their best-matching windows."""
    K = model.shapelets.K
    if not 1 <= top_k <= K:
        raise ValueError(f"top_k must be in [1, {K}], got {top_k}")
    x = np.asarray(getattr(frame, "samples", frame), dtype=np.float64)
    a = frame_activations(model, x)[0]
    order = sorted(range(K), key=lambda k: (-a[k], k))[:top_k]
    entries = []
    for k in order:
        s = model.shapelets.shapelet(k)
        t, d = best_match(x, s)
        L = s.shape[1]
        entries.append(ExplanationEntry(k, L, float(a[k]), t, d, x[:, t:t + L].copy(), s))
    return entries


def mask_subsequence(frame, start: int, length: int, mode: str = "zeros", seed: int = 0) -> np.ndarray:
    """Copy of ``frame`` with columns [start, start+length) replaced in both rows."""
    x = np.array(getattr(frame, "samples", frame), dtype=np.float64)
    T = x.shape[1]
    if start < 0 or length < 0 or start + length > T:
        raise ValueError(f"mask window [{start}, {start + length}) outside [0, {T})")
    if length == 0:
        return x
    if mode == "zeros":
        x[:, start:start + length] = 0.0
    elif mode == "noise":
        rms = np.sqrt(np.mean(x * x))
        x[:, start:start + length] = np.random.default_rng(seed).normal(0, rms, size=(2, length))
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return x


def _shapelet_ids_of_length(model: RFFModel, L: int) -> list[int]:
    return [k for k, l in enumerate(model.shapelets.shapelet_lengths()) if l == L]


def faithfulness_eval(model: RFFModel, dataset, lengths=(8, 16, 32), seed: int = 0, mode: str = "zeros") -> dict:
    """Accuracy drop from masking the top shapelet's matched window vs a random window.

    For each length L, every frame is masked twice: once at the best-match
    window of its highest-activation length-L shapelet and once at a seeded
    uniformly random window of the same length.  Both arms use the same
    frames.
    """
    frames = np.asarray(dataset.frames, dtype=np.float64)
    labels = dataset.device_labels
    N, _, T = frames.shape
    _, logits = forward_joint(model, frames)
    base = float(np.mean(np.argmax(logits, axis=1) == labels))
    A = frame_activations(model, frames)
    report = {"baseline_accuracy": base, "frames": int(N), "mode": mode, "lengths": {}}
    for L in lengths:
        ids = _shapelet_ids_of_length(model, L)
        if not ids:
            raise ValueError(f"no shapelet of length {L} in the bank")
        rng = np.random.default_rng([seed, L])
        rand_starts = rng.integers(0, T - L + 1, size=N)
        top = [ids[int(np.argmax(A[i, ids]))] for i in range(N)]
        shp_starts = np.array([best_match(frames[i], model.shapelets.shapelet(top[i]))[0] for i in range(N)])
        masked_s = np.stack([mask_subsequence(frames[i], shp_starts[i], L, mode, seed=seed + i) for i in range(N)])
        masked_r = np.stack([mask_subsequence(frames[i], rand_starts[i], L, mode, seed=seed + i) for i in range(N)])
        acc_s = float(np.mean(np.argmax(forward_joint(model, masked_s)[1], axis=1) == labels))
        acc_r = float(np.mean(np.argmax(forward_joint(model, masked_r)[1], axis=1) == labels))
        report["lengths"][L] = {
            "shapelet_accuracy": acc_s, "random_accuracy": acc_r,
            "shapelet_drop": base - acc_s, "random_drop": base - acc_r,
            "shapelet_starts": shp_starts.tolist(), "random_starts": rand_starts.tolist(),
            "top_shapelets": top,
        }
    return report


def export_explanation(entries: list[ExplanationEntry], frame, path, fmt: str = "csv", frame_id: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.asarray(getattr(frame, "samples", frame), dtype=np.float64)
    if fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_id", "shapelet_id", "length", "t_star", "activation",
                        "channel", "offset", "signal_value", "shapelet_value"])
            for e in entries:
                for ch, name in enumerate(("I", "Q")):
                    for off in range(e.length):
                        w.writerow([frame_id, e.shapelet_id, e.length, e.t_star, repr(e.activation),
                                    name, off, repr(float(e.subsequence[ch, off])),
                                    repr(float(e.shapelet[ch, off]))])
    elif fmt == "svg":
        path.write_text(_render_svg(entries, x, frame_id), encoding="utf-8")
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return path


_COLORS = ("#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2", "#bcbd22")


def _render_svg(entries, x: np.ndarray, frame_id: int) -> str:
    W, H, pad = 900, 220, 40
    T = x.shape[1]
    lo, hi = float(x.min()), float(x.max())
    for e in entries:
        lo, hi = min(lo, float(e.shapelet.min())), max(hi, float(e.shapelet.max()))
    span = hi - lo or 1.0

    def pts(values, t0, row):
        y0 = pad + row * (H + pad)
        return " ".join(f"{pad + (t0 + i) * (W - 2 * pad) / (T - 1):.2f},"
                        f"{y0 + H - (v - lo) / span * H:.2f}" for i, v in enumerate(values))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{2 * H + 3 * pad}" '
           f'viewBox="0 0 {W} {2 * H + 3 * pad}" font-family="sans-serif" font-size="12">',
           f'<title>frame {frame_id} shapelet matches</title>']
    for row, name in enumerate(("I", "Q")):
        y0 = pad + row * (H + pad)
        out.append(f'<rect x="{pad}" y="{y0}" width="{W - 2 * pad}" height="{H}" fill="none" stroke="#999"/>')
        out.append(f'<text x="8" y="{y0 + H / 2}">{name}</text>')
        out.append(f'<polyline fill="none" stroke="#1f77b4" stroke-width="1" points="{pts(x[row], 0, row)}"/>')
        for j, e in enumerate(entries):
            c = _COLORS[j % len(_COLORS)]
            out.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" stroke-dasharray="5,3" '
                       f'points="{pts(e.shapelet[row], e.t_star, row)}"/>')
            if row == 0:
                tx = pad + e.t_star * (W - 2 * pad) / (T - 1)
                out.append(f'<text x="{tx:.2f}" y="{y0 - 6 - 12 * (j % 2)}" fill="{c}">'
                           f'S#{e.shapelet_id} t={e.t_star}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
