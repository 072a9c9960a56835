"""Matplotlib figures written straight to files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_matrix(matrix, path, key: str = "miou") -> Path:
    """Heat map of a transfer matrix: rows are clean + (source, attack), columns are models."""
    cols = matrix.models
    labels = ["clean"]
    data = [[matrix.clean.get(m, np.nan) for m in cols]]
    for r in matrix.rows:
        labels.append(f"{r['source']} / {r['attack']}")
        data.append([r["cells"].get(m, {}).get(key, np.nan) if not r["cells"].get(m, {}).get("error") else np.nan
                     for m in cols])
    arr = 100 * np.array(data, dtype=float)
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(cols), 0.9 + 0.45 * len(labels)))
    im = ax.imshow(arr, cmap="viridis", vmin=0, vmax=100, aspect="auto")
    ax.set_xticks(range(len(cols)), cols, rotation=20)
    ax.set_yticks(range(len(labels)), labels)
    for i in range(arr.shape[0]):
        for j in range(arr.shape[1]):
            if np.isfinite(arr[i, j]):
                ax.text(j, i, f"{arr[i, j]:.1f}", ha="center", va="center",
                        color="white" if arr[i, j] < 50 else "black", fontsize=8)
    ax.set_title(f"mIoU (%), {key}")
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_sweep(table, path) -> Path:
    """One line per model across the swept values."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = range(len(table.rows))
    for m in table.models:
        ys = [100 * (r["cells"][m].get("miou") or np.nan) for r in table.rows]
        ax.plot(xs, ys, marker="o", label=m + (" (source)" if m == table.source else ""))
    ax.set_xticks(list(xs), [r["label"] for r in table.rows], rotation=20)
    ax.set_xlabel(table.kind)
    ax.set_ylabel("mIoU (%)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_trace(records: list[list[dict]], path, keys=("combined", "l_ex", "l_in", "loss")) -> Path:
    """Per-iteration losses averaged over images."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for key in keys:
        rows = [[r[key] for r in recs] for recs in records if recs and key in recs[0]]
        if rows:
            ax.plot(np.mean(rows, axis=0), label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("value")
    if ax.lines:
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_simmap(image, adv_image, clean_map, adv_map, ref, path) -> Path:
    """Clean and adversarial similarity maps side by side; ``ref`` in map coordinates."""
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    axes[0].imshow(np.clip(np.asarray(image), 0, 1))
    axes[0].set_title("clean image")
    axes[1].imshow(np.asarray(clean_map), cmap="magma", vmin=-1, vmax=1)
    axes[1].set_title("clean similarity")
    axes[2].imshow(np.clip(np.asarray(adv_image), 0, 1))
    axes[2].set_title("adversarial image")
    im = axes[3].imshow(np.asarray(adv_map), cmap="magma", vmin=-1, vmax=1)
    axes[3].set_title("adversarial similarity")
    for ax in (axes[1], axes[3]):
        ax.plot(ref[1], ref[0], marker="x", color="cyan", markersize=8)
    for ax in axes:
        ax.axis("off")
    fig.colorbar(im, ax=list(axes), shrink=0.8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
