"""Optional figures written next to the CSV outputs (non-interactive backend)."""

from __future__ import annotations

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> None:
    # no creation date or software stamp, so reruns give identical files
    fig.savefig(path, dpi=100, metadata={"Software": None})
    _pyplot().close(fig)


def heatmap(matrix, path, title: str = "", xlabel: str = "", ylabel: str = "", cmap: str = "viridis") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(np.asarray(matrix), aspect="auto", interpolation="nearest", cmap=cmap)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)


def heatmap_grid(panels: list[tuple[str, np.ndarray]], path, xlabel: str = "key", ylabel: str = "query") -> None:
    plt = _pyplot()
    n = len(panels)
    cols = min(n, 4)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.8 * rows), squeeze=False)
    for ax in axes.ravel()[n:]:
        ax.axis("off")
    for ax, (title, m) in zip(axes.ravel(), panels):
        ax.imshow(m, aspect="auto", interpolation="nearest", cmap="viridis", vmin=0.0)
        ax.set_title(title, fontsize=9)
        ax.set_xlabel(xlabel, fontsize=8)
        ax.set_ylabel(ylabel, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def lines(x, series: dict[str, np.ndarray], path, title: str = "", xlabel: str = "", ylabel: str = "", logx=False, logy=False) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, y in series.items():
        ax.plot(x, y, marker="o" if len(x) <= 32 else None, label=label)
    if logx:
        ax.set_xscale("log", base=2)
    if logy:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def forecast(history_t, history, pred_t, pred, path, truth=None, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(history_t, history, color="0.4", label="input")
    if truth is not None:
        ax.plot(pred_t, truth, color="0.1", linestyle="--", label="truth")
    ax.plot(pred_t, pred, color="tab:red", label="forecast")
    ax.set_title(title)
    ax.set_xlabel("timestamp")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
