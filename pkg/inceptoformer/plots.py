"""Static SVG figures: confusion heat maps and class-distribution bars."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402

# Fixed ids and no date metadata keep reruns byte-identical.
plt.rcParams["svg.hashsalt"] = "inceptoformer"
plt.rcParams["svg.fonttype"] = "none"
_SVG_METADATA = {"Date": None, "Creator": None}


def _class_names(n):
    return list(CLASS_NAMES[:n]) if n <= len(CLASS_NAMES) else [str(i) for i in range(n)]


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)
    return path


def plot_confusion(matrix, path, title="Confusion matrix"):
    """Heat map of a row-normalised confusion matrix, cells annotated in percent."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    names = _class_names(n)
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    image = ax.imshow(matrix, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(n):
        for j in range(n):
            color = "white" if matrix[i, j] > 0.5 else "black"
            ax.text(j, i, f"{100 * matrix[i, j]:.1f}", ha="center", va="center", color=color, fontsize=9)
    ax.set_xticks(range(n), names, rotation=30)
    ax.set_yticks(range(n), names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    ax.set_title(title)
    fig.colorbar(image, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def plot_class_distribution(before, after, path, title="Segments per class"):
    """Side-by-side bars of class counts before and after oversampling."""
    labels = sorted(set(before) | set(after))
    names = _class_names(max(labels) + 1)
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.bar(x - 0.2, [before.get(c, 0) for c in labels], width=0.4, label="original")
    ax.bar(x + 0.2, [after.get(c, 0) for c in labels], width=0.4, label="oversampled")
    ax.set_xticks(x, [names[c] for c in labels])
    ax.set_ylabel("Segments")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
