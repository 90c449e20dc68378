import logging
from pathlib import Path

import numpy as np
import matplotlib
matplotlib.use("Agg")  # Figures are only written to files
import matplotlib.pyplot as plt

from .errors import InvalidArgumentError, ShapeMismatchError
from .tools import atomic_path

logger = logging.getLogger("Plotting")


def _as_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    grid = np.squeeze(grid)
    if grid.ndim != 2:
        raise ShapeMismatchError(f"🚨 Only 2D grids can be plotted (got shape {grid.shape})")
    return grid


def write_pgm(path, grid, title: str = "") -> Path:
    """Binary 8-bit grayscale PGM, min mapped to black and max to white, with the range in a comment line."""
    grid = _as_grid(grid)
    lo, hi = float(grid.min()), float(grid.max())
    span = hi - lo
    pixels = np.zeros(grid.shape, dtype=np.uint8) if span == 0 else np.round((grid - lo) / span * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    comment = f"# {title + ' ' if title else ''}min={lo:.6g} max={hi:.6g}"
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(f"P5\n{comment}\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii"))
            f.write(pixels.tobytes())
    return path


def write_png(path, grid, title: str = "", cmap: str = "jet") -> Path:
    grid = _as_grid(grid)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    image = ax.imshow(grid, cmap=cmap, aspect="equal")
    fig.colorbar(image, ax=ax)
    ax.set_title(f"{title + ' ' if title else ''}[{grid.min():.4g}, {grid.max():.4g}]")
    with atomic_path(path) as tmp:
        fig.savefig(tmp, format="png", dpi=100)
    plt.close(fig)
    return path


def plot_grid(path, grid, title: str = "") -> Path:
    """Chooses the image format from the file suffix (.pgm or .png)."""
    suffix = Path(path).suffix.lower()
    logger.info(f"Plotting a {np.shape(grid)} grid to '{path}'")
    if suffix == ".pgm":
        return write_pgm(path, grid, title)
    if suffix == ".png":
        return write_png(path, grid, title)
    raise InvalidArgumentError(f"🚨 Unknown image format '{suffix}' (expected .pgm or .png)")
