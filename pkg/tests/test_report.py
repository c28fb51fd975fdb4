import numpy as np
import pytest

from nsmae.model import NSMAE
from nsmae.report import plot_ablation, plot_frame, plot_training, plot_transfer, render_frame, write_frame_render

PNG = b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def frame(small_cfg, small_geom, small_samples):
    return render_frame(NSMAE(small_cfg, small_geom), small_samples[0], 0.5, 0.9, seed=2)


def test_frame_render_in_metres(frame, small_geom):
    lo, hi = small_geom.depth_span
    assert frame.color.shape[-1] == 3 and 0 <= frame.color.min() and frame.color.max() <= 1
    assert frame.depth_per.max() <= hi - lo + 1e-9
    assert set(frame.errors) == {"color", "depth_per", "depth_bev"}


def test_written_files(frame, tmp_path):
    paths = write_frame_render(frame, str(tmp_path), "x")
    for p in paths.values():
        assert (tmp_path / p).exists() or __import__("os").path.exists(p)
    kinds = {p.rsplit(".", 1)[1] for p in paths.values()}
    assert kinds == {"ppm", "pgm"}


def test_figures_are_png(frame, tmp_path):
    plot_frame(frame, str(tmp_path / "f.png"), "t")
    steps = [{"step": i, "epoch": 1 + i // 2, "lr": 1e-3, "color": 1.0 / (i + 1), "depth_per": 0.3, "depth_bev": 0.2, "total": 2.0 / (i + 1), "grad_norm": 1.0} for i in range(6)]
    epochs = [{"epoch": e, "color": 0.1, "depth_per": 0.3, "depth_bev": 0.2, "total": 1.0 / e, "best_total": 1.0 / e, "improved": 1} for e in (1, 2, 3)]
    plot_training(steps, epochs, str(tmp_path / "t.png"))
    rows = [{"setting": s, "masking": m, "color": 0.1, "depth_per": 0.2, "depth_bev": 0.3, "total_all": 1.0} for s in ("color", "all") for m in ("on", "off")]
    plot_ablation(rows, str(tmp_path / "a.png"))
    plot_transfer([{"fraction": f, "seed": s, "pretrained": 0.6, "scratch": 0.5 + s / 10} for f in (0.1, 1.0) for s in range(3)], str(tmp_path / "p.png"))
    for name in ("f", "t", "a", "p"):
        assert (tmp_path / f"{name}.png").read_bytes()[:8] == PNG
