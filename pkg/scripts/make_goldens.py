"""Regenerate the frozen format reference files under tests/golden/.

Run from the repository root: python3 scripts/make_goldens.py
The outputs are committed; tests compare against them byte-for-byte.
"""

from pathlib import Path

import numpy as np

from swarmlens import io_formats as iof
from swarmlens.flow import FlowField, GrayImage

OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)

    field = FlowField(np.array([[0.0, 0.5], [-1.0, 2.0]]),
                      np.array([[1.0, -0.25], [0.125, -2.0]]))
    iof.write_flo(field, OUT / "flow_2x2.flo")

    iof.write_map(np.array([[0.0, 0.5, 1.0], [1.5, -0.5, 0.25]]), OUT / "map_3x2.flo")

    gray = GrayImage(np.arange(12, dtype=np.float64).reshape(3, 4) / 255.0)
    iof.write_pgm(gray, OUT / "frame_4x3.pgm")

    rgb = (np.arange(12, dtype=np.float64).reshape(2, 2, 3) / 255.0).transpose(2, 0, 1)
    iof.write_ppm(rgb, OUT / "overlay_2x2.ppm")

    iof.write_checkpoint({"note": "golden", "seed": 7},
                         [("w", np.array([[1.5, -2.0]])), ("b", np.array([0.25]))],
                         OUT / "tiny.ckpt")

    for p in sorted(OUT.iterdir()):
        print(f"{p.name}: {p.stat().st_size} bytes")


if __name__ == "__main__":
    main()
