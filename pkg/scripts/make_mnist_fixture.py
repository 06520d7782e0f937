"""Write the 5000-image MNIST subset bundled with mlxtend as gzipped IDX files.

Usage: python scripts/make_mnist_fixture.py [outdir]
Needs ``mlxtend`` (``pip install --no-deps mlxtend`` is enough).
"""
import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from openset_cae.data import save_idx

out = Path(sys.argv[1] if len(sys.argv) > 1 else "tests/data")
out.mkdir(parents=True, exist_ok=True)
X, y = mnist_data()
save_idx(
    X.reshape(-1, 28, 28).astype(np.uint8),
    y,
    out / "mnist5k-images-idx3-ubyte.gz",
    out / "mnist5k-labels-idx1-ubyte.gz",
    compress=True,
)
print(f"wrote {len(y)} images to {out}")
