"""Convert the digits bundled with the npm ``mnist`` package (MIT) into IDX files.

The package ships 10,000 real MNIST digits as JSON arrays of pixel/255
rounded to 3 decimals; rounding back to bytes recovers the pixels exactly.
Each class is split in order: the first 80% go to the train files, the rest
to the test files.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/mnist_from_npm.py package/src/digits data/mnist-10k
"""

import json
import sys
from pathlib import Path

import numpy as np

from smartensemble.data import write_idx


def main(digits_dir, out_dir, train_fraction=0.8):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        with open(Path(digits_dir) / f"{digit}.json") as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        pixels = np.rint(flat * 255).astype(np.uint8).reshape(-1, 28, 28)
        assert np.allclose(np.round(pixels.reshape(-1) / 255, 3), flat)
        cut = int(round(train_fraction * len(pixels)))
        train_x.append(pixels[:cut])
        test_x.append(pixels[cut:])
        train_y.append(np.full(cut, digit, dtype=np.uint8))
        test_y.append(np.full(len(pixels) - cut, digit, dtype=np.uint8))
    write_idx(out / "train-images-idx3-ubyte.gz", out / "train-labels-idx1-ubyte.gz",
              np.concatenate(train_x), np.concatenate(train_y))
    write_idx(out / "t10k-images-idx3-ubyte.gz", out / "t10k-labels-idx1-ubyte.gz",
              np.concatenate(test_x), np.concatenate(test_y))
    print(f"train {sum(map(len, train_y))}, test {sum(map(len, test_y))} -> {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
