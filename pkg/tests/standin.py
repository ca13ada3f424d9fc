"""Real-image stand-in for Fashion-MNIST when the dataset is not available locally.

scikit-learn ships the 8x8 UCI handwritten digits; they are upsampled to
28x28 and written in the Fashion-MNIST IDX file layout so the desk-scale
experiments exercise the same loader path.
"""

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

from tnasnn.data import write_idx

N_TRAIN = 1200


def write_digits_idx(root):
    digits = load_digits()
    images = zoom(digits.images / 16.0, (1, 3.5, 3.5), order=1)
    images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    order = np.random.default_rng(2024).permutation(len(images))
    images, labels = images[order], digits.target[order].astype(np.uint8)
    splits = {"train": slice(0, N_TRAIN), "t10k": slice(N_TRAIN, None)}
    for prefix, part in splits.items():
        write_idx(root / f"{prefix}-images-idx3-ubyte", images[part])
        write_idx(root / f"{prefix}-labels-idx1-ubyte", labels[part])
    return root
