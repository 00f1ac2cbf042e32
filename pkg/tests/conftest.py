import numpy as np
import pytest
from scipy import ndimage

from supergbd.imagery import RgbdFrame


def smooth_field(rng, h, w, c, scale, amplitude):
    """Band-limited random image with the given channel amplitude."""
    img = rng.standard_normal((h, w, c))
    img = ndimage.gaussian_filter(img, sigma=(scale, scale, 0))
    img = (img - img.min()) / max(np.ptp(img), 1e-9)
    return img * amplitude


def random_voronoi_labels(rng, h, w, n_sites):
    """Connected random partition: nearest-site labeling on the pixel grid."""
    sy = rng.integers(0, h, n_sites)
    sx = rng.integers(0, w, n_sites)
    yy, xx = np.mgrid[0:h, 0:w]
    d = (yy[:, :, None] - sy) ** 2 + (xx[:, :, None] - sx) ** 2
    labels = d.argmin(axis=2)
    # renumber contiguously (duplicate sites can leave empty cells)
    _, labels = np.unique(labels, return_inverse=True)
    return labels.reshape(h, w).astype(np.int32)


def flat_frame(h=16, w=16, rgb=0.5, depth=0.5, frame_id="flat"):
    return RgbdFrame(
        rgb=np.full((h, w, 3), rgb),
        depth=np.full((h, w), depth),
        valid_mask=np.ones((h, w), bool),
        frame_id=frame_id,
    )


def assert_patches_connected(labels):
    """Flood-fill connectivity check, independent of the implementation."""
    h, w = labels.shape
    seen = np.zeros((h, w), bool)
    for pid in range(int(labels.max()) + 1):
        ys, xs = np.where(labels == pid)
        assert len(ys) > 0, f"patch {pid} is empty"
        stack = [(ys[0], xs[0])]
        seen_count = 0
        visited = set()
        while stack:
            y, x = stack.pop()
            if (y, x) in visited:
                continue
            visited.add((y, x))
            seen_count += 1
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] == pid and (ny, nx) not in visited:
                    stack.append((ny, nx))
        assert seen_count == len(ys), f"patch {pid} is disconnected"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
