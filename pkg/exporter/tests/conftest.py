import numpy as np
import pytest
from PIL import Image


@pytest.fixture(scope="session")
def demo_image(tmp_path_factory):
    """A small RGB test image: gradients plus a bright blob."""
    h, w = 48, 64
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.stack(
        [
            xx / w * 255,
            yy / h * 255,
            255 * np.exp(-((xx - 40) ** 2 + (yy - 20) ** 2) / 200.0),
        ],
        axis=-1,
    ).astype(np.uint8)
    path = tmp_path_factory.mktemp("images") / "demo.png"
    Image.fromarray(img).save(path)
    return path
