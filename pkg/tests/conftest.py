import json

import numpy as np
import pytest
from safetensors.numpy import save_file

from patchpurify import BicubicUpscaler, ImageTensor


def make_generator_weights(
    rng: np.random.Generator,
    scale: int,
    features: int = 8,
    blocks: int = 1,
    growth: int = 4,
    channels: int = 3,
    jitter: float = 0.02,
) -> dict[str, np.ndarray]:
    """Small identity-flavored generator weights.

    The center taps route input channels straight through the trunk and the
    upsampling stages, so the network behaves like a slightly noisy
    nearest-neighbor upscaler: outputs stay in a sane range and tile seams
    are exercised without a trained model.
    """
    w: dict[str, np.ndarray] = {}

    def conv(name, ci, co, identity=False):
        k = rng.standard_normal((co, ci, 3, 3)) * jitter / np.sqrt(ci * 9.0)
        if identity:
            for o in range(min(ci, co)):
                k[o, o, 1, 1] += 1.0
        w[name + ".weight"] = k.astype(np.float32)
        w[name + ".bias"] = (rng.standard_normal(co) * jitter * 0.1).astype(np.float32)

    in_ch = channels * (4 if scale == 2 else 1)
    conv("conv_first", in_ch, features, identity=True)
    for b in range(blocks):
        for r in (1, 2, 3):
            for c in range(1, 6):
                ci = features + (c - 1) * growth
                co = growth if c < 5 else features
                conv(f"body.{b}.rdb{r}.conv{c}", ci, co)
    conv("conv_body", features, features)
    conv("conv_up1", features, features, identity=True)
    conv("conv_up2", features, features, identity=True)
    conv("conv_hr", features, features, identity=True)
    conv("conv_last", features, channels, identity=True)
    return w


def write_artifact(directory, scale, seed=0, channels=3, features=8, blocks=1, growth=4,
                   version="fixture-1"):
    rng = np.random.default_rng(seed + scale)
    weights = make_generator_weights(rng, scale, features, blocks, growth, channels)
    path = directory / f"gen_x{scale}.safetensors"
    save_file(weights, str(path))
    path.with_suffix(".json").write_text(json.dumps({
        "scale": scale, "channels": channels, "version": version,
        "features": features, "blocks": blocks, "growth": growth,
    }))
    return path


@pytest.fixture(scope="session")
def artifact_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("artifacts")
    write_artifact(d, 4)
    write_artifact(d, 2)
    return d


@pytest.fixture(scope="session")
def classical():
    return BicubicUpscaler()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h, w, c=3) -> ImageTensor:
    return ImageTensor.from_array(rng.uniform(0.0, 1.0, size=(h, w, c)))
