"""Synthetic bars dataset, fixed domain-knowledge filters and the toy scenarios.

Each image is 3x28x28 and holds one 1-pixel-wide bar of length 3*(label+3)
in a single color channel on a zero background.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .dan import Architecture, ConvSpec

IMAGE_SHAPE = (3, 28, 28)
N_CLASSES = 5
CHANNELS = {"red": 0, "green": 1, "blue": 2}
VARIANTS = {
    # name: (channel, orientation)
    "red-horizontal": ("red", "horizontal"),
    "red-vertical": ("red", "vertical"),
    "green-horizontal": ("green", "horizontal"),
}
VARIANT_ALIASES = {
    "original": "red-horizontal",
    "horizontal": "red-horizontal",
    "transposed": "red-vertical",
    "vertical": "red-vertical",
    "new-channel": "green-horizontal",
    "channel-switch": "green-horizontal",
}

BARS_MAGIC = b"BARS"
BARS_VERSION = 1


def bar_length(label: int) -> int:
    return 3 * (label + 3)


def canonical_variant(name: str) -> str:
    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ValueError(f"unknown bars variant {name!r}; expected one of {sorted(VARIANTS)}")
    return name


@dataclass(frozen=True)
class BarsConfig:
    variant: str = "red-horizontal"
    n_examples: int = 1000
    split: float = 0.75
    seed: int = 0
    # keeps every bar pixel under the center tap of a valid 5x5 conv
    margin: int = 2

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.n_examples < N_CLASSES:
            raise ValueError(f"need at least {N_CLASSES} examples, got {self.n_examples}")
        if not 0.0 < self.split < 1.0:
            raise ValueError(f"split must lie in (0, 1), got {self.split}")
        longest = bar_length(N_CLASSES - 1)
        if IMAGE_SHAPE[1] - 2 * self.margin < longest or self.margin < 0:
            raise ValueError(f"margin {self.margin} leaves no room for a bar of length {longest}")


@dataclass
class Dataset:
    x: np.ndarray  # [N, 3, 28, 28] float64
    y: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class BarsData:
    train: Dataset
    test: Dataset
    config: BarsConfig


def draw_bar(label: int, channel: str, orientation: str, row: int, col: int) -> np.ndarray:
    img = np.zeros(IMAGE_SHAPE)
    length = bar_length(label)
    c = CHANNELS[channel]
    if orientation == "horizontal":
        img[c, row, col:col + length] = 1.0
    else:
        img[c, col:col + length, row] = 1.0
    return img


def gen_bars(cfg: BarsConfig) -> BarsData:
    """Class-balanced bars images with a random train/test index partition."""
    rng = np.random.default_rng(cfg.seed)
    channel, orientation = VARIANTS[cfg.variant]
    n, size, m = cfg.n_examples, IMAGE_SHAPE[1], cfg.margin
    labels = rng.permutation(np.arange(n) % N_CLASSES)
    x = np.zeros((n, *IMAGE_SHAPE))
    for i, lab in enumerate(labels):
        length = bar_length(int(lab))
        # "row" is the bar's fixed coordinate, "col" where it starts along its length
        row = rng.integers(m, size - m)
        col = rng.integers(m, size - m - length + 1)
        x[i] = draw_bar(int(lab), channel, orientation, row, col)
    n_train = int(round(n * cfg.split))
    y = labels.astype(np.int64)
    return BarsData(Dataset(x[:n_train], y[:n_train]), Dataset(x[n_train:], y[n_train:]), cfg)


def make_bar_filter(orientation: str = "horizontal", channel: str = "red", size: int = 5) -> np.ndarray:
    """``[3, size, size]`` filter with ones along the center row/column of one channel."""
    f = np.zeros((3, size, size))
    mid = size // 2
    if orientation == "horizontal":
        f[CHANNELS[channel], mid, :] = 1.0
    elif orientation == "vertical":
        f[CHANNELS[channel], :, mid] = 1.0
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    return f


def corner_filter_v() -> np.ndarray:
    """3x3 filter matching a patch that is 1 at the four corners and 0 elsewhere."""
    return np.array([[1.0, -1.0, 1.0],
                     [-1.0, -1.0, -1.0],
                     [1.0, -1.0, 1.0]])


def toy_network(n_classes: int = N_CLASSES) -> Architecture:
    """conv(3->1, 5x5) -> relu -> pool -> conv(1->20, 5x5) -> relu -> pool -> fc 320x50 -> relu -> fc 50xK."""
    return Architecture(IMAGE_SHAPE, [ConvSpec(1, 5), ConvSpec(20, 5)], [50], n_classes)


# --------------------------------------------------------------------------
# scenarios

@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    variant: str
    first_init: str  # "bar", "bar+noise" or "random"
    first_trainable: bool
    epochs: int = 50
    trials: int = 20
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    filter_channel: str = "red"
    filter_orientation: str = "horizontal"
    noise_sigma: float = 0.1
    n_examples: int = 1000
    split: float = 0.75

    @property
    def controller_mask(self) -> tuple[bool, bool]:
        # a fixed first layer is reached only through a 1x1 controller (scale + new bias)
        return (not self.first_trainable, False)

    def to_dict(self) -> dict:
        return asdict(self)


SCENARIOS = {
    "original": ("red-horizontal", "bar", False),
    "original+learn": ("red-horizontal", "bar", True),
    "transposed": ("red-vertical", "bar", False),
    "channel-switch": ("green-horizontal", "bar", False),
    "channel-switch+noise": ("green-horizontal", "bar+noise", False),
    "channel-switch+clean-start": ("green-horizontal", "random", True),
    "channel-switch+learn": ("green-horizontal", "bar", True),
}


def canonical_scenario(name: str) -> str:
    key = "+".join("-".join(part.split()) for part in name.strip().lower().replace("_", " ").split("+"))
    if key not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; expected one of {list(SCENARIOS)}")
    return key


def scenario_setup(name: str, **overrides) -> ScenarioSpec:
    key = canonical_scenario(name)
    variant, init, trainable = SCENARIOS[key]
    spec = ScenarioSpec(key, variant, init, trainable)
    return replace(spec, **overrides) if overrides else spec


# --------------------------------------------------------------------------
# export

def export_bars(data: BarsData, path) -> Path:
    """Write train-then-test examples to ``path`` and the config to ``path + '.txt'``."""
    path = Path(path)
    x = np.concatenate([data.train.x, data.test.x])
    y = np.concatenate([data.train.y, data.test.y])
    with open(path, "wb") as f:
        f.write(BARS_MAGIC)
        f.write(struct.pack("<II3I", BARS_VERSION, len(y), *IMAGE_SHAPE))
        for img, lab in zip(x, y):
            f.write(struct.pack("<B", int(lab)))
            f.write(img.astype("<f4").tobytes())
    side = dict(asdict(data.config), n_train=len(data.train))
    Path(str(path) + ".txt").write_text("".join(f"{k}={v}\n" for k, v in side.items()), encoding="utf-8")
    return path


def load_bars(path) -> BarsData:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != BARS_MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, count, c, h, w = struct.unpack_from("<II3I", raw, 4)
    if version != BARS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    rec = 1 + 4 * c * h * w
    off = 4 + 20
    if len(raw) != off + count * rec:
        raise ValueError(f"{path}: truncated or oversized payload")
    body = np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(count, rec)
    y = body[:, 0].astype(np.int64)
    x = body[:, 1:].copy().view("<f4").reshape(count, c, h, w).astype(np.float64)

    side = {}
    for line in Path(str(path) + ".txt").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            side[k.strip()] = v.strip()
    cfg = BarsConfig(side["variant"], int(side["n_examples"]), float(side["split"]),
                     int(side["seed"]), int(side.get("margin", 2)))
    n_train = int(side["n_train"])
    return BarsData(Dataset(x[:n_train], y[:n_train]), Dataset(x[n_train:], y[n_train:]), cfg)
