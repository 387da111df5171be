"""This module contains the convolutional network and its checkpoint format."""

import json
import logging
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np

from invtrain import autodiff as ad
from invtrain.autodiff import Tensor
from invtrain.config.storage import atomic_writer
from invtrain.exceptions import CheckpointError, ShapeMismatchError
from invtrain.schemas import CheckpointHeader, TrainConfig

logger = logging.getLogger(__name__)

PARAMETER_DTYPE = np.dtype("<f8")
CONSTANT_MAP_TOLERANCE = 1e-12
# standard deviation of a chip once it reaches the first convolution
CHIP_SCALE = 4.0


class ForwardResult(NamedTuple):
    """Feature maps, pooled features and logits of one image (or a batch)."""

    feature_map: Tensor
    pooled: Tensor
    logits: Tensor


def standardize_chips(images: np.ndarray) -> np.ndarray:
    """Log-intensity of every chip, centred and scaled to standard deviation ``CHIP_SCALE``.

    Works on one [1, side, side] chip or a [B, 1, side, side] batch. Negative pixels are
    clipped to 0 first; a constant chip maps to all zeros.
    """
    axes = (-3, -2, -1)
    log_intensity = np.log1p(np.maximum(images, 0.0))
    centred = log_intensity - log_intensity.mean(axis=axes, keepdims=True)
    spread = np.broadcast_to(centred.std(axis=axes, keepdims=True), centred.shape)
    scaled = np.zeros_like(centred)
    np.divide(centred, spread, out=scaled, where=spread > CONSTANT_MAP_TOLERANCE)
    return CHIP_SCALE * scaled


class Network:
    """Two 3x3 conv layers (1 -> hidden -> c_feat, rectified, 2x downsample between) and a dense head.

    Chips are standardized on the way in (see ``standardize_chips``), so the speckled
    intensity range of a dataset does not set the scale of the pooled features.
    ``fc_weight`` is the dense layer whose rows weight the class activation maps.
    """

    def __init__(self, side: int, num_classes: int, hidden_channels: int = 8, c_feat: int = 16, seed: int = 0):
        if side % 2:
            raise ShapeMismatchError("the chip side must be even")
        self.side = side
        self.num_classes = num_classes
        self.hidden_channels = hidden_channels
        self.c_feat = c_feat
        rng = np.random.default_rng([seed, 0])
        self.conv1_weight = Tensor(rng.normal(0, np.sqrt(2.0 / 9), (hidden_channels, 1, 3, 3)), requires_grad=True)
        self.conv1_bias = Tensor(np.zeros(hidden_channels), requires_grad=True)
        self.conv2_weight = Tensor(
            rng.normal(0, np.sqrt(2.0 / (9 * hidden_channels)), (c_feat, hidden_channels, 3, 3)), requires_grad=True
        )
        self.conv2_bias = Tensor(np.zeros(c_feat), requires_grad=True)
        self.fc_weight = Tensor(rng.normal(0, np.sqrt(1.0 / c_feat), (num_classes, c_feat)), requires_grad=True)
        self.fc_bias = Tensor(np.zeros(num_classes), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Parameter registry; the order is the checkpoint blob order."""
        return [
            ("conv1_weight", self.conv1_weight),
            ("conv1_bias", self.conv1_bias),
            ("conv2_weight", self.conv2_weight),
            ("conv2_bias", self.conv2_bias),
            ("fc_weight", self.fc_weight),
            ("fc_bias", self.fc_bias),
        ]

    @property
    def feature_side(self) -> int:
        return self.side // 2

    def forward(self, image: Union[Tensor, np.ndarray]) -> ForwardResult:
        """Forward a [1, side, side] image or a [B, 1, side, side] batch."""
        image = ad.as_tensor(image)
        if image.ndim not in (3, 4) or image.shape[-3:] != (1, self.side, self.side):
            raise ShapeMismatchError(f"expected images of shape (1, {self.side}, {self.side}), got {image.shape}")
        image = Tensor(standardize_chips(image.data))
        hidden = ad.avg_pool2x(ad.relu(ad.conv2d(image, self.conv1_weight, self.conv1_bias)))
        feature_map = ad.relu(ad.conv2d(hidden, self.conv2_weight, self.conv2_bias))
        pooled = ad.global_avg_pool(feature_map)
        if pooled.ndim == 1:
            logits = ad.matmul(self.fc_weight, pooled) + self.fc_bias
        else:
            logits = ad.matmul(pooled, ad.transpose(self.fc_weight)) + self.fc_bias
        return ForwardResult(feature_map, pooled, logits)

    def zero_grad(self) -> None:
        for _, parameter in self.parameters():
            parameter.zero_grad()


def forward(net: Network, image) -> ForwardResult:
    return net.forward(image)


def cam_raw(net: Network, feature_map: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """sum_c W_fc[argmax(logits)](c) * feature_map(c)."""
    feature_map = np.asarray(feature_map)
    logits = np.asarray(logits)
    if feature_map.shape[0] != net.c_feat or logits.shape != (net.num_classes,):
        raise ShapeMismatchError(f"feature map {feature_map.shape} and logits {logits.shape} do not fit the network")
    weights = net.fc_weight.data[int(np.argmax(logits))]
    return np.einsum("c,chw->hw", weights, feature_map)


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max scaling to [0, 1]; a constant map becomes all ones."""
    low, high = float(raw.min()), float(raw.max())
    if high - low <= CONSTANT_MAP_TOLERANCE:
        return np.ones_like(raw)
    return (raw - low) / (high - low)


def cam_mask(net: Network, feature_map, logits) -> Tensor:
    """Class activation mask in [0, 1]; a constant that never carries gradient."""
    feature_map = feature_map.data if isinstance(feature_map, Tensor) else feature_map
    logits = logits.data if isinstance(logits, Tensor) else logits
    return Tensor(normalize_map(cam_raw(net, feature_map, logits)))


def cam_masks(net: Network, feature_maps: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Masks for a batch: [B, c_feat, h, w] maps and [B, C] logits -> [B, h, w]."""
    return np.stack([normalize_map(cam_raw(net, fm, lg)) for fm, lg in zip(feature_maps, logits)])


def predict(net: Network, image) -> int:
    """Argmax of the logits; ties go to the lowest index."""
    with ad.no_grad():
        logits = net.forward(image).logits.data
    return int(np.argmax(logits))


def predict_batch(net: Network, images: np.ndarray, chunk: int = 64):
    """(labels, logits, pooled) of every image, evaluated in fixed-size chunks."""
    logits, pooled = [], []
    with ad.no_grad():
        for start in range(0, len(images), chunk):
            result = net.forward(images[start : start + chunk])
            logits.append(result.logits.data)
            pooled.append(result.pooled.data)
    if not logits:
        return np.zeros(0, dtype=np.int64), np.zeros((0, net.num_classes)), np.zeros((0, net.c_feat))
    logits = np.concatenate(logits)
    return np.argmax(logits, axis=1), logits, np.concatenate(pooled)


# Checkpoints


def save_checkpoint(net: Network, path, config: Optional[TrainConfig] = None) -> None:
    """One JSON header line, then the little-endian float64 parameters in registry order."""
    header = CheckpointHeader(
        side=net.side,
        num_classes=net.num_classes,
        hidden_channels=net.hidden_channels,
        c_feat=net.c_feat,
        parameters=[(name, list(t.shape)) for name, t in net.parameters()],
        config=config,
    )
    blob = b"".join(t.data.astype(PARAMETER_DTYPE).tobytes(order="C") for _, t in net.parameters())
    line = json.dumps(header.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    with atomic_writer(path, "wb") as handle:
        handle.write(line + b"\n")
        handle.write(blob)


def read_checkpoint_header(path) -> CheckpointHeader:
    try:
        with open(path, "rb") as handle:
            return CheckpointHeader.model_validate_json(handle.readline())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint header from {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[Network, CheckpointHeader]:
    path = Path(path)
    try:
        with open(path, "rb") as handle:
            header = CheckpointHeader.model_validate_json(handle.readline())
            blob = handle.read()
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    net = Network(header.side, header.num_classes, header.hidden_channels, header.c_feat)
    registry = net.parameters()
    if [(name, list(t.shape)) for name, t in registry] != [(n, list(s)) for n, s in header.parameters]:
        raise CheckpointError(f"{path} does not match the network layout")
    values = np.frombuffer(blob, dtype=PARAMETER_DTYPE)
    expected = sum(t.size for _, t in registry)
    if values.size != expected:
        raise CheckpointError(f"{path} holds {values.size} parameters, expected {expected}")
    start = 0
    for _, tensor in registry:
        tensor.data = values[start : start + tensor.size].reshape(tensor.shape).astype(np.float64)
        start += tensor.size
    return net, header
