"""Teacher/student classifiers with an explicit feature extractor and head.

Three families are provided:

* ``recurrent`` - stacked LSTM layers; the feature at layer ``k`` is that
  layer's hidden state at the final time step (dim = width).
* ``residual-conv`` - the fully convolutional ResNet baseline: ``depth``
  residual blocks of 1-D convolutions with kernels 8/5/3, followed by global
  average pooling (dim = width).
* ``inception-conv`` - InceptionTime style: ``depth`` inception blocks with
  three convolution branches and one max-pool branch of ``width`` filters each,
  residual shortcuts every third block, global average pooling (dim = 4 * width).

All families accept any input length >= 1.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt

FAMILIES = ("recurrent", "residual-conv", "inception-conv")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierSpec:
    family: str
    depth: int
    width: int
    class_count: int
    input_channels: int = 1
    feature_layer: int = 0  # 0 means "final layer"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown classifier family {self.family!r}")
        if min(self.depth, self.width, self.class_count, self.input_channels) < 1:
            raise ValueError("depth, width, class_count and input_channels must be >= 1")
        if self.feature_layer == 0:
            object.__setattr__(self, "feature_layer", self.depth)
        if not 1 <= self.feature_layer <= self.depth:
            raise ValueError(f"feature_layer must lie in 1..{self.depth}")

    def layer_dim(self, layer: int) -> int:
        return self.width * 4 if self.family == "inception-conv" else self.width

    @property
    def feature_dim(self) -> int:
        return self.layer_dim(self.feature_layer)


_NAME = re.compile(r"^(lstm|resnet|inception)(\d+)-(\d+)$", re.IGNORECASE)


def parse_model_name(name: str, class_count: int, input_channels: int = 1) -> ClassifierSpec:
    """Decode names like ``LSTM3-100``, ``Resnet32-64`` or ``Inception55-32``.

    For LSTM the digits are depth and width. For the conv families only the
    trailing number (filter width) is used; depth takes the family default.
    """
    m = _NAME.match(name.strip())
    if not m:
        raise ValueError(f"cannot decode model name {name!r}")
    kind, digits, width = m.group(1).lower(), int(m.group(2)), int(m.group(3))
    if kind == "lstm":
        return ClassifierSpec("recurrent", digits, width, class_count, input_channels)
    if kind == "resnet":
        return ClassifierSpec("residual-conv", 3, width, class_count, input_channels)
    return ClassifierSpec("inception-conv", 6, width, class_count, input_channels)


# ---------------------------------------------------------------------------
# building blocks


def _same_pad(kernel: int) -> tuple[int, int]:
    return (kernel - 1) // 2, kernel // 2


class SameConv1d(nn.Conv1d):
    """Conv1d with 'same' output length for even and odd kernels."""

    def forward(self, x):
        return super().forward(F.pad(x, _same_pad(self.kernel_size[0])))


class ResidualBlock(nn.Module):
    def __init__(self, cin, width, kernels=(8, 5, 3)):
        super().__init__()
        convs, norms = [], []
        c = cin
        for k in kernels:
            convs.append(SameConv1d(c, width, k))
            norms.append(nn.BatchNorm1d(width))
            c = width
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.shortcut = nn.Sequential(nn.Conv1d(cin, width, 1), nn.BatchNorm1d(width)) \
            if cin != width else nn.BatchNorm1d(width)

    def forward(self, x):
        h = x
        for i, (conv, bn) in enumerate(zip(self.convs, self.norms)):
            h = bn(conv(h))
            if i < len(self.convs) - 1:
                h = F.relu(h)
        return F.relu(h + self.shortcut(x))


class InceptionModule(nn.Module):
    def __init__(self, cin, width, bottleneck=32, kernels=(39, 19, 9)):
        super().__init__()
        self.bottleneck = nn.Conv1d(cin, bottleneck, 1, bias=False) if cin > 1 else None
        cb = bottleneck if cin > 1 else cin
        self.branches = nn.ModuleList(SameConv1d(cb, width, k, bias=False) for k in kernels)
        self.pool_conv = nn.Conv1d(cin, width, 1, bias=False)
        self.bn = nn.BatchNorm1d(width * (len(kernels) + 1))

    def forward(self, x):
        b = self.bottleneck(x) if self.bottleneck is not None else x
        outs = [conv(b) for conv in self.branches]
        outs.append(self.pool_conv(F.max_pool1d(x, 3, stride=1, padding=1)))
        return F.relu(self.bn(torch.cat(outs, dim=1)))


# ---------------------------------------------------------------------------
# classifier


class Classifier(nn.Module):
    """``forward = head_final o backbone``; ``features``/``head`` expose the split.

    When ``spec.feature_layer < depth`` an auxiliary linear head reads the
    intermediate features, since the remaining layers cannot be applied to a
    pooled vector.
    """

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        if spec.family == "recurrent":
            self.layers = nn.ModuleList(
                nn.LSTM(spec.input_channels if i == 0 else spec.width, spec.width, batch_first=True)
                for i in range(spec.depth))
        elif spec.family == "residual-conv":
            self.layers = nn.ModuleList(
                ResidualBlock(spec.input_channels if i == 0 else spec.width, spec.width)
                for i in range(spec.depth))
        else:
            self.layers = nn.ModuleList()
            self.shortcuts = nn.ModuleDict()
            c = spec.input_channels
            res_in = c
            for i in range(spec.depth):
                self.layers.append(InceptionModule(c, spec.width))
                c = spec.width * 4
                if i % 3 == 2:
                    self.shortcuts[str(i)] = nn.Sequential(nn.Conv1d(res_in, c, 1, bias=False),
                                                           nn.BatchNorm1d(c))
                    res_in = c
        self.fc = nn.Linear(spec.layer_dim(spec.depth), spec.class_count)
        if spec.feature_layer < spec.depth:
            self.aux_fc = nn.Linear(spec.feature_dim, spec.class_count)
        self.reset_parameters()

    def reset_parameters(self):
        for mod in self.modules():
            if isinstance(mod, (nn.Linear, nn.Conv1d)):
                bound = 1.0 / math.sqrt(mod.weight[0].numel())
                nn.init.uniform_(mod.weight, -bound, bound)
                if mod.bias is not None:
                    nn.init.uniform_(mod.bias, -bound, bound)
            elif isinstance(mod, nn.LSTM):
                bound = 1.0 / math.sqrt(mod.hidden_size)
                h = mod.hidden_size
                for name, p in mod.named_parameters():
                    nn.init.uniform_(p, -bound, bound)
                    if name.startswith("bias"):
                        with torch.no_grad():
                            p[h:2 * h] = 0.5  # ih + hh forget biases sum to 1
        return self

    def _check(self, x):
        if x.ndim != 3 or x.shape[1] != self.spec.input_channels:
            raise ShapeError(f"expected input [B, {self.spec.input_channels}, L], got {tuple(x.shape)}")
        if x.shape[2] < 1:
            raise ShapeError("sequence length must be >= 1")

    def layer_features(self, x: torch.Tensor, upto: int | None = None) -> list[torch.Tensor]:
        """Feature vectors of layers ``1..upto`` (default: all)."""
        self._check(x)
        upto = upto or self.spec.depth
        feats = []
        if self.spec.family == "recurrent":
            h = x.transpose(1, 2)
            for layer in self.layers[:upto]:
                h, _ = layer(h)
                feats.append(h[:, -1])
        elif self.spec.family == "residual-conv":
            h = x
            for layer in self.layers[:upto]:
                h = layer(h)
                feats.append(h.mean(dim=2))
        else:
            h, res = x, x
            for i, layer in enumerate(self.layers[:upto]):
                h = layer(h)
                if str(i) in self.shortcuts:
                    h = F.relu(h + self.shortcuts[str(i)](res))
                    res = h
                feats.append(h.mean(dim=2))
        return feats

    def features(self, x: torch.Tensor, layer: int | None = None) -> torch.Tensor:
        layer = layer or self.spec.feature_layer
        return self.layer_features(x, layer)[layer - 1]

    def head(self, z: torch.Tensor) -> torch.Tensor:
        if self.spec.feature_layer < self.spec.depth:
            return self.aux_fc(z)
        return self.fc(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.layer_features(x)[-1])


def build_classifier(spec: ClassifierSpec, seed: int = 0) -> Classifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Classifier(spec)


def features(model: Classifier, x: torch.Tensor) -> torch.Tensor:
    return model.features(x)


@torch.no_grad()
def predict(model: Classifier, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """Class probabilities in eval mode."""
    was_training = model.training
    model.eval()
    try:
        out = [torch.softmax(model(x[i:i + batch_size]), dim=1) for i in range(0, len(x), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out) if out else torch.zeros(0, model.spec.class_count)


def parameter_vector(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1).double() for p in model.parameters()]).numpy()


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def state_checksum(model: nn.Module) -> str:
    import hashlib
    return hashlib.sha256(ckpt.flat_state(model)[1].tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def classifier_to_bytes(model: Classifier) -> bytes:
    return ckpt.to_bytes("classifier", asdict(model.spec), model)


def classifier_from_bytes(blob: bytes) -> Classifier:
    header, flat = ckpt.read_header(blob)
    if header["family"] != "classifier":
        raise ckpt.CheckpointError(f"expected a classifier checkpoint, got {header['family']!r}")
    model = Classifier(ClassifierSpec(**header["fields"]))
    ckpt.load_state(model, header, flat)
    return model


def save_classifier(model: Classifier, path) -> None:
    ckpt.atomic_write(path, classifier_to_bytes(model))


def load_classifier(path) -> Classifier:
    return classifier_from_bytes(Path(path).read_bytes())
