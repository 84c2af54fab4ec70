"""The recurrent flow network: one feature conv, three dilated conv-GRU
layers, and a convolutional head.

The flow head has four channels: 0-1 are the backward flow (dx, dy) and
2-3 the forward flow, in cell units. Swapping the head for a single
sigmoid channel gives the direct occupancy predictor used as a baseline.
All layers are stride-1 with padding equal to the dilation, so spatial
dimensions are preserved end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ConvSpec, DimensionError, GruWeights, ParameterError, Tensor, conv2d, gru_cell, narrow_channels

IN_CHANNELS = 2
HIDDEN_CHANNELS = 16
FLOW_CHANNELS = 4
GRU_DILATIONS = (1, 2, 4)
FILTER_SIZE = 3

HEAD_KINDS = ("flow", "direct")


def _conv_spec(in_ch: int, out_ch: int, dilation: int = 1, has_bias: bool = True) -> ConvSpec:
    return ConvSpec(
        filter_size=FILTER_SIZE,
        in_channels=in_ch,
        out_channels=out_ch,
        stride=1,
        dilation=dilation,
        padding=dilation * (FILTER_SIZE - 1) // 2,
        has_bias=has_bias,
    )


@dataclass
class ModelParams:
    conv0_w: Tensor
    conv0_b: Tensor
    grus: list  # three GruWeights
    head_w: Tensor
    head_b: Tensor
    kind: str = "flow"
    in_channels: int = IN_CHANNELS
    hidden_channels: int = HIDDEN_CHANNELS

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ParameterError(f"unknown head kind {self.kind!r}")

    @property
    def head_channels(self) -> int:
        return self.head_w.shape[0]

    @property
    def conv0_spec(self) -> ConvSpec:
        return _conv_spec(self.in_channels, self.hidden_channels)

    @property
    def head_spec(self) -> ConvSpec:
        return _conv_spec(self.hidden_channels, self.head_channels)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        pairs = [("conv0.weight", self.conv0_w), ("conv0.bias", self.conv0_b)]
        for i, gru in enumerate(self.grus):
            pairs.extend((f"gru{i}.{name}", t) for name, t in gru.tensors())
        pairs.extend([("head.weight", self.head_w), ("head.bias", self.head_b)])
        return pairs

    def architecture(self) -> dict:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "hidden_channels": self.hidden_channels,
            "head_channels": self.head_channels,
            "filter_size": FILTER_SIZE,
            "dilations": list(GRU_DILATIONS),
        }

    def validate_finite(self) -> None:
        for name, t in self.named_parameters():
            if not np.isfinite(t.data).all():
                raise ParameterError(f"parameter {name} contains non-finite values")


def init_params(
    seed: int,
    kind: str = "flow",
    in_channels: int = IN_CHANNELS,
    hidden_channels: int = HIDDEN_CHANNELS,
    dtype=np.float64,
) -> ModelParams:
    """Uniform +-1/sqrt(fan_in) kernels, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    head_channels = FLOW_CHANNELS if kind == "flow" else 1

    def kernel(out_ch, in_ch):
        bound = 1.0 / np.sqrt(in_ch * FILTER_SIZE * FILTER_SIZE)
        data = rng.uniform(-bound, bound, size=(out_ch, in_ch, FILTER_SIZE, FILTER_SIZE))
        return Tensor(data.astype(dtype), requires_grad=True, dtype=dtype)

    def bias(out_ch):
        return Tensor(np.zeros((1, out_ch, 1, 1), dtype=dtype), requires_grad=True, dtype=dtype)

    grus = []
    for dilation in GRU_DILATIONS:
        spec = _conv_spec(hidden_channels, hidden_channels, dilation, has_bias=False)
        grus.append(
            GruWeights(
                w_xf=kernel(hidden_channels, hidden_channels),
                w_yf=kernel(hidden_channels, hidden_channels),
                w_xr=kernel(hidden_channels, hidden_channels),
                w_yr=kernel(hidden_channels, hidden_channels),
                w_xy=kernel(hidden_channels, hidden_channels),
                w_yy=kernel(hidden_channels, hidden_channels),
                x_spec=spec,
                y_spec=spec,
            )
        )
    return ModelParams(
        conv0_w=kernel(hidden_channels, in_channels),
        conv0_b=bias(hidden_channels),
        grus=grus,
        head_w=kernel(head_channels, hidden_channels),
        head_b=bias(head_channels),
        kind=kind,
        in_channels=in_channels,
        hidden_channels=hidden_channels,
    )


def params_from_arrays(arrays: dict, kind: str) -> ModelParams:
    """Rebuild ModelParams from the named arrays of a checkpoint."""
    def tensor(name):
        if name not in arrays:
            raise ParameterError(f"checkpoint is missing parameter {name!r}")
        return Tensor(np.asarray(arrays[name], dtype=np.float64), requires_grad=True)

    conv0_w = tensor("conv0.weight")
    hidden = conv0_w.shape[0]
    grus = []
    for i, dilation in enumerate(GRU_DILATIONS):
        spec = _conv_spec(hidden, hidden, dilation, has_bias=False)
        grus.append(
            GruWeights(
                **{name: tensor(f"gru{i}.{name}") for name in ("w_xf", "w_yf", "w_xr", "w_yr", "w_xy", "w_yy")},
                x_spec=spec,
                y_spec=spec,
            )
        )
    return ModelParams(
        conv0_w=conv0_w,
        conv0_b=tensor("conv0.bias"),
        grus=grus,
        head_w=tensor("head.weight"),
        head_b=tensor("head.bias"),
        kind=kind,
        in_channels=conv0_w.shape[1],
        hidden_channels=hidden,
    )


@dataclass
class HiddenState:
    """Per-GRU-layer recurrent outputs carried across time."""

    y0: Tensor
    y1: Tensor
    y2: Tensor

    def tensors(self) -> tuple[Tensor, Tensor, Tensor]:
        return (self.y0, self.y1, self.y2)


def init_hidden(rows: int, cols: int, batch: int = 1, channels: int = HIDDEN_CHANNELS, dtype=np.float64) -> HiddenState:
    """All-zero recurrent state for the start of a sequence."""
    if rows < 1 or cols < 1 or batch < 1:
        raise ParameterError("hidden state dims must be positive")
    shape = (batch, channels, rows, cols)
    return HiddenState(*(Tensor(np.zeros(shape, dtype=dtype), dtype=dtype) for _ in range(3)))


@dataclass
class FlowPrediction:
    backward: Tensor  # (B, 2, H, W): dx, dy
    forward: Tensor


def stack_maps(occupancy: np.ndarray, visibility: np.ndarray, dtype=np.float64) -> Tensor:
    """One (1, 2, H, W) network input from a map pair."""
    if occupancy.shape != visibility.shape:
        raise DimensionError("rows/cols", occupancy.shape, visibility.shape, "stack_maps")
    return Tensor(np.stack((occupancy, visibility))[None].astype(dtype), dtype=dtype)


def backbone_forward(x: Tensor, hidden: HiddenState, params: ModelParams) -> tuple[Tensor, HiddenState]:
    """Run one time step of the shared backbone; returns the raw head output."""
    feat = conv2d(x, params.conv0_w, params.conv0_b, params.conv0_spec)
    y0 = gru_cell(feat, hidden.y0, params.grus[0])
    y1 = gru_cell(y0, hidden.y1, params.grus[1])
    y2 = gru_cell(y1, hidden.y2, params.grus[2])
    head = conv2d(y2, params.head_w, params.head_b, params.head_spec)
    return head, HiddenState(y0, y1, y2)


def forward_step_batch(x: Tensor, hidden: HiddenState, params: ModelParams) -> tuple[FlowPrediction, HiddenState]:
    if params.kind != "flow":
        raise ParameterError("forward_step needs flow-head parameters")
    head, new_hidden = backbone_forward(x, hidden, params)
    prediction = FlowPrediction(
        backward=narrow_channels(head, 0, 2),
        forward=narrow_channels(head, 2, 4),
    )
    return prediction, new_hidden


def forward_step(
    occupancy: np.ndarray, visibility: np.ndarray, hidden: HiddenState, params: ModelParams
) -> tuple[FlowPrediction, HiddenState]:
    """Single-grid step: stacks the maps and advances the recurrent state."""
    x = stack_maps(occupancy, visibility, dtype=params.conv0_w.dtype)
    return forward_step_batch(x, hidden, params)
