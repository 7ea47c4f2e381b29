"""Streaming ConvLSTM/U-Net students (the ``B{b}_l{l}`` family).

Encoder block ``k`` runs ``l`` stacked ConvLSTM layers at resolution
``H / 2**k``; blocks are separated by 2x2 max-pooling. The decoder mirrors
the encoder with nearest-neighbour upsampling, a 3x3 conv, concatenation
with the matching encoder output and a 3x3 fusion conv. A 1x1 conv and a
sigmoid give the per-pixel probability.

Inference is strictly causal: frames are consumed one at a time and the only
thing carried forward is the recurrent state.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_model import SoftMaskSequence, atomic_write_bytes
from .errors import BudgetError, ConfigError, ShapeError

DEFAULT_WIDTHS = (16, 24, 32, 40)
PARAM_BUDGET = 4_000_000
TEACHER_GFLOPS = 7.84  # DeepLabv3 teacher, per frame
PUBLISHED_STUDENT_GFLOPS = (0.25, 1.56)
OUTPUT_EPS = 1e-6

_CKPT_MAGIC = b"EDCK"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ConvLSTMCellConfig:
    in_channels: int
    hidden_channels: int
    kernel_size: int = 3
    uses_peephole: bool = False

    def __post_init__(self):
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.in_channels < 1 or self.hidden_channels < 1:
            raise ConfigError("channel counts must be at least 1")


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 2
    layers_per_block: int = 1
    channel_widths: tuple = None
    residual_last_block: bool = False
    input_size: tuple = (64, 64)
    threshold: float = 0.5
    kernel_size: int = 3
    uses_peephole: bool = False

    def __post_init__(self):
        if not 1 <= self.num_blocks <= 4:
            raise ConfigError(f"num_blocks must be in 1..4, got {self.num_blocks}")
        if not 1 <= self.layers_per_block <= 4:
            raise ConfigError(f"layers_per_block must be in 1..4, got {self.layers_per_block}")
        widths = self.channel_widths
        widths = DEFAULT_WIDTHS[: self.num_blocks] if widths is None else tuple(int(w) for w in widths)
        if len(widths) != self.num_blocks:
            raise ConfigError(f"need {self.num_blocks} channel widths, got {len(widths)}")
        if min(widths) < 1:
            raise ConfigError("channel widths must be positive")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.kernel_size % 2 != 1:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        object.__setattr__(self, "channel_widths", widths)
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))

    @property
    def name(self):
        return f"B{self.num_blocks}_l{self.layers_per_block}"

    def to_dict(self):
        d = asdict(self)
        d["channel_widths"] = list(self.channel_widths)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def cell_configs(self):
        """ConvLSTM cell configs per block, in encoder order."""
        blocks, in_ch = [], 1
        for width in self.channel_widths:
            layers = []
            for j in range(self.layers_per_block):
                layers.append(
                    ConvLSTMCellConfig(in_ch if j == 0 else width, width, self.kernel_size, self.uses_peephole)
                )
            blocks.append(layers)
            in_ch = width
        return blocks


def parse_config_name(name, **kwargs):
    """``"B2_l1"`` -> ModelConfig(num_blocks=2, layers_per_block=1)."""
    try:
        b, l = name.upper().lstrip("B").split("_L")
        return ModelConfig(num_blocks=int(b), layers_per_block=int(l), **kwargs)
    except ValueError as exc:
        raise ConfigError(f"cannot parse model name {name!r}; expected like B2_l1") from exc


def config_grid(**kwargs):
    return [ModelConfig(num_blocks=b, layers_per_block=l, **kwargs) for l in range(1, 5) for b in range(1, 5)]


# -- closed-form accounting ---------------------------------------------------


def _conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def _conv_flops(cin, cout, k, pixels):
    return (2 * cin * cout * k * k + cout) * pixels


def cell_param_count(cell):
    gates = 4 * cell.hidden_channels
    count = _conv_params(cell.in_channels + cell.hidden_channels, gates, cell.kernel_size)
    if cell.uses_peephole:
        count += 3 * cell.hidden_channels
    return count


def _residual_in_channels(config):
    return 1 if config.num_blocks == 1 else config.channel_widths[-2]


def param_count(config):
    """Exact trainable parameter count from layer arithmetic."""
    total = sum(cell_param_count(c) for block in config.cell_configs() for c in block)
    widths = config.channel_widths
    if config.residual_last_block and _residual_in_channels(config) != widths[-1]:
        total += _conv_params(_residual_in_channels(config), widths[-1], 1)
    for k in range(config.num_blocks - 1):
        total += _conv_params(widths[k + 1], widths[k], 3)
        total += _conv_params(2 * widths[k], widths[k], 3)
    total += _conv_params(widths[0], 1, 1)
    return total


def cell_flops(cell, pixels):
    h = cell.hidden_channels
    flops = _conv_flops(cell.in_channels + h, 4 * h, cell.kernel_size, pixels)
    flops += 5 * h * pixels  # three sigmoids, two tanh
    flops += 4 * h * pixels  # f*c + i*g, o*tanh(c)
    if cell.uses_peephole:
        flops += 6 * h * pixels
    return flops


def flops_estimate(config, height=None, width=None):
    """GFLOPs per frame; a multiply-accumulate counts as two FLOPs."""
    height, width = (height, width) if height is not None else config.input_size
    widths, total = config.channel_widths, 0
    for k, block in enumerate(config.cell_configs()):
        pixels = (height >> k) * (width >> k)
        total += sum(cell_flops(c, pixels) for c in block)
        if k > 0:
            total += 3 * widths[k - 1] * pixels  # 2x2 max-pool: 3 comparisons per output
    last_pixels = (height >> (config.num_blocks - 1)) * (width >> (config.num_blocks - 1))
    if config.residual_last_block:
        cin = _residual_in_channels(config)
        if cin != widths[-1]:
            total += _conv_flops(cin, widths[-1], 1, last_pixels)
        total += widths[-1] * last_pixels
    for k in range(config.num_blocks - 1):
        pixels = (height >> k) * (width >> k)
        total += _conv_flops(widths[k + 1], widths[k], 3, pixels) + widths[k] * pixels
        total += _conv_flops(2 * widths[k], widths[k], 3, pixels) + widths[k] * pixels
    total += _conv_flops(widths[0], 1, 1, height * width) + height * width
    return total / 1e9


# -- modules ------------------------------------------------------------------


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell with gates (i, f, o, g) from one convolution."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.hidden_channels = config.hidden_channels
        k = config.kernel_size
        self.gates = nn.Conv2d(config.in_channels + config.hidden_channels, 4 * config.hidden_channels, k, padding=k // 2)
        if config.uses_peephole:
            self.peephole = nn.Parameter(torch.zeros(3, config.hidden_channels, 1, 1))
        else:
            self.register_parameter("peephole", None)

    def forward(self, x, state):
        h, c = state
        if x.shape[0] != h.shape[0]:
            raise ShapeError(f"batch size {x.shape[0]} does not match state batch {h.shape[0]}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"input has {x.shape[1]} channels, cell expects {self.config.in_channels}")
        if x.shape[2:] != h.shape[2:]:
            raise ShapeError(f"input spatial size {tuple(x.shape[2:])} does not match state {tuple(h.shape[2:])}")
        if h.shape[1] != self.hidden_channels or c.shape != h.shape:
            raise ShapeError(f"state channels {h.shape[1]} do not match hidden_channels {self.hidden_channels}")
        i, f, o, g = self.gates(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        if self.peephole is not None:
            i = i + self.peephole[0] * c
            f = f + self.peephole[1] * c
        i, f, g = torch.sigmoid(i), torch.sigmoid(f), torch.tanh(g)
        c_next = f * c + i * g
        if self.peephole is not None:
            o = o + self.peephole[2] * c_next
        h_next = torch.sigmoid(o) * torch.tanh(c_next)
        return h_next, (h_next, c_next)

    def zero_state(self, batch, height, width, dtype=torch.float32):
        z = torch.zeros(batch, self.hidden_channels, height, width, dtype=dtype)
        return z, z.clone()


def convlstm_step(cell, input_map, state):
    """One recurrent step; returns ``(output_map, new_state)``."""
    return cell(input_map, state)


class StudentNet(nn.Module):
    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        widths = config.channel_widths
        self.blocks = nn.ModuleList(
            nn.ModuleList(ConvLSTMCell(c) for c in layers) for layers in config.cell_configs()
        )
        cin = _residual_in_channels(config)
        self.residual_proj = None
        if config.residual_last_block and cin != widths[-1]:
            self.residual_proj = nn.Conv2d(cin, widths[-1], 1)
        self.up_convs = nn.ModuleList(nn.Conv2d(widths[k + 1], widths[k], 3, padding=1) for k in range(config.num_blocks - 1))
        self.fuse_convs = nn.ModuleList(nn.Conv2d(2 * widths[k], widths[k], 3, padding=1) for k in range(config.num_blocks - 1))
        self.head = nn.Conv2d(widths[0], 1, 1)

    def cells(self):
        return [cell for block in self.blocks for cell in block]

    def initial_state(self, batch, height, width):
        b = self.config.num_blocks
        if height % (2**b) or width % (2**b):
            raise ShapeError(f"frame size {height}x{width} must be divisible by 2**{b} = {2**b}")
        dtype = self.head.weight.dtype
        state = []
        for k, block in enumerate(self.blocks):
            for cell in block:
                state.append(cell.zero_state(batch, height >> k, width >> k, dtype))
        return state

    def step(self, frame, state):
        """Consume one frame ``[B, 1, H, W]``; return logits and the next state."""
        x, new_state, skips, idx = frame, [], [], 0
        last = self.config.num_blocks - 1
        for k, block in enumerate(self.blocks):
            if k > 0:
                x = F.max_pool2d(x, 2)
            block_input = x
            for cell in block:
                x, s = cell(x, state[idx])
                new_state.append(s)
                idx += 1
            if k == last and self.config.residual_last_block:
                shortcut = block_input if self.residual_proj is None else self.residual_proj(block_input)
                x = x + shortcut
            skips.append(x)
        for k in range(last - 1, -1, -1):
            up = F.interpolate(x, scale_factor=2, mode="nearest")
            up = F.relu(self.up_convs[k](up))
            x = F.relu(self.fuse_convs[k](torch.cat([up, skips[k]], dim=1)))
        return self.head(x), new_state

    def forward(self, frames, state=None, return_state=False):
        """``frames [B, T, H, W]`` -> logits ``[B, T, H, W]``."""
        B, T, H, W = frames.shape
        if state is None:
            state = self.initial_state(B, H, W)
        outputs = []
        for t in range(T):
            logit, state = self.step(frames[:, t : t + 1], state)
            outputs.append(logit)
        logits = torch.cat(outputs, dim=1)
        return (logits, state) if return_state else logits


def _init_parameters(model, seed):
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                module.weight.copy_(torch.empty_like(module.weight).uniform_(-bound, bound, generator=gen))
                module.bias.zero_()
        for cell in model.cells():
            h = cell.hidden_channels
            cell.gates.bias[h : 2 * h].fill_(1.0)  # forget gate


def build_model(config, seed=0):
    count = param_count(config)
    if count > PARAM_BUDGET:
        raise BudgetError(count, PARAM_BUDGET)
    model = StudentNet(config, seed)
    _init_parameters(model, seed)
    return model


def forward(model, clip, prepad_frames=0):
    """Causal frame-by-frame inference over a clip.

    With ``prepad_frames > 0`` the first frame is fed that many extra times to
    warm up the recurrent state; those outputs are discarded.
    """
    if prepad_frames < 0:
        raise ValueError("prepad_frames must be nonnegative")
    frames = clip.frames
    T, H, W = frames.shape
    dtype = model.head.weight.dtype
    x = torch.as_tensor(np.array(frames), dtype=dtype)
    was_training = model.training
    model.eval()
    out = np.empty((T, H, W), dtype=np.float32)
    with torch.no_grad():
        state = model.initial_state(1, H, W)
        for _ in range(prepad_frames):
            _, state = model.step(x[0][None, None], state)
        for t in range(T):
            logit, state = model.step(x[t][None, None], state)
            out[t] = torch.sigmoid(logit)[0, 0].clamp(OUTPUT_EPS, 1 - OUTPUT_EPS).numpy()
    model.train(was_training)
    return SoftMaskSequence(out, clip.id)


def predict_binary(model, clip, prepad_frames=0, threshold=None):
    level = model.config.threshold if threshold is None else threshold
    return forward(model, clip, prepad_frames).threshold(level)


# -- checkpoints --------------------------------------------------------------

_NP_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def save_checkpoint(model, path, epoch=None, val_loss=None, threshold=None):
    """Single file: magic, version, header length, JSON header, raw tensor blob."""
    entries, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype(_NP_DTYPES[tensor.dtype], copy=False)
        data = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset})
        chunks.append(data)
        offset += len(data)
    config = model.config if threshold is None else replace(model.config, threshold=float(threshold))
    header = {
        "config": config.to_dict(),
        "seed": model.seed,
        "epoch": epoch,
        "val_loss": val_loss,
        "threshold": config.threshold,
        "parameters": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = _CKPT_MAGIC + struct.pack("<IQ", _CKPT_VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)
    atomic_write_bytes(path, blob)


def load_checkpoint(path):
    """Return ``(model, header)``; parameters come back bit-identical."""
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ShapeError(f"{path} is not a checkpoint file")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != _CKPT_VERSION:
        raise ShapeError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    blob = raw[16 + header_len :]
    config = ModelConfig.from_dict(header["config"])
    model = StudentNet(config, header["seed"])
    dtypes = {e["dtype"] for e in header["parameters"]}
    if dtypes == {"<f8"}:
        model = model.double()
    state = {}
    for entry in header["parameters"]:
        dtype = np.dtype(entry["dtype"])
        n = math.prod(entry["shape"])
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, header
