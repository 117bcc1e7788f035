"""Recurrent tracking architecture: stacked dilated-convolution GRU layers.

Layer k runs a 3x3 convolution with dilation 2^(k-1), so the per-step
receptive field grows exponentially with depth while every layer keeps
the full grid resolution (no pooling, no strides).  Gate and candidate
biases are full per-channel-per-cell fields, which lets individual cells
memorize place-specific structure such as fixed obstacles.  Two 1x1
decoders read the final layer: a sigmoid head for cell occupancy and a
per-cell softmax head for the semantic classes.

A forward/backward pass over one sequence is single-worker; independent
sequences may run in parallel against read-only parameters.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ParameterStore, Tensor
from .grid import PartialObservation

IN_CHANNELS = 2  # visibility plane + observed-occupancy plane

CHECKPOINT_MAGIC = b"DTCK"
CHECKPOINT_VERSION = 1

KIND_TRACKING = 0
KIND_ONESHOT = 1
KIND_OPTIMIZER = 2


@dataclass(frozen=True)
class NetworkConfig:
    layers: int
    channels: int
    grid: int
    classes: int

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one hidden layer")
        if self.channels < 1:
            raise ValueError("need at least one channel")
        if self.grid < 4:
            raise ValueError("grid too small")
        if self.classes < 2:
            raise ValueError("need at least two classes")

    @property
    def dilations(self) -> tuple:
        return tuple(2 ** k for k in range(self.layers))


def receptive_field(layers: int) -> int:
    """Side length of the final layer's per-step receptive field."""
    if layers < 1:
        raise ValueError("need at least one layer")
    return 2 ** (layers + 1) - 1


def check_receptive_field(config: NetworkConfig, object_diameter_cells: float):
    """Warn when the deepest receptive field cannot span the largest object."""
    rf = receptive_field(config.layers)
    if rf < object_diameter_cells:
        import warnings

        warnings.warn(
            f"receptive field {rf} cells is smaller than the largest simulated "
            f"object diameter ({object_diameter_cells:.0f} cells); tracking may "
            f"need more layers",
            stacklevel=2,
        )
    return rf


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form size of the parameter store for a config.

    Per layer: six 3x3 kernels (three taking the layer input, three the
    previous hidden state) and three C x M x M bias fields.  Decoders are
    1x1 kernels with one bias per output channel.
    """
    total = 0
    cin = IN_CHANNELS
    c, m = config.channels, config.grid
    for _ in range(config.layers):
        total += 3 * c * cin * 9
        total += 3 * c * c * 9
        total += 3 * c * m * m
        cin = c
    total += c * 1 + 1
    total += c * config.classes + config.classes
    return total


def _glorot(rng, shape, dtype):
    cout, cin, kh, kw = shape
    fan_in = cin * kh * kw
    fan_out = cout * kh * kw
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class LayerRefs:
    """Parameter tensors of one recurrent layer."""

    w_xz: Tensor
    w_hz: Tensor
    w_xr: Tensor
    w_hr: Tensor
    w_xh: Tensor
    w_hh: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor


@dataclass
class GateActivations:
    """Per-step gate tensors retained for inspection and tests."""

    update: Tensor     # f_t in (0,1)
    reset: Tensor      # r_t in (0,1)
    candidate: Tensor  # h-bar_t in (-1,1)


def init_params(config: NetworkConfig, seed: int, dtype=np.float64) -> ParameterStore:
    """Fresh parameters: Glorot-uniform kernels, all-zero bias fields."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    c, m = config.channels, config.grid
    cin = IN_CHANNELS
    for k in range(1, config.layers + 1):
        for name in ("w_xz", "w_xr", "w_xh"):
            store.add(f"layer{k}.{name}", _glorot(rng, (c, cin, 3, 3), dtype))
        for name in ("w_hz", "w_hr", "w_hh"):
            store.add(f"layer{k}.{name}", _glorot(rng, (c, c, 3, 3), dtype))
        for name in ("b_z", "b_r", "b_h"):
            store.add(f"layer{k}.{name}", np.zeros((c, m, m), dtype=dtype))
        cin = c
    store.add("occ.w", _glorot(rng, (1, c, 1, 1), dtype))
    store.add("occ.b", np.zeros((1, 1, 1), dtype=dtype))
    store.add("sem.w", _glorot(rng, (config.classes, c, 1, 1), dtype))
    store.add("sem.b", np.zeros((config.classes, 1, 1), dtype=dtype))
    return store


def gru_layer_step(layer_input: Tensor, h_prev: Tensor, params: LayerRefs,
                   dilation: int):
    """One convolutional GRU update.

        f = sigmoid(W_xz * x + W_hz * h + b_z)
        r = sigmoid(W_xr * x + W_hr * h + b_r)
        hbar = tanh(W_xh * x + r o (W_hh * h) + b_h)
        h' = f o h + (1 - f) o hbar

    where * is the layer's dilated convolution and o element-wise
    multiplication.  Returns (h', gates).
    """
    conv = engine.conv2d_dilated
    f = engine.sigmoid(engine.elem_add(
        conv(layer_input, params.w_xz, dilation),
        conv(h_prev, params.w_hz, dilation, bias=params.b_z),
    ))
    r = engine.sigmoid(engine.elem_add(
        conv(layer_input, params.w_xr, dilation),
        conv(h_prev, params.w_hr, dilation, bias=params.b_r),
    ))
    hbar = engine.tanh_act(engine.elem_add(
        conv(layer_input, params.w_xh, dilation, bias=params.b_h),
        engine.elem_mul(r, conv(h_prev, params.w_hh, dilation)),
    ))
    h_new = engine.elem_add(
        engine.elem_mul(f, h_prev),
        engine.elem_mul(engine.one_minus(f), hbar),
    )
    return h_new, GateActivations(update=f, reset=r, candidate=hbar)


class TrackingNetwork:
    """Config + parameters, with step/rollout helpers.

    The hidden state is a list of one [C,M,M] tensor per layer and starts
    at zeros for every sequence.
    """

    def __init__(self, config: NetworkConfig, store: ParameterStore, dtype=np.float64):
        self.config = config
        self.store = store
        self.dtype = np.dtype(dtype)
        self.layers = [
            LayerRefs(**{name: store[f"layer{k}.{name}"]
                         for name in ("w_xz", "w_hz", "w_xr", "w_hr", "w_xh", "w_hh",
                                      "b_z", "b_r", "b_h")})
            for k in range(1, config.layers + 1)
        ]

    @classmethod
    def create(cls, config: NetworkConfig, seed: int, dtype=np.float64) -> "TrackingNetwork":
        return cls(config, init_params(config, seed, dtype), dtype)

    def zero_state(self) -> list:
        c, m = self.config.channels, self.config.grid
        return [Tensor(np.zeros((c, m, m), dtype=self.dtype)) for _ in range(self.config.layers)]

    def encode_observation(self, obs: PartialObservation | None) -> Tensor:
        """Stack (visibility, occupancy) as the 2-channel input plane.

        None encodes the empty observation used for pure prediction.
        """
        m = self.config.grid
        if obs is None:
            return Tensor(np.zeros((IN_CHANNELS, m, m), dtype=self.dtype))
        if obs.visibility.shape != (m, m):
            raise engine.ShapeError(
                f"observation grid {obs.visibility.shape} does not match network grid {m}"
            )
        planes = np.stack([obs.visibility, obs.occupancy]).astype(self.dtype)
        return Tensor(planes)

    def forward_step(self, h_prev: list, x: Tensor):
        """One recurrence step: returns (h_new, occupancy belief, class belief).

        Layer 1 consumes the observation tensor, every deeper layer the
        just-computed output of the layer below; both decoders read the
        final layer only.
        """
        if len(h_prev) != self.config.layers:
            raise engine.ShapeError(
                f"hidden state has {len(h_prev)} layers, config wants {self.config.layers}"
            )
        inp = x
        h_new = []
        for layer, refs, dilation in zip(h_prev, self.layers, self.config.dilations):
            h_k, _ = gru_layer_step(inp, layer, refs, dilation)
            h_new.append(h_k)
            inp = h_k
        top = h_new[-1]
        y = engine.sigmoid(engine.conv2d_dilated(top, self.store["occ.w"], 1,
                                                 bias=self.store["occ.b"]))
        y = engine.reshape(y, (self.config.grid, self.config.grid))
        c_logits = engine.conv2d_dilated(top, self.store["sem.w"], 1, bias=self.store["sem.b"])
        c = engine.softmax_per_cell(c_logits)
        return h_new, y, c

    def rollout(self, observations) -> list:
        """Run a sequence of observations (None = empty input) without recording.

        Returns a list of (y_hat, c_hat) numpy array pairs.
        """
        h = self.zero_state()
        out = []
        for obs in observations:
            h, y, c = self.forward_step(h, self.encode_observation(obs))
            out.append((y.data, c.data))
        return out


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout (little-endian): magic "DTCK", u16 version, u8 kind, u32 layers,
# u32 channels, u32 grid, u32 classes, u32 block count, then per block
# {u16 name length, name utf-8, u8 ndim, u32 dims..., f32 data row-major},
# and a trailing u32 CRC32 of everything before it.


class CheckpointError(ValueError):
    """Malformed or corrupt checkpoint; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


_CKPT_HEADER = struct.Struct("<4sHBIIIII")


def save_blocks(path, config: NetworkConfig, kind: int, arrays: dict):
    parts = [
        _CKPT_HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            kind,
            config.layers,
            config.channels,
            config.grid,
            config.classes,
            len(arrays),
        )
    ]
    for name, arr in arrays.items():
        encoded = name.encode()
        data = np.asarray(arr, dtype="<f4")
        if data.ndim and not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b"")
        parts.append(data.tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_blocks(path):
    """Read a checkpoint container: returns (config, kind, name->float32 array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CKPT_HEADER.size + 4:
        raise CheckpointError("file too short for a checkpoint header", len(blob))
    payload, crc_bytes = blob[:-4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    if stored_crc != (zlib.crc32(payload) & 0xFFFFFFFF):
        raise CheckpointError("CRC mismatch", len(payload))
    magic, version, kind, layers, channels, grid, classes, n_blocks = _CKPT_HEADER.unpack_from(
        payload, 0
    )
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    config = NetworkConfig(layers=layers, channels=channels, grid=grid, classes=classes)
    offset = _CKPT_HEADER.size
    arrays = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset:offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, offset) if ndim else ()
        offset += 4 * ndim
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        arrays[name] = arr.reshape(shape).copy()
    if offset != len(payload):
        raise CheckpointError(f"{len(payload) - offset} trailing payload bytes", offset)
    return config, kind, arrays


def save_checkpoint(path, config: NetworkConfig, store: ParameterStore,
                    kind: int = KIND_TRACKING):
    save_blocks(path, config, kind, {name: t.data for name, t in store.items()})


def load_checkpoint(path, dtype=np.float64):
    """Restore (config, store, kind) from a checkpoint file."""
    config, kind, arrays = load_blocks(path)
    store = ParameterStore()
    for name, arr in arrays.items():
        store.add(name, arr.astype(dtype))
    return config, store, kind


def load_tracking_network(path, dtype=np.float64) -> TrackingNetwork:
    config, store, kind = load_checkpoint(path, dtype)
    if kind != KIND_TRACKING:
        raise CheckpointError(f"checkpoint kind {kind} is not a tracking network", 6)
    return TrackingNetwork(config, store, dtype)
