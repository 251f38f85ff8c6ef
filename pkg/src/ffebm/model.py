"""ff-EBM assembly: configuration, parameter store, GOE initialization,
block-wise inference and checkpoint persistence."""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import tensor as tk
from .energies import Activation, HopfieldBlockParams, coupling_kind, coupling_weight_shape
from .errors import ConfigError, DimensionError, DivergenceError, FormatError
from .feedforward import FeedforwardBlockParams, ForwardCache, ff_forward, readout_logits
from .solver import RelaxationSettings, relax

CHECKPOINT_MAGIC = b"FFEBM\0"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


# -- configuration ----------------------------------------------------------

@dataclass
class FeedforwardBlockSpec:
    kind: str = "linear"  # "linear" | "conv_pool_bn"
    out: Optional[int] = None  # linear output width
    out_channels: Optional[int] = None  # conv output channels
    pool: bool = False
    batchnorm: bool = False
    bias: bool = False  # linear only
    bias_init: float = 0.0
    stride: int = 1
    pad: int = 1

    def output_shape(self, input_shape):
        if self.kind == "linear":
            if not self.out:
                raise ConfigError("linear feedforward block needs 'out'")
            return (int(self.out),)
        if self.kind == "conv_pool_bn":
            if len(input_shape) != 3 or not self.out_channels:
                raise ConfigError(f"conv block needs a (C, H, W) input and 'out_channels', got {input_shape}")
            _, H, W = input_shape
            H = (H + 2 * self.pad - 3) // self.stride + 1
            W = (W + 2 * self.pad - 3) // self.stride + 1
            if self.pool:
                if H % 2 or W % 2:
                    raise ConfigError(f"cannot pool odd spatial size {(H, W)}")
                H, W = H // 2, W // 2
            return (int(self.out_channels), H, W)
        raise ConfigError(f"unknown feedforward kind {self.kind!r}")


@dataclass
class EnergyBlockSpec:
    layers: List[tuple]
    bias: bool = False
    bias_init: float = 0.0  # every EB bias starts at this value

    def __post_init__(self):
        self.layers = [tuple(int(d) for d in (l if isinstance(l, (list, tuple)) else [l]))
                       for l in self.layers]
        if not self.layers:
            raise ConfigError("an EB block needs at least one layer")


@dataclass
class BlockPair:
    ff: FeedforwardBlockSpec
    eb: EnergyBlockSpec


@dataclass
class ModelConfig:
    input_shape: tuple
    num_classes: int
    blocks: List[BlockPair]
    activation: str = "laborieux"
    T_free: int = 60
    T_nudge: int = 20
    beta: float = 0.2
    V: float = 8.4e-4
    ff_V: Optional[float] = None
    schedule: str = "asynchronous"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.blocks = [b if isinstance(b, BlockPair) else
                       BlockPair(FeedforwardBlockSpec(**b["ff"]), EnergyBlockSpec(**b["eb"]))
                       for b in self.blocks]
        Activation(self.activation)
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not self.blocks:
            raise ConfigError("a model needs at least one EB block")
        if self.V <= 0 or (self.ff_V is not None and self.ff_V <= 0):
            raise ConfigError("GOE variance must be positive")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def readout_variance(self):
        return self.ff_V if self.ff_V is not None else self.V

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        for b in d["blocks"]:
            b["eb"]["layers"] = [list(l) for l in b["eb"]["layers"]]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("$schema", None)
        d.pop("description", None)
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"invalid model config: {e}") from None

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_splits(self, partition):
        """Same layers regrouped into blocks of the given sizes (FC only)."""
        widths = [l for b in self.blocks for l in b.eb.layers]
        if sum(partition) != len(widths) or any(p < 1 for p in partition):
            raise ConfigError(f"partition {partition} does not sum to {len(widths)} layers")
        first = self.blocks[0]
        eb = first.eb
        blocks, i = [], 0
        for k, size in enumerate(partition):
            group = widths[i:i + size]
            if k == 0:
                ff = FeedforwardBlockSpec(**asdict(first.ff))
            else:
                ff = FeedforwardBlockSpec(kind="linear", out=int(np.prod(group[0])),
                                          batchnorm=first.ff.batchnorm, bias=first.ff.bias,
                                          bias_init=first.ff.bias_init)
            blocks.append(BlockPair(ff, EnergyBlockSpec(list(group), eb.bias, eb.bias_init)))
            i += size
        d = self.to_dict()
        d["blocks"] = [asdict(b) for b in blocks]
        return ModelConfig.from_dict(d)


# -- parameter store ----------------------------------------------------------

_BUFFER_SUFFIXES = (".bn_mean", ".bn_var")


class ParameterStore:
    """Ordered name -> array map.  Running batchnorm statistics live here too
    but are not trainable."""

    def __init__(self, tensors=None):
        self.tensors = dict(tensors or {})
        self.version = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def keys(self):
        return self.tensors.keys()

    @staticmethod
    def is_trainable(name):
        return not name.endswith(_BUFFER_SUFFIXES)

    def trainable_keys(self):
        return [k for k in self.tensors if self.is_trainable(k)]

    def copy(self):
        out = ParameterStore({k: v.copy() for k, v in self.tensors.items()})
        out.version = self.version
        return out

    def num_trainable(self):
        return sum(v.size for k, v in self.tensors.items() if self.is_trainable(k))


def init_goe(shape, V, fan_in, rng, dtype=np.float32):
    """Gaussian init with variance ``V / fan_in``.

    Square matrices are drawn from the Gaussian orthogonal ensemble
    (symmetric, doubled variance on the diagonal); any other shape gets
    i.i.d. entries.
    """
    std = np.sqrt(V / fan_in)
    if len(shape) == 2 and shape[0] == shape[1]:
        a = rng.normal(0.0, std, size=shape)
        w = (a + a.T) / np.sqrt(2.0)
    else:
        w = rng.normal(0.0, std, size=shape)
    return w.astype(dtype)


# -- model ----------------------------------------------------------------------

@dataclass
class InferenceRecord:
    states: List[list]  # equilibria s^k, k = 1..N-1 (index 0 = first block)
    xs: List[np.ndarray]  # feedforward outputs x^k
    caches: List[ForwardCache]
    inputs: List[np.ndarray]  # s^{k-1}: the input of each feedforward block
    logits: np.ndarray


class Model:
    def __init__(self, config, store):
        self.config = config
        self.store = store
        self.shapes = check_shape_chain(config)
        self._running = {}

    @property
    def act(self):
        return Activation(self.config.activation)

    @property
    def num_blocks(self):
        return len(self.config.blocks)

    @property
    def dtype(self):
        return self.config.np_dtype

    def ff_params(self, k):
        spec = self.config.blocks[k].ff
        pre = f"block{k + 1}.ff."
        st = self.store
        running = None
        if spec.batchnorm:
            running = self._running.get(k)
            if running is None or running.mean is not st[pre + "bn_mean"]:
                running = tk.RunningStats(st[pre + "bn_mean"], st[pre + "bn_var"])
                self._running[k] = running
        return FeedforwardBlockParams(
            kind=spec.kind, weight=st[pre + "weight"],
            bias=st.tensors.get(pre + "bias"),
            bn_scale=st.tensors.get(pre + "bn_scale"), bn_shift=st.tensors.get(pre + "bn_shift"),
            running=running, pool=spec.pool, stride=spec.stride, pad=spec.pad,
            version=st.version)

    def eb_params(self, k):
        spec = self.config.blocks[k].eb
        pre = f"block{k + 1}.eb."
        L = len(spec.layers)
        weights = [self.store[f"{pre}theta{l}"] for l in range(L - 1)]
        biases = [self.store.tensors.get(f"{pre}bias{l}") for l in range(L)]
        return HopfieldBlockParams(list(spec.layers), weights, biases)

    @property
    def w_out(self):
        return self.store["readout.weight"]

    @staticmethod
    def param_name(k, part, role, layer=None):
        suffix = role if layer is None else f"{role}{layer}"
        return f"block{k + 1}.{part}.{suffix}"


def check_shape_chain(config):
    """Per-block (ff input, ff output) shapes; raises ConfigError on mismatch."""
    shapes = []
    cur = config.input_shape
    for k, pair in enumerate(config.blocks):
        try:
            out = pair.ff.output_shape(cur)
        except ConfigError as e:
            raise ConfigError(f"block {k + 1}: {e}") from None
        if out != pair.eb.layers[0]:
            raise ConfigError(f"block {k + 1}: feedforward output {out} does not match "
                              f"first EB layer {pair.eb.layers[0]}")
        for a, b in zip(pair.eb.layers, pair.eb.layers[1:]):
            try:
                coupling_weight_shape(a, b, coupling_kind(a, b))
            except DimensionError as e:
                raise ConfigError(f"block {k + 1}: {e}") from None
        shapes.append((cur, out))
        cur = pair.eb.layers[-1]
    return shapes


def build_model(config):
    """Allocate and initialize every parameter implied by ``config``."""
    shapes = check_shape_chain(config)
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    ffV = config.readout_variance
    st = ParameterStore()
    for k, (pair, (inp, out)) in enumerate(zip(config.blocks, shapes)):
        pre = f"block{k + 1}."
        ff = pair.ff
        if ff.kind == "linear":
            fan = int(np.prod(inp))
            st[pre + "ff.weight"] = init_goe((out[0], fan), ffV, fan, rng, dt)
            if ff.bias:
                st[pre + "ff.bias"] = np.full(out[0], ff.bias_init, dtype=dt)
        else:
            fan = inp[0] * 9
            st[pre + "ff.weight"] = init_goe((out[0], inp[0], 3, 3), ffV, fan, rng, dt)
        if ff.batchnorm:
            C = out[0]
            st[pre + "ff.bn_scale"] = np.ones(C, dtype=dt)
            st[pre + "ff.bn_shift"] = np.zeros(C, dtype=dt)
            st[pre + "ff.bn_mean"] = np.zeros(C, dtype=dt)
            st[pre + "ff.bn_var"] = np.ones(C, dtype=dt)
        layers = pair.eb.layers
        for l, (a, b) in enumerate(zip(layers, layers[1:])):
            kind = coupling_kind(a, b)
            shape = coupling_weight_shape(a, b, kind)
            fan = a[0] * 9 if kind == "conv" else int(np.prod(a))
            st[f"{pre}eb.theta{l}"] = init_goe(shape, config.V, fan, rng, dt)
        if pair.eb.bias:
            for l, shape in enumerate(layers):
                st[f"{pre}eb.bias{l}"] = np.full(shape, pair.eb.bias_init, dtype=dt)
    last = int(np.prod(config.blocks[-1].eb.layers[-1]))
    st["readout.weight"] = init_goe((config.num_classes, last), ffV, last, rng, dt)
    return st, Model(config, st)


def forward_inference(model, x, mode="train", update_running=True, T=None, schedule=None):
    """Alternate feedforward blocks and free relaxations (zero-initialized)."""
    cfg = model.config
    x = np.asarray(x, dtype=model.dtype)
    if x.shape[1:] != cfg.input_shape:
        raise DimensionError(f"input {x.shape[1:]} does not match model input {cfg.input_shape}")
    settings = RelaxationSettings(T or cfg.T_free, schedule or cfg.schedule, "zeros", 0.0)
    states, xs, caches, inputs = [], [], [], []
    s_prev = x
    for k in range(model.num_blocks):
        xk, cache = ff_forward(model.ff_params(k), s_prev, mode, update_running)
        try:
            s = relax(model.eb_params(k), xk, model.act, settings)
        except DivergenceError as e:
            e.block = k + 1
            raise
        inputs.append(s_prev)
        xs.append(xk)
        caches.append(cache)
        states.append(s)
        s_prev = s[-1]
    return InferenceRecord(states, xs, caches, inputs, readout_logits(model.w_out, s_prev))


def predict(model, x, batch_size=512):
    out = []
    for i in range(0, len(x), batch_size):
        out.append(forward_inference(model, x[i:i + batch_size], mode="eval").logits)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(store, path):
    entries, offset, payload = [], 0, []
    for name, arr in store.items():
        code = "f64" if arr.dtype == np.float64 else "f32"
        data = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset})
        payload.append(data)
        offset += len(data)
    header = json.dumps({"tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    n = len(CHECKPOINT_MAGIC)
    if blob[:n] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an ffebm checkpoint (bad magic)")
    if len(blob) < n + 6:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<HI", blob[n:n + 6])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = n + 6 + hlen
    if len(blob) < start:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[n + 6:start].decode("utf-8"))
        entries = header["tensors"]
    except (ValueError, KeyError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from None
    store = ParameterStore()
    for e in entries:
        dt = _DTYPE_CODES.get(e.get("dtype"))
        if dt is None:
            raise FormatError(f"{path}: unknown dtype {e.get('dtype')!r}")
        count = int(np.prod(e["shape"]))
        lo = start + e["offset"]
        hi = lo + count * dt.itemsize
        if hi > len(blob):
            raise FormatError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=lo).reshape(e["shape"])
        store[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return store
