"""
The RTS-DOA network.

    raw 12-ch STFT stack --> CRN enhancement --> enhanced 12-ch stack
    anchor magnitude ------> speaker ConvGLU stack --> one vector per block
    [raw | enhanced | aligned anchor] --> 5 x (ConvGLU -> CrossBand -> NarrowBand)
        --> per-frame linear classifier (36 directions + silence)

All layers are causal in time except the NarrowBand attention, which sees
the whole sequence unless model.causal_attention is set.
"""
import math
from collections import OrderedDict
from typing import NamedTuple

import numpy as np

import numeric_core as nc
from config import ModelConfig
from numeric_core import Graph, ShapeError
from parameter_store import CheckpointError, ParameterStore

MAG_EPS = 1e-8


class ConvGLUParams(NamedTuple):
    content_weight: nc.Tensor
    content_bias: nc.Tensor
    gate_weight: nc.Tensor
    gate_bias: nc.Tensor
    freq_stride: int = 2


# ----------------------------------------------------------------------------
# architecture bookkeeping
# ----------------------------------------------------------------------------

def _conv_width(width, kernel, stride):
    out = (width - kernel) // stride + 1
    if width < kernel or out < 1:
        raise ShapeError(f"frequency width {width} is too small for kernel {kernel}")
    return out


def crn_widths(config):
    """Encoder frequency widths, input first"""
    widths = [config.freq_bins]
    for _ in range(config.crn_layers):
        widths.append(_conv_width(widths[-1], 3, 2))
    return widths


def block_widths(config):
    """Frequency width entering each ConvGLU block, plus the final width"""
    widths = [config.freq_bins]
    for stride in config.glu_freq_strides[:config.blocks]:
        widths.append(_conv_width(widths[-1], config.glu_kernel_freq, stride))
    return widths


def stack_channels(config):
    return config.mics if config.input_mode == "magnitude" else 2 * config.mics


def spatial_input_channels(config):
    per_stack = stack_channels(config)
    return per_stack * (2 if config.use_enhancement else 1) + 1


def parameter_shapes(config):
    """Ordered name -> (shape, fan_in, kind) for every learnable tensor"""
    shapes = OrderedDict()

    def dense(prefix, fan_in, fan_out):
        shapes[f"{prefix}.weight"] = ((fan_out, fan_in), fan_in, "weight")
        shapes[f"{prefix}.bias"] = ((fan_out,), fan_in, "bias")

    def conv(prefix, cin, cout, kt, kf, groups=1):
        fan_in = cin // groups * kt * kf
        shapes[f"{prefix}.weight"] = ((cout, cin // groups, kt, kf), fan_in, "weight")
        shapes[f"{prefix}.bias"] = ((cout,), fan_in, "bias")

    def norm(prefix, width):
        if config.layer_norm:
            shapes[f"{prefix}.gamma"] = ((width,), width, "gamma")
            shapes[f"{prefix}.beta"] = ((width,), width, "beta")

    complex_channels = 2 * config.mics
    if config.use_enhancement:
        ladder = [complex_channels] + [config.enh_channels] * config.crn_layers
        for i in range(config.crn_layers):
            conv(f"crn.enc{i}", ladder[i], ladder[i + 1], 2, 3)
        bottleneck = config.enh_channels * crn_widths(config)[-1]
        width = bottleneck
        for layer in range(config.crn_lstm_layers):
            hidden = config.crn_hidden
            shapes[f"crn.lstm{layer}.w_ih"] = ((4 * hidden, width), width, "weight")
            shapes[f"crn.lstm{layer}.w_hh"] = ((4 * hidden, hidden), hidden, "weight")
            shapes[f"crn.lstm{layer}.bias"] = ((4 * hidden,), width, "bias")
            width = hidden
        if width != bottleneck:
            dense("crn.proj", width, bottleneck)
        for i in range(config.crn_layers):
            cout = complex_channels if i == config.crn_layers - 1 else config.enh_channels
            fan_in = 2 * config.enh_channels * 6
            shapes[f"crn.dec{i}.weight"] = ((2 * config.enh_channels, cout, 2, 3), fan_in, "weight")
            shapes[f"crn.dec{i}.bias"] = ((cout,), fan_in, "bias")

    spk = config.speaker_channels if config.use_speaker_features else 0
    if config.use_speaker_features:
        cin = 1
        for k in range(config.blocks):
            for path in ("content", "gate"):
                conv(f"speaker{k}.{path}", cin, spk, config.speaker_kernel_time, config.glu_kernel_freq)
            cin = spk

    widths = block_widths(config)
    cin = spatial_input_channels(config)
    c = config.spatial_channels
    for k in range(config.blocks):
        for path in ("content", "gate"):
            conv(f"glu{k}.{path}", cin + spk, c, config.glu_kernel_time, config.glu_kernel_freq)
        width = widths[k + 1]
        norm(f"cross{k}.norm1", c)
        conv(f"cross{k}.fconv1", c, c, 1, config.fconv_kernel, groups=c)
        norm(f"cross{k}.norm2", c)
        dense(f"cross{k}.full_in", c, config.hidden_h)
        shapes[f"cross{k}.flinear.weight"] = ((config.hidden_h, width, width), width, "weight")
        shapes[f"cross{k}.flinear.bias"] = ((config.hidden_h, width), width, "bias")
        dense(f"cross{k}.full_out", config.hidden_h, c)
        norm(f"cross{k}.norm3", c)
        conv(f"cross{k}.fconv2", c, c, 1, config.fconv_kernel, groups=c)
        norm(f"narrow{k}.norm1", c)
        dense(f"narrow{k}.qkv", c, 3 * c)
        dense(f"narrow{k}.attn_out", c, c)
        norm(f"narrow{k}.norm2", c)
        dense(f"narrow{k}.ffn_in", c, config.hidden_h2)
        conv(f"narrow{k}.tconv", config.hidden_h2, config.hidden_h2, 1, config.tconv_kernel, groups=config.tconv_groups)
        dense(f"narrow{k}.ffn_out", config.hidden_h2, c)
        cin = c

    out_channels = c if config.blocks else cin
    dense("classifier", out_channels * widths[-1], config.classes)
    return shapes


def init_parameters(config, dtype=np.float32, seed=None):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains"""
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    store = ParameterStore()
    for name, (shape, fan_in, kind) in parameter_shapes(config).items():
        if kind == "weight":
            bound = 1.0 / math.sqrt(fan_in)
            array = rng.uniform(-bound, bound, size=shape)
        elif kind == "gamma":
            array = np.ones(shape)
        else:
            array = np.zeros(shape)
        store.add(name, array.astype(dtype))
    return store


def count_parameters(config):
    return int(sum(int(np.prod(shape)) for shape, _, _ in parameter_shapes(config).values()))


def count_macs(config, frames_per_second=100):
    """Multiply-accumulates per second of input audio"""
    t = frames_per_second
    macs = 0
    complex_channels = 2 * config.mics
    if config.use_enhancement:
        widths = crn_widths(config)
        ladder = [complex_channels] + [config.enh_channels] * config.crn_layers
        for i in range(config.crn_layers):
            macs += t * widths[i + 1] * ladder[i + 1] * ladder[i] * 6
        width = config.enh_channels * widths[-1]
        for _ in range(config.crn_lstm_layers):
            macs += t * 4 * config.crn_hidden * (width + config.crn_hidden)
            width = config.crn_hidden
        if width != config.enh_channels * widths[-1]:
            macs += t * width * config.enh_channels * widths[-1]
        for i in range(config.crn_layers):
            cout = complex_channels if i == config.crn_layers - 1 else config.enh_channels
            macs += t * widths[config.crn_layers - 1 - i] * cout * 2 * config.enh_channels * 6
    widths = block_widths(config)
    spk = config.speaker_channels if config.use_speaker_features else 0
    cin = spatial_input_channels(config)
    c = config.spatial_channels
    for k in range(config.blocks):
        f = widths[k + 1]
        macs += 2 * t * f * c * (cin + spk) * config.glu_kernel_time * config.glu_kernel_freq
        macs += 2 * t * f * c * config.fconv_kernel
        macs += 2 * t * f * c * config.hidden_h + t * config.hidden_h * f * f
        macs += t * f * (3 * c * c + c * c + 2 * t * c)
        macs += t * f * (2 * c * config.hidden_h2 + config.hidden_h2 * config.hidden_h2 // config.tconv_groups * config.tconv_kernel)
        cin = c
    out_channels = c if config.blocks else cin
    macs += t * out_channels * widths[-1] * config.classes
    return int(macs)


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------

def conv_glu(x, p):
    """tanh(x * W1 + b1) . sigmoid(x * W2 + b2), causal in time"""
    kt = p.content_weight.shape[2]
    padding = ((kt - 1, 0), (0, 0))
    stride = (1, p.freq_stride)
    content = nc.conv2d(x, p.content_weight, p.content_bias, stride=stride, padding=padding)
    gate = nc.conv2d(x, p.gate_weight, p.gate_bias, stride=stride, padding=padding)
    return nc.mul(nc.tanh(content), nc.sigmoid(gate))


def glu_params(params, prefix, freq_stride):
    return ConvGLUParams(
        params[f"{prefix}.content.weight"],
        params[f"{prefix}.content.bias"],
        params[f"{prefix}.gate.weight"],
        params[f"{prefix}.gate.bias"],
        freq_stride,
    )


def _norm(params, prefix, x):
    if f"{prefix}.gamma" not in params:
        return x
    return nc.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def _dense(params, prefix, x):
    return nc.linear(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def _lstm_layer(x, w_ih, w_hh, bias):
    """x[B, T, D] -> hidden states [B, T, H]"""
    batch, frames, _ = x.shape
    hidden = w_hh.shape[1]
    gates = nc.linear(x, w_ih, bias)
    state = nc.constant(np.zeros((batch, 2 * hidden), dtype=x.dtype))
    outputs = []
    for t in range(frames):
        state = nc.lstm_cell(gates[:, t, :], state, w_hh)
        outputs.append(state[:, :hidden])
    return nc.stack(outputs, axis=1)


def crn_enhance(stack, params, config):
    """[B, 12, T, F] real/imag stack -> enhanced stack of the same shape"""
    widths = crn_widths(config)
    skips = []
    h = stack
    for i in range(config.crn_layers):
        h = nc.conv2d(h, params[f"crn.enc{i}.weight"], params[f"crn.enc{i}.bias"], stride=(1, 2), padding=((1, 0), (0, 0)))
        h = nc.elu(h)
        skips.append(h)
    batch, channels, frames, width = h.shape
    seq = nc.reshape(nc.transpose(h, (0, 2, 1, 3)), (batch, frames, channels * width))
    for layer in range(config.crn_lstm_layers):
        seq = _lstm_layer(
            seq, params[f"crn.lstm{layer}.w_ih"], params[f"crn.lstm{layer}.w_hh"], params[f"crn.lstm{layer}.bias"]
        )
    if "crn.proj.weight" in params:
        seq = _dense(params, "crn.proj", seq)
    h = nc.transpose(nc.reshape(seq, (batch, frames, channels, width)), (0, 2, 1, 3))
    for i in range(config.crn_layers):
        h = nc.concat([h, skips[config.crn_layers - 1 - i]], axis=1)
        target = widths[config.crn_layers - 1 - i]
        output_padding = target - ((h.shape[3] - 1) * 2 + 3)
        h = nc.conv_transpose2d(
            h, params[f"crn.dec{i}.weight"], params[f"crn.dec{i}.bias"], stride=(1, 2), output_padding=(0, output_padding)
        )
        h = h[:, :, :frames, :]
        if i < config.crn_layers - 1:
            h = nc.elu(h)
    return h


def align_anchor(anchor_mag, frames):
    """Tile the anchor along time, then truncate to `frames`"""
    anchor_mag = np.asarray(anchor_mag)
    length = anchor_mag.shape[-2]
    if length == 0:
        raise ShapeError("anchor has no frames")
    reps = -(-frames // length)
    tiled = np.concatenate([anchor_mag] * reps, axis=-2)
    return tiled[..., :frames, :]


def speaker_features(anchor_mag, params, config):
    """
    Anchor magnitude [B, 1, Ta, F] -> one [B, C] vector per block.

    Each ConvGLU stage feeds the next; its output is averaged over frequency
    then over anchor frames.
    """
    if anchor_mag.shape[2] == 0:
        raise ShapeError("anchor has no frames")
    vectors = []
    h = anchor_mag
    for k in range(config.blocks):
        h = conv_glu(h, glu_params(params, f"speaker{k}", config.glu_freq_strides[k]))
        vectors.append(nc.mean(h, axis=(2, 3)))
    return vectors


def cross_band(h, params, prefix, config):
    """Per-frame processing along frequency: F-GConv1d, full-band F-Linear, F-GConv1d"""
    batch, channels, frames, width = h.shape
    x = nc.transpose(h, (0, 2, 3, 1))  # [B, T, F, C]

    def fconv(x, name):
        y = nc.reshape(nc.transpose(_norm(params, f"{prefix}.{name[0]}", x), (0, 1, 3, 2)), (batch * frames, channels, width))
        pad = config.fconv_kernel // 2
        y = nc.conv1d(y, nc.reshape(params[f"{prefix}.{name[1]}.weight"], (channels, 1, config.fconv_kernel)),
                      params[f"{prefix}.{name[1]}.bias"], padding=(pad, config.fconv_kernel - 1 - pad), groups=channels)
        y = nc.transpose(nc.reshape(nc.silu(y), (batch, frames, channels, width)), (0, 1, 3, 2))
        return nc.add(x, y)

    x = fconv(x, ("norm1", "fconv1"))
    y = nc.silu(_dense(params, f"{prefix}.full_in", _norm(params, f"{prefix}.norm2", x)))
    hidden = y.shape[-1]
    y = nc.reshape(nc.transpose(y, (0, 1, 3, 2)), (batch, frames, hidden, 1, width))
    weight = nc.transpose(params[f"{prefix}.flinear.weight"], (0, 2, 1))
    y = nc.matmul(y, weight)
    y = nc.add(y, nc.reshape(params[f"{prefix}.flinear.bias"], (hidden, 1, width)))
    y = nc.transpose(nc.reshape(nc.silu(y), (batch, frames, hidden, width)), (0, 1, 3, 2))
    x = nc.add(x, _dense(params, f"{prefix}.full_out", y))
    x = fconv(x, ("norm3", "fconv2"))
    return nc.transpose(x, (0, 3, 1, 2))


def narrow_band(h, params, prefix, config):
    """Per-frequency processing along time: multi-head self-attention, then T-ConvFFN"""
    batch, channels, frames, width = h.shape
    heads = config.heads
    head_dim = channels // heads
    x = nc.transpose(h, (0, 3, 2, 1))  # [B, F, T, C]
    qkv = _dense(params, f"{prefix}.qkv", _norm(params, f"{prefix}.norm1", x))
    qkv = nc.transpose(nc.reshape(qkv, (batch, width, frames, 3, heads, head_dim)), (3, 0, 1, 4, 2, 5))
    attended = nc.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2], causal=config.causal_attention)
    attended = nc.reshape(nc.transpose(attended, (0, 1, 3, 2, 4)), (batch, width, frames, channels))
    x = nc.add(x, _dense(params, f"{prefix}.attn_out", attended))

    y = nc.silu(_dense(params, f"{prefix}.ffn_in", _norm(params, f"{prefix}.norm2", x)))
    hidden = y.shape[-1]
    y = nc.reshape(nc.transpose(y, (0, 1, 3, 2)), (batch * width, hidden, frames))
    k = config.tconv_kernel
    padding = (k - 1, 0) if config.causal_attention else (k // 2, k - 1 - k // 2)
    weight = nc.reshape(params[f"{prefix}.tconv.weight"], (hidden, hidden // config.tconv_groups, k))
    y = nc.silu(nc.conv1d(y, weight, params[f"{prefix}.tconv.bias"], padding=padding, groups=config.tconv_groups))
    y = nc.transpose(nc.reshape(y, (batch, width, hidden, frames)), (0, 1, 3, 2))
    x = nc.add(x, _dense(params, f"{prefix}.ffn_out", y))
    return nc.transpose(x, (0, 3, 2, 1))


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except ShapeError as err:
        raise ShapeError(f"{name}: {err}") from None


def _magnitudes(stack):
    re = stack[:, 0::2]
    im = stack[:, 1::2]
    return nc.sqrt(nc.add(nc.add(nc.mul(re, re), nc.mul(im, im)), MAG_EPS))


def spatial_module(raw, enhanced, anchor_aligned, spk, params, config):
    """Spatial input [B, Cin, T, F] -> logits [B, T, 37]"""
    inputs = [raw] + ([enhanced] if enhanced is not None else []) + [anchor_aligned]
    x = _stage("spatial input", nc.concat, inputs, 1)
    for k in range(config.blocks):
        if spk:
            batch, _, frames, width = x.shape
            vec = nc.reshape(spk[k], (batch, spk[k].shape[1], 1, 1))
            x = _stage(f"speaker concat {k}", nc.concat, [x, nc.broadcast_to(vec, (batch, vec.shape[1], frames, width))], 1)
        x = _stage(f"convglu {k}", conv_glu, x, glu_params(params, f"glu{k}", config.glu_freq_strides[k]))
        x = _stage(f"crossband {k}", cross_band, x, params, f"cross{k}", config)
        x = _stage(f"narrowband {k}", narrow_band, x, params, f"narrow{k}", config)
    batch, channels, frames, width = x.shape
    flat = nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (batch, frames, channels * width))
    return _stage("classifier", _dense, params, "classifier", flat)


def rtsdoa_forward(params, raw_stack, anchor_mag, config):
    """
    raw_stack [B, 12, T, F] and anchor_mag [B, Ta, F] -> {"enhanced", "logits"}.

    enhanced is None when the CRN is ablated.
    """
    raw = raw_stack if isinstance(raw_stack, nc.Tensor) else nc.constant(raw_stack)
    if raw.ndim != 4 or raw.shape[1] != 2 * config.mics or raw.shape[3] != config.freq_bins:
        raise ShapeError(f"input: expected [B, {2 * config.mics}, T, {config.freq_bins}] stack, got {raw.shape}")
    anchor = anchor_mag.data if isinstance(anchor_mag, nc.Tensor) else np.asarray(anchor_mag)
    if anchor.ndim == 2:
        anchor = anchor[None]
    if anchor.shape[0] != raw.shape[0] or anchor.shape[-1] != config.freq_bins:
        raise ShapeError(f"anchor: shape {anchor.shape} does not fit input {raw.shape}")
    anchor = anchor.astype(raw.dtype, copy=False)
    frames = raw.shape[2]
    enhanced = _stage("crn", crn_enhance, raw, params, config) if config.use_enhancement else None
    spk = None
    if config.use_speaker_features:
        spk = _stage("speaker", speaker_features, nc.constant(anchor[:, None]), params, config)
    aligned = nc.constant(_stage("anchor", align_anchor, anchor, frames)[:, None])
    if config.input_mode == "magnitude":
        spatial_raw = _magnitudes(raw)
        spatial_enh = _magnitudes(enhanced) if enhanced is not None else None
    else:
        spatial_raw, spatial_enh = raw, enhanced
    logits = spatial_module(spatial_raw, spatial_enh, aligned, spk, params, config)
    return {"enhanced": enhanced, "logits": logits}


def miniature_config(**changes):
    """Small model (9 bins, one block) for gradient checks"""
    base = dict(
        freq_bins=9,
        enh_channels=4,
        crn_layers=2,
        crn_hidden=4,
        crn_lstm_layers=1,
        blocks=1,
        glu_freq_strides=(2,),
        spatial_channels=4,
        speaker_channels=4,
        hidden_h=4,
        hidden_h2=8,
        tconv_groups=4,
        fconv_kernel=3,
        tconv_kernel=3,
    )
    base.update(changes)
    return ModelConfig(**base).validate()


def build_graph(store, config):
    def fn(params, raw_stack, anchor_mag):
        return rtsdoa_forward(params, raw_stack, anchor_mag, config)

    return Graph(fn, store, name="rtsdoa")


class RTSDOA:
    """A configured network and its parameters."""

    def __init__(self, config=None, store=None, dtype=np.float32):
        self.config = (config or ModelConfig()).validate()
        self.store = store if store is not None else init_parameters(self.config, dtype=dtype)
        expected = parameter_shapes(self.config)
        if self.store.shapes() != {name: shape for name, (shape, _, _) in expected.items()}:
            raise CheckpointError("parameters do not match the model config")

    @classmethod
    def from_checkpoint(cls, path, config):
        return cls(config, ParameterStore.load(path))

    @property
    def graph(self):
        return build_graph(self.store, self.config)

    def count_parameters(self):
        return self.store.count()

    def forward(self, raw_stack, anchor_mag):
        """Batched numpy forward pass; returns numpy arrays"""
        dtype = self.store.dtype or np.float32
        out = nc.forward(
            self.graph,
            {"raw_stack": np.asarray(raw_stack, dtype=dtype), "anchor_mag": np.asarray(anchor_mag, dtype=dtype)},
        )
        enhanced = out["enhanced"]
        return {"enhanced": None if enhanced is None else enhanced.data, "logits": out["logits"].data}

    def save(self, path):
        self.store.save(path)
