"""Cycle-level behavioral model of binary crossbars with spatial-dropout modules.

Weights are stored one sign (+1/-1) per cell. A conv layer is mapped either
as one tall crossbar whose columns are unrolled kernels (strategy 1, "S1") or
as K*K crossbars of C_in x C_out cells, one per kernel position (strategy
2, "S2"). Moving windows of the input feature map are streamed one per
cycle. Each dropout module is a stochastic MTJ bit that gates a group of
word lines: in S1 the K*K rows of one input channel, in S2 the same row
index of every crossbar.

Peripherals are ideal: partial sums are accumulated exactly in float64 and
the ADC/shift-add chain is lossless, so on integer inputs the simulator and
the reference convolution agree bit for bit.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from spindrop import dropout as dr
from spindrop import tensor as tc
from spindrop.errors import ConfigurationError, DimensionError, FormatError, IllegalTransitionError

S1 = "S1"
S2 = "S2"
FC = "FC"

S1_CONV = "S1-conv"
S2_CONV = "S2-conv"
FLATTEN = "flatten-no-avgpool"
AVGPOOL = "with-avgpool"
MODES = (S1_CONV, S2_CONV, FLATTEN, AVGPOOL)

SAMPLING_LATENCY_NS = 15.0

PARALLEL = "P"  # low resistance, keep
ANTIPARALLEL = "AP"  # high resistance, drop


# -- layouts -------------------------------------------------------------


@dataclass
class CrossbarLayout:
    """Placement of one layer's signs on crossbars.

    ``row_groups[r]`` is the dropout module driving row ``r``; in S2 the
    same table applies to every one of the K*K crossbars.
    """

    strategy: str
    crossbars: list
    row_groups: np.ndarray
    dims: dict

    @property
    def n_modules(self) -> int:
        return int(self.row_groups.max()) + 1 if len(self.row_groups) else 0

    @property
    def shape(self):
        return self.crossbars[0].shape


def _signs(w) -> np.ndarray:
    if isinstance(w, tc.ConvWeight):
        return w.binary_view()
    a = np.asarray(w)
    if not np.all(np.abs(a) == 1):
        raise ValueError("crossbar cells hold binary weights; pass +-1 signs or a ConvWeight")
    return a.astype(np.float64)


def map_strategy1(w, stride=None, padding=None) -> CrossbarLayout:
    """One (K*K*C_in) x C_out crossbar; column j is kernel j unrolled channel-major."""
    signs = _signs(w)
    c_out, c_in, k, _ = signs.shape
    xbar = signs.reshape(c_out, -1).T.copy()
    return CrossbarLayout(S1, [xbar], np.arange(c_in * k * k) // (k * k), _dims(w, signs, stride, padding))


def map_strategy2(w, stride=None, padding=None) -> CrossbarLayout:
    """K*K crossbars of C_in x C_out; crossbar (u, v) cell (i, j) = sign(w[j, i, u, v])."""
    signs = _signs(w)
    c_out, c_in, k, _ = signs.shape
    xbars = [signs[:, :, u, v].T.copy() for u in range(k) for v in range(k)]
    return CrossbarLayout(S2, xbars, np.arange(c_in), _dims(w, signs, stride, padding))


def map_linear(W, group=1) -> CrossbarLayout:
    """Fully connected layer: an in x out crossbar, ``group`` consecutive rows per module."""
    signs = _signs(W)
    out_f, in_f = signs.shape
    if in_f % group:
        raise ConfigurationError(f"group size {group} does not divide {in_f} inputs")
    return CrossbarLayout(FC, [signs.T.copy()], np.arange(in_f) // group,
                          {"in": in_f, "out": out_f, "group": group})


def _dims(w, signs, stride, padding):
    c_out, c_in, k, _ = signs.shape
    if isinstance(w, tc.ConvWeight):
        stride = w.stride if stride is None else stride
        padding = w.padding if padding is None else padding
    return {"K": k, "C_in": c_in, "C_out": c_out, "S": stride or 1, "pad": padding or 0}


def unmap(layout: CrossbarLayout) -> np.ndarray:
    """Recover the layer's sign tensor from its crossbars."""
    if layout.strategy == FC:
        return layout.crossbars[0].T.copy()
    k, c_in, c_out = layout.dims["K"], layout.dims["C_in"], layout.dims["C_out"]
    if layout.strategy == S1:
        return layout.crossbars[0].T.reshape(c_out, c_in, k, k).copy()
    out = np.empty((c_out, c_in, k, k))
    for idx, xbar in enumerate(layout.crossbars):
        out[:, :, idx // k, idx % k] = xbar.T
    return out


def dump_layout(layout: CrossbarLayout) -> str:
    """JSON with strategy, dims, the row-group table and base64 sign bitmaps."""
    doc = {
        "strategy": layout.strategy,
        "dims": layout.dims,
        "row_groups": layout.row_groups.astype(int).tolist(),
        "crossbars": [
            {"rows": int(x.shape[0]), "cols": int(x.shape[1]),
             "signs": base64.b64encode(np.packbits(x.ravel() > 0).tobytes()).decode("ascii")}
            for x in layout.crossbars
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_layout(text: str) -> CrossbarLayout:
    try:
        doc = json.loads(text)
        xbars = []
        for x in doc["crossbars"]:
            rows, cols = x["rows"], x["cols"]
            bits = np.unpackbits(np.frombuffer(base64.b64decode(x["signs"]), dtype=np.uint8))[:rows * cols]
            if bits.size != rows * cols:
                raise FormatError(f"sign bitmap holds {bits.size} cells, expected {rows * cols}")
            xbars.append(np.where(bits.reshape(rows, cols) == 1, 1.0, -1.0))
        return CrossbarLayout(doc["strategy"], xbars, np.asarray(doc["row_groups"], dtype=np.int64), doc["dims"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed layout file: {exc}") from None


# -- input streaming ---------------------------------------------------


@dataclass
class InputStream:
    """Moving windows of one input feature map, one per cycle.

    ``cycles`` is (N, C_in*K*K) for S1 and (N, K*K, C_in) for S2.
    ``sources`` gives the IFM coordinate (c, h, w) for every streamed
    element in the same layout, with -1 rows for zero padding.
    """

    strategy: str
    cycles: np.ndarray
    sources: np.ndarray
    out_hw: tuple

    @property
    def N(self) -> int:
        return self.cycles.shape[0]

    def shared_coordinates(self) -> dict:
        """IFM coordinates that appear in more than one cycle -> [(cycle, position), ...]."""
        flat = self.sources.reshape(self.N, -1, 3)
        seen = {}
        for t in range(self.N):
            for pos, coord in enumerate(map(tuple, flat[t])):
                if coord[0] < 0:
                    continue
                seen.setdefault(coord, []).append((t, pos))
        return {c: v for c, v in seen.items() if len({t for t, _ in v}) > 1}


def stream_moving_windows(ifm, K, S=1, pad=0, strategy=S1) -> InputStream:
    ifm = np.asarray(ifm, dtype=np.float64)
    if ifm.ndim == 4:
        if ifm.shape[0] != 1:
            raise DimensionError("stream one feature map at a time")
        ifm = ifm[0]
    c, h, w = ifm.shape
    ho, wo = tc.out_size(h, K, S, pad), tc.out_size(w, K, S, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"window {K} stride {S} pad {pad} does not fit {ifm.shape}")
    cols = tc.im2col(ifm[None], K, S, pad)[0].reshape(ho * wo, c, K, K)
    cc, hh, ww = np.meshgrid(np.arange(c), np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([cc, hh, ww], axis=-1).astype(np.int64)  # (C, H, W, 3)
    if pad:
        coords = np.pad(coords, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=-1)
    hp, wp = h + 2 * pad, w + 2 * pad
    src = np.empty((ho * wo, c, K, K, 3), dtype=np.int64)
    for t in range(ho * wo):
        r, q = divmod(t, wo)
        r0, q0 = r * S, q * S
        if r0 + K > hp or q0 + K > wp:
            raise RuntimeError("moving window left the padded feature map")
        src[t] = coords[:, r0:r0 + K, q0:q0 + K]
    if strategy == S1:
        return InputStream(S1, cols.reshape(ho * wo, -1), src.reshape(ho * wo, -1, 3), (ho, wo))
    if strategy == S2:
        return InputStream(S2, cols.transpose(0, 2, 3, 1).reshape(ho * wo, K * K, c),
                           src.transpose(0, 2, 3, 1, 4).reshape(ho * wo, K * K, c, 3), (ho, wo))
    raise ConfigurationError(f"unknown strategy {strategy!r}")


def stream_vector(x) -> InputStream:
    """A flattened feature vector applied to an FC crossbar in one cycle."""
    x = np.asarray(x, dtype=np.float64).ravel()
    src = np.stack([np.arange(x.size), np.zeros(x.size, int), np.zeros(x.size, int)], axis=-1)
    return InputStream(FC, x[None], src[None], (1, 1))


# -- stochastic MTJ dropout module ----------------------------------------


@dataclass
class MTJDropoutModule:
    """One stochastic MTJ bit with a hold latch.

    SET switches to antiparallel (drop) with ``set_probability``; otherwise
    the cell stays in (or is RESET to) parallel (keep).
    """

    id: int
    set_probability: float
    state: str = PARALLEL
    hold: bool = False
    sampling_latency_ns: float = SAMPLING_LATENCY_NS

    @property
    def keep(self) -> bool:
        return self.state == PARALLEL

    def force(self, keep: bool):
        if self.hold:
            raise IllegalTransitionError(f"module {self.id}: cannot write while hold is asserted")
        self.state = PARALLEL if keep else ANTIPARALLEL
        return self


def mtj_sample(module: MTJDropoutModule, rng: np.random.Generator) -> MTJDropoutModule:
    if module.hold:
        raise IllegalTransitionError(f"module {module.id}: resampling while hold is asserted")
    module.state = ANTIPARALLEL if rng.random() < module.set_probability else PARALLEL
    return module


def make_modules(n, rho):
    rho = dr.check_rho(rho)
    return [MTJDropoutModule(i, rho) for i in range(n)]


# -- simulation ----------------------------------------------------------


def _expected_modules(layout, mode):
    if mode in (S1_CONV, S2_CONV):
        return layout.dims["C_in"]
    return layout.n_modules


def simulate_layer(layout: CrossbarLayout, stream: InputStream, modules=None, mode=None, rng=None, *,
                   scale_rho=None, groups_per_step=None, partial_sum_hook=None, trace=None) -> np.ndarray:
    """Run one layer pass and return the OFM (C_out, H_out, W_out), or (out,) for FC.

    With ``rng`` the modules are sampled following the hold policy of
    ``mode``; with ``rng=None`` their current (e.g. forced) states are used.
    Rows whose module reads AP contribute nothing. Group partial sums pass
    through ``partial_sum_hook`` (identity when None) and accumulate exactly.
    Kept contributions are scaled by 1/(1-rho) at readout when ``scale_rho``
    is given. ``trace`` collects the module keep-bits seen at every cycle.
    """
    if layout.strategy != stream.strategy:
        raise ConfigurationError(f"layout strategy {layout.strategy} does not match stream {stream.strategy}")
    if modules is not None:
        if mode not in MODES:
            raise ConfigurationError(f"unknown dropout mode {mode!r}")
        if (mode == S1_CONV and layout.strategy != S1) or (mode == S2_CONV and layout.strategy != S2) \
                or (mode in (FLATTEN, AVGPOOL) and layout.strategy != FC):
            raise ConfigurationError(f"mode {mode} cannot drive a {layout.strategy} layout")
        want = _expected_modules(layout, mode)
        if len(modules) != want:
            raise ConfigurationError(f"{mode} needs {want} dropout modules, got {len(modules)}")

    groups = layout.row_groups
    n_groups = int(groups.max()) + 1 if groups.size else 0
    step = groups_per_step or n_groups
    c_out = layout.shape[1]
    out = np.zeros((stream.N, c_out))
    holds = mode in (S1_CONV, S2_CONV, FLATTEN)

    def sample_all():
        for m in modules:
            mtj_sample(m, rng)

    for t in range(stream.N):
        if modules is not None:
            if rng is not None and (t == 0 or not holds):
                sample_all()
            if t == 0 or not holds:
                for m in modules:
                    m.hold = True
            bits = np.fromiter((m.keep for m in modules), dtype=bool, count=len(modules))
            if not holds:
                for m in modules:
                    m.hold = False
        else:
            bits = np.ones(n_groups, dtype=bool)
        if trace is not None:
            trace.append(bits.copy())
        row_on = bits[groups].astype(np.float64)
        x = stream.cycles[t]
        acc = np.zeros(c_out)
        for g0 in range(0, n_groups, step):
            sel = (groups >= g0) & (groups < g0 + step)
            if layout.strategy == S2:
                part = np.zeros(c_out)
                for idx, xbar in enumerate(layout.crossbars):
                    part = part + (x[idx][sel] * row_on[sel]) @ xbar[sel]
            else:
                part = (x[sel] * row_on[sel]) @ layout.crossbars[0][sel]
            if partial_sum_hook is not None:
                part = partial_sum_hook(part)
            acc = acc + part
        out[t] = acc
    if modules is not None:
        for m in modules:
            m.hold = False
    if scale_rho is not None:
        out = out * dr.keep_scale(scale_rho)
    if layout.strategy == FC:
        return out[0]
    ho, wo = stream.out_hw
    return out.T.reshape(c_out, ho, wo)


# -- network level -----------------------------------------------------


def build_layouts(net, strategy=S1) -> dict:
    """Crossbar layouts for every MVM layer of ``net``, keyed by layer index."""
    from spindrop.model import Conv

    layouts = {}
    for i in net.mvm_indices():
        layer = net.layers[i]
        if isinstance(layer, Conv):
            mapper = map_strategy1 if strategy == S1 else map_strategy2
            layouts[i] = mapper(layer.weight(), layer.stride, layer.padding)
        else:
            layouts[i] = map_linear(layer.weight(), layer.drop_group)
    return layouts


class CrossbarEngine:
    """Drop-in MVM engine for :meth:`BinaryConvNet.forward` backed by ``simulate_layer``."""

    def __init__(self, layouts, strategy=None, partial_sum_hook=None):
        self.layouts = layouts
        self.partial_sum_hook = partial_sum_hook
        self.strategy = strategy

    def mvm(self, net, index, x, keep=None, rho=None, rng=None):
        layer = net.layers[index]
        layout = self.layouts[index]
        q = layer.mvm_input(x)
        dropping = rho is not None and (keep is not None or rng is not None)
        mode = None
        if dropping:
            mode = net.dropout_mode(index)
            if mode == "conv":
                mode = S1_CONV if layout.strategy == S1 else S2_CONV
        outs = []
        for b in range(q.shape[0]):
            if layout.strategy == FC:
                stream = stream_vector(q[b])
            else:
                d = layout.dims
                stream = stream_moving_windows(q[b], d["K"], d["S"], d["pad"], layout.strategy)
            modules = None
            if dropping:
                modules = make_modules(_expected_modules(layout, mode), rho)
                if keep is not None:
                    kb = np.broadcast_to(keep, (q.shape[0], len(modules)))[b]
                    for m, k in zip(modules, kb):
                        m.force(bool(k))
            outs.append(simulate_layer(layout, stream, modules, mode, rng if keep is None else None,
                                       scale_rho=rho if dropping else None,
                                       partial_sum_hook=self.partial_sum_hook))
        out = np.stack(outs)
        if layer.input_levels:
            out = out / layer.input_levels
        return out


def simulate_network(net, layouts, x, T, seed):
    """MC inference through simulated crossbars; same contract as :func:`mc_predict`."""
    for i in net.mvm_indices():
        if i not in layouts:
            raise ConfigurationError(f"layer {i} has no crossbar layout")
    return dr.mc_predict(net, x, T, seed, engine=CrossbarEngine(layouts))


class _Recorder:
    """Wraps an engine (or the layers' own MVM when ``inner`` is None) and keeps every MVM output."""

    def __init__(self, inner=None):
        self.inner = inner
        self.ofms = {}

    def mvm(self, net, index, x, keep=None, rho=None, rng=None):
        if self.inner is not None:
            out = self.inner.mvm(net, index, x, keep=keep, rho=rho, rng=rng)
        else:
            layer = net.layers[index]
            if keep is None and rng is not None:
                keep = dr.sample_spatial_mask(layer.drop_channels, rho, rng, batch=x.shape[0]).keep
            out = layer.forward(x, False, keep=keep, rho=rho if keep is not None else None)
        self.ofms[index] = out
        return out


def compare_ofms(net, layouts, x, seed, run=0):
    """One MC pass through both engines; returns ``{layer: (reference, crossbar)}`` MVM outputs."""
    ref, hw = _Recorder(), _Recorder(CrossbarEngine(layouts))
    net.forward(x, mc_seed=seed, run=run, engine=ref)
    net.forward(x, mc_seed=seed, run=run, engine=hw)
    return {i: (ref.ofms[i], hw.ofms[i]) for i in sorted(ref.ofms)}


# -- mask-inconsistency demonstration --------------------------------------


@dataclass
class ViolationReport:
    count: int
    coordinates: list = field(default_factory=list)
    shared: int = 0


def sample_per_cycle_element_masks(stream: InputStream, rho, rng) -> np.ndarray:
    """Element-wise baseline: a fresh keep bit for every streamed element, every cycle."""
    rho = dr.check_rho(rho)
    return ~(rng.random(stream.sources.shape[:-1]) < rho)


def demonstrate_mask_inconsistency(stream: InputStream, per_cycle_element_masks) -> ViolationReport:
    """List shared IFM coordinates whose keep bit differs between overlapping windows."""
    masks = np.asarray(per_cycle_element_masks).reshape(stream.N, -1)
    shared = stream.shared_coordinates()
    bad = []
    for coord, uses in shared.items():
        if len({bool(masks[t, pos]) for t, pos in uses}) > 1:
            bad.append(coord)
    return ViolationReport(len(bad), sorted(bad), len(shared))
