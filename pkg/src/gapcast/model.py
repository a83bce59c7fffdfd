"""Encoder-decoder forecasters trained by exact backpropagation through time.

Two model families share the training loop, bridge, head, and checkpoint
format:

* :class:`DualEncoderModel` never imputes its input window. One GRU reads the
  available points in order; a second GRU reads the (start, width) stream of
  missing blocks; a bridge maps both final states to the decoder's initial
  state. Decoder variants differ in how the horizon's own gaps are handled.
* :class:`SingleEncoderModel` is the conventional shape the benchmark
  compares against: one encoder over the full, imputation-filled window
  (or a decay-cell encoder over the raw gappy window).

Training batches examples without any padding by grouping them on their
exact unroll lengths, so compute tracks the encoded stream lengths rather
than the window length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import cells
from .cells import (GruCache, GruDCache, GruDParams, GruParams, MaskedInput,
                    compute_delta, grud_backward, grud_step, gru_backward,
                    gru_step, init_gru, init_grud)
from .codec import EncodedWindow, decode_window
from .data import ForecastExample
from .errors import (DataError, ExampleRejected, ShapeError, TrainingDiverged,
                     UsageError)
from .imputation import band_fill, mean_fill
from .numerics import Array, Param, make_optimizer, uniform_init

CHECKPOINT_VERSION = 1


class DecoderVariant(str, Enum):
    DEMI = "demi"                        # mean-impute the horizon's gaps
    VARIABLE_LENGTH = "variable_length"  # unroll only the observed prefix
    BINARY_MASK = "binary_mask"          # mean-impute plus availability flag
    DEGD = "degd"                        # decay cell over the horizon's gaps

    @property
    def default_loss_mode(self) -> str:
        return "imputed_targets" if self is DecoderVariant.DEMI else "observed_only"


@dataclass
class ModelConfig:
    exo_dim: int = 1
    target_dim: int = 1
    enc_hidden: int = 7
    dec_hidden: int = 7
    layers: int = 1
    variant: DecoderVariant = DecoderVariant.DEGD
    with_positions: bool = False      # optional tick-position feature on encoder 1
    allow_empty_input: bool = False   # fall through with a zero state instead of rejecting

    def __post_init__(self):
        self.variant = DecoderVariant(self.variant)
        if self.layers not in (1, 2):
            raise UsageError("layer count must be 1 or 2")


@dataclass
class TrainingConfig:
    batch_size: int = 64
    epochs: int = 100
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    seed: int = 0
    loss_mode: str | None = None      # None picks the variant's default
    patience: int = 0                 # epochs without improvement before stopping; 0 = off
    min_improvement: float = 1e-12

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise UsageError("batch_size must be >= 1 and epochs >= 0")
        if self.loss_mode not in (None, "observed_only", "imputed_targets"):
            raise UsageError(f"unknown loss mode {self.loss_mode!r}")


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------

@dataclass
class Affine:
    w: Param
    b: Param

    def params(self) -> list[Param]:
        return [self.w, self.b]


def init_affine(rng, in_dim: int, out_dim: int, name: str) -> Affine:
    return Affine(Param(uniform_init(rng, (out_dim, in_dim), in_dim), name=f"{name}.w"),
                  Param(np.zeros(out_dim), name=f"{name}.b"))


def affine_forward(aff: Affine, x: Array) -> Array:
    return x @ aff.w.value.T + aff.b.value


def affine_backward(aff: Affine, x: Array, dy: Array) -> Array:
    aff.w.grad += dy.T @ x
    aff.b.grad += dy.sum(axis=0)
    return dy @ aff.w.value


def _stack_forward(layers: list[GruParams], h0: list[Array], inputs: Array,
                   active: Array | None = None):
    """Unroll stacked GRU layers over (B, T, d) inputs.

    ``active`` (B, T) marks the real steps of padded rows; at inactive steps
    the state carries through unchanged, which makes a padded batch compute
    exactly what the per-example unrolls would. Returns the top layer's
    per-step outputs, per-layer step caches, and each layer's final hidden
    state. T = 0 passes the initial states through.
    """
    b, t_len, _ = inputs.shape
    caches: list[list[GruCache]] = [[] for _ in layers]
    seq = inputs
    h_last = []
    for li, p in enumerate(layers):
        h = h0[li]
        outs = np.empty((b, t_len, p.hidden_dim))
        for t in range(t_len):
            h_new, c = gru_step(p, h, seq[:, t])
            if active is not None:
                a = active[:, t:t + 1]
                h = a * h_new + (1.0 - a) * h
            else:
                h = h_new
            caches[li].append(c)
            outs[:, t] = h
        seq = outs
        h_last.append(h)
    return seq, caches, h_last


def _stack_backward(layers: list[GruParams], caches, d_top_seq: Array,
                    d_h_last: list[Array | None], active: Array | None = None):
    """Reverse of :func:`_stack_forward`; returns (d_inputs, per-layer d_h0)."""
    dseq = d_top_seq
    d_h0: list[Array] = [None] * len(layers)  # type: ignore[list-item]
    for li in reversed(range(len(layers))):
        p = layers[li]
        t_len = len(caches[li])
        b = dseq.shape[0]
        dh = np.zeros((b, p.hidden_dim))
        if d_h_last[li] is not None:
            dh = dh + d_h_last[li]
        d_below = np.empty((b, t_len, p.input_dim))
        for t in reversed(range(t_len)):
            dh = dh + dseq[:, t]
            if active is not None:
                a = active[:, t:t + 1]
                dh_cell, du = gru_backward(p, caches[li][t], a * dh)
                dh = (1.0 - a) * dh + dh_cell
            else:
                dh, du = gru_backward(p, caches[li][t], dh)
            d_below[:, t] = du
        d_h0[li] = dh
        dseq = d_below
    return dseq, d_h0


def mse_loss(preds, targets, target_mask, mode: str = "observed_only",
             target_mean=None) -> float:
    """Horizon MSE for one window; the training loss on a batch of one.

    ``observed_only`` averages squared error over ticks whose target is
    observed; ``imputed_targets`` scores every tick, with missing targets
    replaced by the training mean.
    """
    preds = np.asarray(preds, dtype=float).reshape(len(np.atleast_1d(target_mask)), -1)
    targets = np.asarray(targets, dtype=float).reshape(preds.shape)
    tmask = np.asarray(target_mask, dtype=float).reshape(-1)
    loss, _, _ = _loss_and_grad(preds[None], np.nan_to_num(targets)[None], tmask[None],
                                mode, target_mean)
    return loss


def _loss_and_grad(preds: Array, targets: Array, tmask: Array, mode: str,
                   target_mean, active: Array | None = None
                   ) -> tuple[float, Array, Array]:
    """Mean over examples of per-example masked MSE, plus d(loss)/d(preds)
    and the per-example losses themselves.

    ``preds``/``targets`` are (B, T, d_y); ``targets`` must already be
    NaN-free (0 at missing ticks works: the mask or the imputation replaces
    them before they are scored). ``active`` marks real (unpadded) steps.
    """
    b, t_len, d_y = preds.shape
    if mode == "observed_only":
        w = tmask
        y = targets
    elif mode == "imputed_targets":
        if target_mean is None:
            raise UsageError("imputed_targets loss needs a target mean")
        w = np.ones_like(tmask) if active is None else active
        y = tmask[:, :, None] * targets + (1.0 - tmask[:, :, None]) * target_mean
    else:
        raise UsageError(f"unknown loss mode {mode!r}")
    counts = w.sum(axis=1) * d_y                      # scored slots per example
    if np.any(counts == 0):
        raise ExampleRejected("an example has no scorable target ticks")
    err = preds - y
    per_example = (w[:, :, None] * err ** 2).sum(axis=(1, 2)) / counts
    loss = float(per_example.mean())
    dpreds = 2.0 * w[:, :, None] * err / counts[:, None, None] / b
    return loss, dpreds, per_example


@dataclass
class _Prepared:
    """Arrays for one example, ready to collate with neighbours."""

    key: tuple
    arrays: dict[str, Array]
    example: ForecastExample


# encoder streams pad on the left (every row's real steps end at T-1, so the
# final state is the true one); decoder streams pad on the right and the loss
# masks the padded tail. Fields in one group share a length per example.
_STREAM_GROUPS = (
    (("enc1_u",), "enc1_active", True),
    (("enc2_u",), "enc2_active", True),
    (("enc_u", "enc_m", "enc_delta", "enc_v_last"), "enc_active", True),
    (("dec_x", "dec_m", "dec_delta", "dec_x_last", "targets", "tmask"),
     "dec_active", False),
)


def _pad_to(a: Array, t_len: int, left: bool) -> Array:
    gap = t_len - a.shape[0]
    if gap == 0:
        return a
    widths = [(gap, 0) if left else (0, gap)] + [(0, 0)] * (a.ndim - 1)
    return np.pad(a, widths)


def _collate(batch: list[_Prepared]) -> dict[str, Array]:
    """Stack per-example arrays, padding ragged streams with activity masks."""
    out: dict[str, Array] = {}
    names = set(batch[0].arrays)
    for fields, active_name, left in _STREAM_GROUPS:
        present = [f for f in fields if f in names]
        if not present:
            continue
        lens = [p.arrays[present[0]].shape[0] for p in batch]
        t_max = max(lens)
        for f in present:
            out[f] = np.stack([_pad_to(p.arrays[f], t_max, left) for p in batch])
            names.discard(f)
        if min(lens) != t_max:
            mask = np.zeros((len(batch), t_max))
            for i, n in enumerate(lens):
                if left:
                    mask[i, t_max - n:] = 1.0
                else:
                    mask[i, :n] = 1.0
            out[active_name] = mask
    for name in sorted(names):
        out[name] = np.stack([p.arrays[name] for p in batch])
    return out


def _decoder_state_split(s: Array, layers: int, dec_hidden: int) -> list[Array]:
    return [s[:, i * dec_hidden:(i + 1) * dec_hidden] for i in range(layers)]


# ---------------------------------------------------------------------------
# The dual-encoder model
# ---------------------------------------------------------------------------

class DualEncoderModel:
    """Two encoders over the lossless window encoding, one per stream."""

    kind = "dual_encoder"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        d_avail = c.exo_dim + c.target_dim + (1 if c.with_positions else 0)
        self.enc1 = [init_gru(rng, d_avail if i == 0 else c.enc_hidden, c.enc_hidden,
                              name=f"enc1.{i}") for i in range(c.layers)]
        self.enc2 = [init_gru(rng, 2 if i == 0 else c.enc_hidden, c.enc_hidden,
                              name=f"enc2.{i}") for i in range(c.layers)]
        self.bridge = init_affine(rng, 2 * c.enc_hidden, c.layers * c.dec_hidden, "bridge")
        if c.variant is DecoderVariant.DEGD:
            self.dec_bottom = init_grud(rng, c.exo_dim, c.dec_hidden, name="dec.0")
        else:
            d_dec = c.exo_dim + (1 if c.variant is DecoderVariant.BINARY_MASK else 0)
            self.dec_bottom = init_gru(rng, d_dec, c.dec_hidden, name="dec.0")
        self.dec_upper = [init_gru(rng, c.dec_hidden, c.dec_hidden, name=f"dec.{i}")
                          for i in range(1, c.layers)]
        self.head = init_affine(rng, c.dec_hidden, c.target_dim, "head")
        self.input_mean: Array | None = None   # exogenous mean, set by fit_normalization
        self.target_mean: Array | None = None
        self.step_counts = {"enc1": 0, "enc2": 0, "dec": 0}

    # -- parameters & stats -------------------------------------------------

    def params(self) -> list[Param]:
        out: list[Param] = []
        for g in self.enc1 + self.enc2:
            out += g.params()
        out += self.bridge.params()
        out += self.dec_bottom.params()
        for g in self.dec_upper:
            out += g.params()
        out += self.head.params()
        return out

    @property
    def default_loss_mode(self) -> str:
        return self.config.variant.default_loss_mode

    def reset_step_counts(self) -> None:
        self.step_counts = {"enc1": 0, "enc2": 0, "dec": 0}

    def fit_normalization(self, examples: list[ForecastExample]) -> None:
        """Empirical means of observed inputs/targets, from training data only."""
        xs, ys = [], []
        for ex in examples:
            xs.append(ex.encoded_input.x)
            ys.append(ex.encoded_input.y)
            obs = ex.future_mask > 0
            xs.append(ex.future_x[obs])
            ys.append(ex.targets[ex.target_mask > 0])
        x_all = np.concatenate(xs) if xs else np.empty((0, self.config.exo_dim))
        y_all = np.concatenate(ys) if ys else np.empty((0, self.config.target_dim))
        if x_all.size == 0 or y_all.size == 0:
            raise DataError("no observed values to fit normalization statistics from")
        self.input_mean = x_all.mean(axis=0)
        self.target_mean = y_all.mean(axis=0)
        if isinstance(self.dec_bottom, GruDParams):
            self.dec_bottom.input_mean = self.input_mean

    # -- example preparation -------------------------------------------------

    def _require_fitted(self) -> None:
        if self.input_mean is None:
            raise UsageError("model statistics not fitted; train first or call "
                             "fit_normalization")

    def _dec_len(self, future_mask: Array) -> int:
        if self.config.variant is DecoderVariant.VARIABLE_LENGTH:
            miss = np.flatnonzero(future_mask == 0)
            return int(miss[0]) if miss.size else future_mask.size
        return future_mask.size

    def prepare(self, examples: list[ForecastExample],
                loss_mode: str) -> tuple[list[_Prepared], dict[str, int]]:
        self._require_fitted()
        prepared: list[_Prepared] = []
        skipped = {"empty_input": 0, "no_scorable_targets": 0, "first_target_missing": 0}
        for ex in examples:
            enc = ex.encoded_input
            if enc.n_available == 0 and not self.config.allow_empty_input:
                skipped["empty_input"] += 1
                continue
            t_len = self._dec_len(ex.future_mask)
            if t_len == 0:
                skipped["first_target_missing"] += 1
                continue
            tmask = ex.target_mask[:t_len]
            if loss_mode == "observed_only" and tmask.sum() == 0:
                skipped["no_scorable_targets"] += 1
                continue
            arrays = {**self._encoder_arrays(enc),
                      **self._decoder_arrays(ex.future_x, ex.future_mask, t_len)}
            arrays["targets"] = np.nan_to_num(ex.targets[:t_len])
            arrays["tmask"] = tmask.astype(float)
            key = (enc.n_available, enc.n_blocks, t_len)
            prepared.append(_Prepared(key, arrays, ex))
        return prepared, skipped

    def _encoder_arrays(self, enc: EncodedWindow) -> dict[str, Array]:
        length = float(enc.length)
        u1 = np.concatenate([enc.x, enc.y], axis=1)
        if self.config.with_positions:
            u1 = np.concatenate([u1, enc.positions[:, None] / length], axis=1)
        u2 = enc.blocks.astype(float) / length
        return {"enc1_u": u1, "enc2_u": u2}

    def _decoder_arrays(self, future_x, future_mask, t_len: int) -> dict[str, Array]:
        x = np.nan_to_num(np.asarray(future_x, dtype=float))[:t_len]
        m = np.asarray(future_mask, dtype=float)[:t_len]
        arrays = {"dec_x": x, "dec_m": m}
        if self.config.variant is DecoderVariant.DEGD:
            arrays["dec_delta"] = compute_delta(m).astype(float)
            arrays["dec_x_last"] = _forward_fill(x, m, self.input_mean)
        return arrays

    # -- forward / backward ---------------------------------------------------

    def _encode_batch(self, data: dict[str, Array]) -> tuple[Array, dict]:
        c = self.config
        b = data["enc1_u"].shape[0]
        zeros = lambda: [np.zeros((b, c.enc_hidden)) for _ in range(c.layers)]
        _, caches1, last1 = _stack_forward(self.enc1, zeros(), data["enc1_u"],
                                           data.get("enc1_active"))
        _, caches2, last2 = _stack_forward(self.enc2, zeros(), data["enc2_u"],
                                           data.get("enc2_active"))
        self.step_counts["enc1"] += data["enc1_u"].shape[1]
        self.step_counts["enc2"] += data["enc2_u"].shape[1]
        bridge_in = np.concatenate([last1[-1], last2[-1]], axis=1)
        s = np.tanh(affine_forward(self.bridge, bridge_in))
        cache = {"caches1": caches1, "caches2": caches2,
                 "bridge_in": bridge_in, "s": s}
        return s, cache

    def _decode_batch(self, s: Array, data: dict[str, Array]) -> tuple[Array, dict]:
        c = self.config
        states = _decoder_state_split(s, c.layers, c.dec_hidden)
        t_len = data["dec_x"].shape[1]
        b = data["dec_x"].shape[0]
        active = data.get("dec_active")
        self.step_counts["dec"] += t_len

        if c.variant is DecoderVariant.DEGD:
            h = states[0]
            bottom_caches: list[GruDCache] = []
            bottom_seq = np.empty((b, t_len, c.dec_hidden))
            for t in range(t_len):
                h_new, cache = grud_step(self.dec_bottom, h, MaskedInput(
                    data["dec_x"][:, t], data["dec_m"][:, t],
                    data["dec_delta"][:, t], data["dec_x_last"][:, t]))
                if active is not None:
                    a = active[:, t:t + 1]
                    h = a * h_new + (1.0 - a) * h
                else:
                    h = h_new
                bottom_caches.append(cache)
                bottom_seq[:, t] = h
        else:
            dec_in = self._decoder_inputs(data)
            bottom_seq, gcaches, _ = _stack_forward([self.dec_bottom], [states[0]],
                                                    dec_in, active)
            bottom_caches = gcaches[0]

        if self.dec_upper:
            top_seq, upper_caches, _ = _stack_forward(self.dec_upper, states[1:],
                                                      bottom_seq, active)
        else:
            top_seq, upper_caches = bottom_seq, []
        flat = top_seq.reshape(b * t_len, c.dec_hidden)
        preds = affine_forward(self.head, flat).reshape(b, t_len, c.target_dim)
        cache = {"bottom_caches": bottom_caches, "upper_caches": upper_caches,
                 "top_flat": flat, "t_len": t_len, "b": b}
        return preds, cache

    def _decoder_inputs(self, data: dict[str, Array]) -> Array:
        c = self.config
        x, m = data["dec_x"], data["dec_m"]
        if c.variant is DecoderVariant.VARIABLE_LENGTH:
            return x  # the unrolled prefix is fully observed by construction
        x_hat = m[:, :, None] * x + (1.0 - m[:, :, None]) * self.input_mean
        if c.variant is DecoderVariant.BINARY_MASK:
            return np.concatenate([x_hat, m[:, :, None]], axis=2)
        return x_hat  # DEMI

    def forward_batch(self, batch: list[_Prepared]) -> tuple[Array, dict]:
        data = _collate(batch)
        s, enc_cache = self._encode_batch(data)
        preds, dec_cache = self._decode_batch(s, data)
        return preds, {"data": data, "enc": enc_cache, "dec": dec_cache}

    def backward_batch(self, cache: dict, dpreds: Array) -> None:
        c = self.config
        data, enc_cache, dec_cache = cache["data"], cache["enc"], cache["dec"]
        b, t_len = dec_cache["b"], dec_cache["t_len"]
        active = data.get("dec_active")

        dflat = dpreds.reshape(b * t_len, c.target_dim)
        d_top_seq = affine_backward(self.head, dec_cache["top_flat"], dflat) \
            .reshape(b, t_len, c.dec_hidden)

        d_h0 = [None] * c.layers
        if self.dec_upper:
            d_bottom_seq, d_h0_upper = _stack_backward(
                self.dec_upper, dec_cache["upper_caches"], d_top_seq,
                [None] * len(self.dec_upper), active)
            d_h0[1:] = d_h0_upper
        else:
            d_bottom_seq = d_top_seq

        if c.variant is DecoderVariant.DEGD:
            dh = np.zeros((b, c.dec_hidden))
            for t in reversed(range(t_len)):
                dh = dh + d_bottom_seq[:, t]
                if active is not None:
                    a = active[:, t:t + 1]
                    dh_cell = grud_backward(self.dec_bottom,
                                            dec_cache["bottom_caches"][t], a * dh)
                    dh = (1.0 - a) * dh + dh_cell
                else:
                    dh = grud_backward(self.dec_bottom,
                                       dec_cache["bottom_caches"][t], dh)
            d_h0[0] = dh
        else:
            _, d_h0_bottom = _stack_backward([self.dec_bottom],
                                             [dec_cache["bottom_caches"]],
                                             d_bottom_seq, [None], active)
            d_h0[0] = d_h0_bottom[0]

        ds = np.concatenate(d_h0, axis=1)
        s = enc_cache["s"]
        ds_pre = ds * (1.0 - s ** 2)
        d_bridge_in = affine_backward(self.bridge, enc_cache["bridge_in"], ds_pre)
        dh1 = d_bridge_in[:, :c.enc_hidden]
        dh2 = d_bridge_in[:, c.enc_hidden:]

        for enc_layers, caches, dh_top, act in (
                (self.enc1, enc_cache["caches1"], dh1, data.get("enc1_active")),
                (self.enc2, enc_cache["caches2"], dh2, data.get("enc2_active"))):
            t_enc = len(caches[0])
            d_last = [None] * len(enc_layers)
            d_last[-1] = dh_top
            zero_seq = np.zeros((b, t_enc, enc_layers[-1].hidden_dim))
            _stack_backward(enc_layers, caches, zero_seq, d_last, act)

    # -- public single-example operations --------------------------------------

    def encode(self, encoded_window: EncodedWindow) -> Array:
        """Map one encoded window to the decoder's initial state(s)."""
        self._require_fitted()
        if encoded_window.n_available == 0 and not self.config.allow_empty_input:
            raise ExampleRejected("input window has no available points")
        data = {k: v[None] for k, v in self._encoder_arrays(encoded_window).items()}
        s, _ = self._encode_batch(data)
        return s[0]

    def decode(self, state: Array, future_x, future_mask, horizon: int) -> Array:
        """Unroll the decoder from a bridge state; returns (T, d_y) predictions."""
        self._require_fitted()
        if horizon < 1:
            raise UsageError("horizon must be >= 1")
        m = np.asarray(future_mask, dtype=float).reshape(-1)
        x = np.asarray(future_x, dtype=float).reshape(horizon, -1)
        if m.size != horizon:
            raise ShapeError("future_mask length must equal the horizon")
        t_len = self._dec_len(m)
        if t_len == 0:
            raise ExampleRejected("first horizon tick is missing; the "
                                  "variable-length decoder has nothing to unroll")
        data = {k: v[None] for k, v in self._decoder_arrays(x, m, t_len).items()}
        preds, _ = self._decode_batch(np.asarray(state, dtype=float)[None], data)
        return preds[0]

    def forecast(self, encoded_input: EncodedWindow, future_x, future_mask,
                 horizon: int) -> Array:
        """Pure inference for one window; no state is mutated."""
        return self.decode(self.encode(encoded_input), future_x, future_mask, horizon)


# ---------------------------------------------------------------------------
# The single-encoder reference family
# ---------------------------------------------------------------------------

@dataclass
class SingleEncoderConfig:
    exo_dim: int = 1
    target_dim: int = 1
    enc_hidden: int = 7
    dec_hidden: int = 7
    layers: int = 1
    cell: str = "gru"           # "gru" (imputed window) or "grud" (raw gappy window)
    imputation: str = "mean"    # "mean" or "band"; used when cell == "gru"

    def __post_init__(self):
        if self.layers not in (1, 2):
            raise UsageError("layer count must be 1 or 2")
        if self.cell not in ("gru", "grud"):
            raise UsageError("cell must be 'gru' or 'grud'")
        if self.imputation not in ("mean", "band"):
            raise UsageError("imputation must be 'mean' or 'band'")


class SingleEncoderModel:
    """One encoder over the full window, plus the matching decoder.

    With ``cell="gru"`` the window's gaps are filled first (mean or band
    interpolation) and the decoder sees imputed exogenous inputs. With
    ``cell="grud"`` both encoder and decoder are decay cells over the raw
    gappy streams.
    """

    kind = "single_encoder"

    def __init__(self, config: SingleEncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        d_enc = c.exo_dim + c.target_dim
        if c.cell == "grud":
            self.enc_bottom: GruParams | GruDParams = init_grud(rng, d_enc, c.enc_hidden,
                                                                name="enc.0")
            self.dec_bottom: GruParams | GruDParams = init_grud(rng, c.exo_dim,
                                                                c.dec_hidden, name="dec.0")
        else:
            self.enc_bottom = init_gru(rng, d_enc, c.enc_hidden, name="enc.0")
            self.dec_bottom = init_gru(rng, c.exo_dim, c.dec_hidden, name="dec.0")
        self.enc_upper = [init_gru(rng, c.enc_hidden, c.enc_hidden, name=f"enc.{i}")
                          for i in range(1, c.layers)]
        self.dec_upper = [init_gru(rng, c.dec_hidden, c.dec_hidden, name=f"dec.{i}")
                          for i in range(1, c.layers)]
        self.bridge = init_affine(rng, c.enc_hidden, c.layers * c.dec_hidden, "bridge")
        self.head = init_affine(rng, c.dec_hidden, c.target_dim, "head")
        self.input_mean: Array | None = None     # exogenous mean
        self.target_mean: Array | None = None
        self.enc_input_mean: Array | None = None  # concat(x, y) mean for the encoder
        self.step_counts = {"enc": 0, "dec": 0}

    default_loss_mode = "observed_only"

    def params(self) -> list[Param]:
        out = self.enc_bottom.params()
        for g in self.enc_upper:
            out += g.params()
        out += self.bridge.params()
        out += self.dec_bottom.params()
        for g in self.dec_upper:
            out += g.params()
        out += self.head.params()
        return out

    def reset_step_counts(self) -> None:
        self.step_counts = {"enc": 0, "dec": 0}

    def fit_normalization(self, examples: list[ForecastExample]) -> None:
        xs, ys = [], []
        for ex in examples:
            xs.append(ex.encoded_input.x)
            ys.append(ex.encoded_input.y)
            obs = ex.future_mask > 0
            xs.append(ex.future_x[obs])
            ys.append(ex.targets[ex.target_mask > 0])
        x_all, y_all = np.concatenate(xs), np.concatenate(ys)
        if x_all.size == 0 or y_all.size == 0:
            raise DataError("no observed values to fit normalization statistics from")
        self.input_mean = x_all.mean(axis=0)
        self.target_mean = y_all.mean(axis=0)
        self.enc_input_mean = np.concatenate([self.input_mean, self.target_mean])
        if isinstance(self.enc_bottom, GruDParams):
            self.enc_bottom.input_mean = self.enc_input_mean
        if isinstance(self.dec_bottom, GruDParams):
            self.dec_bottom.input_mean = self.input_mean

    def _require_fitted(self) -> None:
        if self.input_mean is None:
            raise UsageError("model statistics not fitted; train first or call "
                             "fit_normalization")

    def prepare(self, examples: list[ForecastExample],
                loss_mode: str) -> tuple[list[_Prepared], dict[str, int]]:
        self._require_fitted()
        prepared = []
        skipped = {"no_scorable_targets": 0}
        for ex in examples:
            if loss_mode == "observed_only" and ex.target_mask.sum() == 0:
                skipped["no_scorable_targets"] += 1
                continue
            arrays = self._example_arrays(ex.encoded_input, ex.future_x, ex.future_mask)
            arrays["targets"] = np.nan_to_num(ex.targets)
            arrays["tmask"] = ex.target_mask.astype(float)
            key = (ex.encoded_input.length, ex.horizon)
            prepared.append(_Prepared(key, arrays, ex))
        return prepared, skipped

    def _example_arrays(self, enc: EncodedWindow, future_x, future_mask) -> dict[str, Array]:
        c = self.config
        w = decode_window(enc)
        joint = np.concatenate([w.x, w.y], axis=1)
        x = np.nan_to_num(np.asarray(future_x, dtype=float))
        m = np.asarray(future_mask, dtype=float)
        if c.cell == "gru":
            fill = mean_fill if c.imputation == "mean" else band_fill
            enc_u = fill(np.nan_to_num(joint), w.observed, self.enc_input_mean)
            dec_x = fill(x, m > 0, self.input_mean)
            return {"enc_u": enc_u, "dec_x": dec_x}
        enc_m = w.observed.astype(float)
        enc_v = np.nan_to_num(joint)
        arrays = {
            "enc_u": enc_v, "enc_m": enc_m,
            "enc_delta": compute_delta(enc_m).astype(float),
            "enc_v_last": _forward_fill(enc_v, enc_m, self.enc_input_mean),
            "dec_x": x, "dec_m": m,
            "dec_delta": compute_delta(m).astype(float),
            "dec_x_last": _forward_fill(x, m, self.input_mean),
        }
        return arrays

    def forward_batch(self, batch: list[_Prepared]) -> tuple[Array, dict]:
        data = _collate(batch)
        c = self.config
        b, l_len = data["enc_u"].shape[0], data["enc_u"].shape[1]
        t_len = data["dec_x"].shape[1]
        enc_active = data.get("enc_active")
        dec_active = data.get("dec_active")
        self.step_counts["enc"] += l_len
        self.step_counts["dec"] += t_len

        if c.cell == "grud":
            h = np.zeros((b, c.enc_hidden))
            enc_bottom_caches: list = []
            bottom_seq = np.empty((b, l_len, c.enc_hidden))
            for t in range(l_len):
                h_new, cc = grud_step(self.enc_bottom, h, MaskedInput(
                    data["enc_u"][:, t], data["enc_m"][:, t],
                    data["enc_delta"][:, t], data["enc_v_last"][:, t]))
                if enc_active is not None:
                    a = enc_active[:, t:t + 1]
                    h = a * h_new + (1.0 - a) * h
                else:
                    h = h_new
                enc_bottom_caches.append(cc)
                bottom_seq[:, t] = h
        else:
            bottom_seq, gc, _ = _stack_forward([self.enc_bottom],
                                               [np.zeros((b, c.enc_hidden))],
                                               data["enc_u"], enc_active)
            enc_bottom_caches = gc[0]
        if self.enc_upper:
            top_seq, enc_upper_caches, last = _stack_forward(
                self.enc_upper, [np.zeros((b, c.enc_hidden))] * len(self.enc_upper),
                bottom_seq, enc_active)
            h_final = last[-1]
        else:
            enc_upper_caches = []
            h_final = bottom_seq[:, -1] if l_len else np.zeros((b, c.enc_hidden))

        s = np.tanh(affine_forward(self.bridge, h_final))
        states = _decoder_state_split(s, c.layers, c.dec_hidden)

        if c.cell == "grud":
            h = states[0]
            dec_bottom_caches: list = []
            dec_bottom_seq = np.empty((b, t_len, c.dec_hidden))
            for t in range(t_len):
                h_new, cc = grud_step(self.dec_bottom, h, MaskedInput(
                    data["dec_x"][:, t], data["dec_m"][:, t],
                    data["dec_delta"][:, t], data["dec_x_last"][:, t]))
                if dec_active is not None:
                    a = dec_active[:, t:t + 1]
                    h = a * h_new + (1.0 - a) * h
                else:
                    h = h_new
                dec_bottom_caches.append(cc)
                dec_bottom_seq[:, t] = h
        else:
            dec_bottom_seq, gc, _ = _stack_forward([self.dec_bottom], [states[0]],
                                                   data["dec_x"], dec_active)
            dec_bottom_caches = gc[0]
        if self.dec_upper:
            dec_top_seq, dec_upper_caches, _ = _stack_forward(self.dec_upper, states[1:],
                                                              dec_bottom_seq, dec_active)
        else:
            dec_top_seq, dec_upper_caches = dec_bottom_seq, []

        flat = dec_top_seq.reshape(b * t_len, c.dec_hidden)
        preds = affine_forward(self.head, flat).reshape(b, t_len, c.target_dim)
        cache = {"data": data, "b": b, "l_len": l_len, "t_len": t_len,
                 "enc_bottom_caches": enc_bottom_caches,
                 "enc_upper_caches": enc_upper_caches,
                 "dec_bottom_caches": dec_bottom_caches,
                 "dec_upper_caches": dec_upper_caches,
                 "h_final": h_final, "s": s, "top_flat": flat}
        return preds, cache

    def backward_batch(self, cache: dict, dpreds: Array) -> None:
        c = self.config
        data = cache["data"]
        b, l_len, t_len = cache["b"], cache["l_len"], cache["t_len"]
        enc_active = data.get("enc_active")
        dec_active = data.get("dec_active")
        dflat = dpreds.reshape(b * t_len, c.target_dim)
        d_top = affine_backward(self.head, cache["top_flat"], dflat) \
            .reshape(b, t_len, c.dec_hidden)

        d_h0 = [None] * c.layers
        if self.dec_upper:
            d_bottom_seq, d_up = _stack_backward(self.dec_upper,
                                                 cache["dec_upper_caches"], d_top,
                                                 [None] * len(self.dec_upper),
                                                 dec_active)
            d_h0[1:] = d_up
        else:
            d_bottom_seq = d_top
        if c.cell == "grud":
            dh = np.zeros((b, c.dec_hidden))
            for t in reversed(range(t_len)):
                dh = dh + d_bottom_seq[:, t]
                if dec_active is not None:
                    a = dec_active[:, t:t + 1]
                    dh_cell = grud_backward(self.dec_bottom,
                                            cache["dec_bottom_caches"][t], a * dh)
                    dh = (1.0 - a) * dh + dh_cell
                else:
                    dh = grud_backward(self.dec_bottom,
                                       cache["dec_bottom_caches"][t], dh)
            d_h0[0] = dh
        else:
            _, d0 = _stack_backward([self.dec_bottom], [cache["dec_bottom_caches"]],
                                    d_bottom_seq, [None], dec_active)
            d_h0[0] = d0[0]

        ds = np.concatenate(d_h0, axis=1)
        ds_pre = ds * (1.0 - cache["s"] ** 2)
        dh_final = affine_backward(self.bridge, cache["h_final"], ds_pre)

        if self.enc_upper:
            d_enc_bottom_seq, _ = _stack_backward(
                self.enc_upper, cache["enc_upper_caches"],
                np.zeros((b, l_len, c.enc_hidden)),
                [None] * (len(self.enc_upper) - 1) + [dh_final], enc_active)
            dh = np.zeros((b, c.enc_hidden))
        else:
            d_enc_bottom_seq = np.zeros((b, l_len, c.enc_hidden))
            dh = dh_final
        if c.cell == "grud":
            for t in reversed(range(l_len)):
                dh = dh + d_enc_bottom_seq[:, t]
                if enc_active is not None:
                    a = enc_active[:, t:t + 1]
                    dh_cell = grud_backward(self.enc_bottom,
                                            cache["enc_bottom_caches"][t], a * dh)
                    dh = (1.0 - a) * dh + dh_cell
                else:
                    dh = grud_backward(self.enc_bottom,
                                       cache["enc_bottom_caches"][t], dh)
        else:
            d_last = [dh]
            _stack_backward([self.enc_bottom], [cache["enc_bottom_caches"]],
                            d_enc_bottom_seq, d_last, enc_active)

    def forecast(self, encoded_input: EncodedWindow, future_x, future_mask,
                 horizon: int) -> Array:
        self._require_fitted()
        if horizon < 1:
            raise UsageError("horizon must be >= 1")
        arrays = self._example_arrays(encoded_input,
                                      np.asarray(future_x, dtype=float).reshape(horizon, -1),
                                      np.asarray(future_mask, dtype=float).reshape(-1))
        fake = _Prepared((encoded_input.length, horizon), arrays, None)  # type: ignore[arg-type]
        preds, _ = self.forward_batch([fake])
        return preds[0]


def _forward_fill(values: Array, mask: Array, fallback: Array) -> Array:
    """Last observed row to the left of each tick; the fallback before any."""
    out = np.empty_like(np.asarray(values, dtype=float))
    last = np.asarray(fallback, dtype=float).copy()
    for t in range(out.shape[0]):
        out[t] = last
        if mask[t] > 0:
            last = values[t]
    return out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    loss_trace: list[float]
    skipped: dict[str, int]
    n_examples: int
    stopped_early: bool = False


def _make_batches(keys: list[tuple], batch_size: int,
                  rng: np.random.Generator) -> tuple[list[list[int]], Array]:
    """Bucket same-shape examples, chunk, then merge undersized neighbours.

    Same-key batches collate with no padding at all; merged batches of
    similar (sorted-adjacent) shapes pad the short rows, which the masked
    unroll treats exactly. Returns the batches in canonical order plus a
    shuffled visit order over them.
    """
    order = rng.permutation(len(keys))
    groups: dict[tuple, list[int]] = {}
    for idx in order:
        groups.setdefault(keys[idx], []).append(int(idx))
    chunks: list[list[int]] = []
    for key in sorted(groups):
        g = groups[key]
        chunks += [g[i:i + batch_size] for i in range(0, len(g), batch_size)]
    merged: list[list[int]] = []
    for chunk in chunks:
        if merged and len(merged[-1]) + len(chunk) <= batch_size:
            merged[-1] = merged[-1] + chunk
        else:
            merged.append(chunk)
    return merged, rng.permutation(len(merged))


def train(model, examples: list[ForecastExample], cfg: TrainingConfig) -> TrainResult:
    """Mini-batched exact BPTT; deterministic for a fixed seed and config."""
    if not examples:
        raise DataError("cannot train on an empty example set")
    if model.input_mean is None:
        model.fit_normalization(examples)
    loss_mode = cfg.loss_mode or model.default_loss_mode
    prepared, skipped = model.prepare(examples, loss_mode)
    if not prepared:
        raise DataError(f"all {len(examples)} examples were rejected: {skipped}")

    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    keys = [p.key for p in prepared]
    params = model.params()
    for p in params:
        p.zero_grad()

    trace: list[float] = []
    best = np.inf
    stale = 0
    stopped_early = False
    example_losses = np.empty(len(prepared))
    for epoch in range(cfg.epochs):
        batches, visit = _make_batches(keys, cfg.batch_size, rng)
        for bi in visit:
            idxs = batches[bi]
            batch = [prepared[i] for i in idxs]
            preds, cache = model.forward_batch(batch)
            data = cache["data"]
            loss, dpreds, per_example = _loss_and_grad(
                preds, data["targets"], data["tmask"], loss_mode, model.target_mean)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch} "
                    f"(lr={cfg.learning_rate}, optimizer={cfg.optimizer})")
            model.backward_batch(cache, dpreds)
            optimizer.step(params)
            example_losses[idxs] = per_example
        # aggregate per example in a fixed order so the trace does not pick
        # up summation-order noise from the shuffled batch composition
        trace.append(float(example_losses.mean()))
        if trace[-1] < best - cfg.min_improvement:
            best = trace[-1]
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                stopped_early = True
                break
    return TrainResult(model, trace, skipped, len(prepared), stopped_early)


def forecast(model, encoded_input: EncodedWindow, future_x, future_mask,
             horizon: int) -> Array:
    """Module-level convenience mirroring ``model.forecast``."""
    return model.forecast(encoded_input, future_x, future_mask, horizon)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path) -> None:
    """Self-describing JSON: version, kind, config, stats, named parameters.

    Parameters are stored under their unique names in the fixed order
    ``model.params()`` yields; floats round-trip exactly through repr.
    """
    if isinstance(model, DualEncoderModel):
        cfg = dict(model.config.__dict__)
        cfg["variant"] = model.config.variant.value
    else:
        cfg = dict(model.config.__dict__)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": cfg,
        "input_mean": None if model.input_mean is None else model.input_mean.tolist(),
        "target_mean": None if model.target_mean is None else model.target_mean.tolist(),
        "param_order": [p.name for p in model.params()],
        "params": {p.name: p.value.tolist() for p in model.params()},
    }
    if isinstance(model, SingleEncoderModel):
        payload["enc_input_mean"] = None if model.enc_input_mean is None \
            else model.enc_input_mean.tolist()
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    kind = payload["kind"]
    if kind == "dual_encoder":
        model = DualEncoderModel(ModelConfig(**payload["config"]))
    elif kind == "single_encoder":
        model = SingleEncoderModel(SingleEncoderConfig(**payload["config"]))
    else:
        raise DataError(f"unknown model kind {kind!r}")
    if payload["input_mean"] is not None:
        model.input_mean = np.asarray(payload["input_mean"], dtype=float)
        model.target_mean = np.asarray(payload["target_mean"], dtype=float)
        if isinstance(model, SingleEncoderModel):
            model.enc_input_mean = np.asarray(payload["enc_input_mean"], dtype=float)
            if isinstance(model.enc_bottom, GruDParams):
                model.enc_bottom.input_mean = model.enc_input_mean
            if isinstance(model.dec_bottom, GruDParams):
                model.dec_bottom.input_mean = model.input_mean
        elif isinstance(model.dec_bottom, GruDParams):
            model.dec_bottom.input_mean = model.input_mean
    params = payload["params"]
    for p in model.params():
        if p.name not in params:
            raise DataError(f"checkpoint missing parameter {p.name!r}")
        value = np.asarray(params[p.name], dtype=float)
        if value.shape != p.value.shape:
            raise DataError(f"checkpoint parameter {p.name!r} has shape {value.shape}, "
                            f"expected {p.value.shape}")
        p.value[...] = value
    return model
