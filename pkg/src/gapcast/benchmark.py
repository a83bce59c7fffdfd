"""Benchmark harness: train every requested method on identical data, score
rolling test windows, and report the comparison.

All methods see the same masked series, the same train/test split, and the
same seeds; metrics are computed against the ground truth held back from the
models. The report mirrors the usual comparison tables: per-series means,
max/avg/min aggregates over the series where at least one method beats the
copy-previous yardstick (MASE < 1), pairwise win percentages with
ties credited to the incumbent, conditional means, and Welch significance
flags at the 0.05 level.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .codec import Window, encode_window
from .data import (ForecastExample, MaskingConfig, ScalingProfile, SeriesRecord,
                   apply_scaling, fit_scaling, make_examples, synthetic_mask)
from .errors import DataError, ExampleRejected, ProtocolError, UsageError
from .metrics import copy_previous, mape, mase, welch_t_test
from .model import (DecoderVariant, DualEncoderModel, ModelConfig,
                    SingleEncoderConfig, SingleEncoderModel, TrainingConfig,
                    train)
from .numerics import Array

PROPOSED_METHODS = ("demi", "degd", "binary_mask", "variable_length")
BASELINE_METHODS = ("bedxm", "bedxl", "grud_full", "copy_previous")
ALL_METHODS = PROPOSED_METHODS + BASELINE_METHODS


@dataclass
class BenchmarkConfig:
    in_len: int = 20
    horizon: int = 10
    stride: int = 1            # training-window stride
    eval_stride: int = 1       # test-anchor stride
    test_len: int = 60         # ticks held out at the end of each series
    enc_hidden: int = 7
    dec_hidden: int = 7
    layers: int = 1
    mode: str = "per_series"   # "per_series" or "background"
    masking: MaskingConfig | None = None
    train: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if self.mode not in ("per_series", "background"):
            raise UsageError("mode must be 'per_series' or 'background'")
        if self.test_len < self.horizon:
            raise UsageError("test_len must be at least the horizon")


@dataclass
class EvalWindow:
    """One rolling test window: model-visible inputs plus held-back truth."""

    series_id: str
    anchor: int               # 0-based index of the first horizon tick
    example: ForecastExample
    truth_y: Array            # (K, d_y)
    truth_mask: Array         # (K,) bool


def build_eval_windows(masked: SeriesRecord, truth: SeriesRecord,
                       cfg: BenchmarkConfig) -> list[EvalWindow]:
    """Anchors stepping through the held-out tail, inputs from the masked series."""
    n = masked.length
    first_anchor = n - cfg.test_len
    if first_anchor < cfg.in_len:
        raise DataError(f"series '{masked.series_id}': test region leaves no room "
                        f"for an input window of {cfg.in_len}")
    windows = []
    for anchor in range(first_anchor, n - cfg.horizon + 1, cfg.eval_stride):
        w = masked.window(anchor - cfg.in_len, cfg.in_len)
        mask = masked.observed[anchor:anchor + cfg.horizon].astype(float)
        ex = ForecastExample(
            series_id=masked.series_id,
            input_start=anchor - cfg.in_len,
            encoded_input=encode_window(w),
            future_x=masked.x[anchor:anchor + cfg.horizon].copy(),
            future_mask=mask,
            targets=masked.y[anchor:anchor + cfg.horizon].copy(),
            target_mask=mask.copy(),
            horizon=cfg.horizon,
        )
        windows.append(EvalWindow(masked.series_id, anchor, ex,
                                  truth.y[anchor:anchor + cfg.horizon].copy(),
                                  truth.observed[anchor:anchor + cfg.horizon].copy()))
    return windows


def _build_model(method: str, exo_dim: int, target_dim: int,
                 cfg: BenchmarkConfig, seed: int):
    if method in PROPOSED_METHODS:
        return DualEncoderModel(ModelConfig(
            exo_dim=exo_dim, target_dim=target_dim,
            enc_hidden=cfg.enc_hidden, dec_hidden=cfg.dec_hidden,
            layers=cfg.layers, variant=DecoderVariant(method),
            allow_empty_input=True), seed=seed)
    if method in ("bedxm", "bedxl"):
        return SingleEncoderModel(SingleEncoderConfig(
            exo_dim=exo_dim, target_dim=target_dim,
            enc_hidden=cfg.enc_hidden, dec_hidden=cfg.dec_hidden,
            layers=cfg.layers, cell="gru",
            imputation="mean" if method == "bedxm" else "band"), seed=seed)
    if method == "grud_full":
        return SingleEncoderModel(SingleEncoderConfig(
            exo_dim=exo_dim, target_dim=target_dim,
            enc_hidden=cfg.enc_hidden, dec_hidden=cfg.dec_hidden,
            layers=cfg.layers, cell="grud"), seed=seed)
    if method == "copy_previous":
        return None
    raise UsageError(f"unknown method {method!r}; choose from {ALL_METHODS}")


def run_baseline(method: str, train_examples: list[ForecastExample],
                 eval_windows: list[EvalWindow], cfg: BenchmarkConfig,
                 masked_by_id: dict[str, SeriesRecord],
                 train_cfg: TrainingConfig | None = None) -> dict:
    """Train one method and forecast every eval window.

    Returns ``{"preds": {(series_id, anchor): (K, d_y)}, "model": ..., "trace": ...}``.
    Windows a model rejects (e.g. nothing observed before the anchor for
    copy-previous) get NaN predictions and are skipped by the metrics.
    """
    if method not in ALL_METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {ALL_METHODS}")
    tcfg = train_cfg or cfg.train
    preds: dict[tuple, Array] = {}
    if method == "copy_previous":
        for ew in eval_windows:
            rec = masked_by_id[ew.series_id]
            try:
                preds[(ew.series_id, ew.anchor)] = copy_previous(
                    rec.y, rec.observed, ew.anchor, cfg.horizon)
            except DataError:
                preds[(ew.series_id, ew.anchor)] = np.full_like(ew.truth_y, np.nan)
        return {"preds": preds, "model": None, "trace": []}

    exo_dim = train_examples[0].future_x.shape[1]
    target_dim = train_examples[0].targets.shape[1]
    model = _build_model(method, exo_dim, target_dim, cfg, tcfg.seed)
    result = train(model, train_examples, tcfg)
    for ew in eval_windows:
        try:
            out = model.forecast(ew.example.encoded_input, ew.example.future_x,
                                 ew.example.future_mask, cfg.horizon)
        except ExampleRejected:
            out = np.full_like(ew.truth_y, np.nan)
        if out.shape[0] < cfg.horizon:  # variable-length decoders stop early
            pad = np.full((cfg.horizon - out.shape[0], out.shape[1]), np.nan)
            out = np.concatenate([out, pad])
        preds[(ew.series_id, ew.anchor)] = out
    return {"preds": preds, "model": model, "trace": result.loss_trace,
            "skipped": result.skipped}


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

TIE_RULE = ("ties credited to the incumbent: the baseline when exactly one side "
            "is a baseline, otherwise the later-listed method; a method compared "
            "with itself splits 50/50")


@dataclass
class EvalReport:
    config: dict
    methods: list[str]
    series_ids: list[str]
    per_series: dict          # sid -> method -> {"mase", "mape", ...}
    aggregates: dict          # method -> {"mase": {max, avg, min}, "mape": {...}}
    pairwise: list            # per ordered pair: win pcts, conditional means, Welch
    relevant_series: list[str]
    hard_series: list[str]    # every method's MASE > 1 (copy-previous wins)
    window_metrics: dict      # sid -> method -> {"mase": [...], "mape": [...]}

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "methods": self.methods,
            "series": self.series_ids,
            "per_series": self.per_series,
            "aggregates": self.aggregates,
            "pairwise": self.pairwise,
            "relevant_series": self.relevant_series,
            "hard_series": self.hard_series,
            "tie_rule": TIE_RULE,
            "window_metrics": self.window_metrics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2,
                          default=_json_default) + "\n"

    def per_series_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["series_id", "method", "mase", "mape",
                         "n_windows", "n_undefined"])
        for sid in self.series_ids:
            for m in self.methods:
                cell = self.per_series[sid][m]
                writer.writerow([sid, m, cell["mase"], cell["mape"],
                                 cell["n_windows"], cell["n_undefined"]])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        lines.append("benchmark report")
        lines.append(f"methods: {', '.join(self.methods)}")
        lines.append(f"series: {', '.join(self.series_ids)}")
        lines.append("")
        lines.append("per-series mean MASE / mean MAPE(%) over test windows")
        header = f"{'series':<14}" + "".join(f"{m:>22}" for m in self.methods)
        lines.append(header)
        for sid in self.series_ids:
            row = f"{sid:<14}"
            for m in self.methods:
                cell = self.per_series[sid][m]
                row += f"{_fmt(cell['mase']):>11}/{_fmt(cell['mape']):>10}"
            lines.append(row)
        lines.append("")
        lines.append(f"aggregates over {len(self.relevant_series)} relevant series "
                     "(at least one method MASE < 1)")
        lines.append(f"{'method':<18}{'MASE max':>10}{'MASE avg':>10}{'MASE min':>10}"
                     f"{'MAPE max':>10}{'MAPE avg':>10}{'MAPE min':>10}")
        for m in self.methods:
            a = self.aggregates[m]
            lines.append(f"{m:<18}"
                         f"{_fmt(a['mase']['max']):>10}{_fmt(a['mase']['avg']):>10}"
                         f"{_fmt(a['mase']['min']):>10}"
                         f"{_fmt(a['mape']['max']):>10}{_fmt(a['mape']['avg']):>10}"
                         f"{_fmt(a['mape']['min']):>10}")
        if self.hard_series:
            lines.append("")
            lines.append("series set aside (every method MASE > 1; copy-previous "
                         f"handles these better): {', '.join(self.hard_series)}")
        if self.pairwise:
            lines.append("")
            lines.append(f"pairwise comparisons ({TIE_RULE})")
            for pw in self.pairwise:
                a, b = pw["a"], pw["b"]
                lines.append(f"  {a} vs {b}: {a} better on {pw['a_better_pct']:.0f}% "
                             f"of series, {b} on {pw['b_better_pct']:.0f}%")
                ca, cb = pw["cond_a_better"], pw["cond_b_better"]
                if ca["n"]:
                    lines.append(f"    where {a} better (n={ca['n']}): "
                                 f"{a}={_fmt(ca['a_avg'])} {b}={_fmt(ca['b_avg'])} "
                                 f"diff={_fmt(ca['diff'])}")
                if cb["n"]:
                    lines.append(f"    where {b} better (n={cb['n']}): "
                                 f"{a}={_fmt(cb['a_avg'])} {b}={_fmt(cb['b_avg'])} "
                                 f"diff={_fmt(cb['diff'])}")
                w = pw["welch_series_means"]
                lines.append(f"    Welch over per-series means: t={_fmt(w['t'])} "
                             f"dof={_fmt(w['dof'])} p={_fmt(w['p'])}"
                             f"{' significant' if w['significant'] else ''}")
        lines.append("")
        return "\n".join(lines)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return "undef"
    return f"{v:.3f}"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _is_baseline(method: str) -> bool:
    return method in BASELINE_METHODS


def _pairwise_section(methods, series_ids, per_series, window_metrics) -> list:
    out = []
    for i, a in enumerate(methods):
        for b in methods[i + 1:]:
            usable = [sid for sid in series_ids
                      if np.isfinite(per_series[sid][a]["mase"])
                      and np.isfinite(per_series[sid][b]["mase"])]
            if a == b:
                entry = {"a": a, "b": b, "n_series": len(usable),
                         "a_better_pct": 50.0, "b_better_pct": 50.0,
                         "cond_a_better": {"n": 0}, "cond_b_better": {"n": 0},
                         "welch_series_means": _welch_dict([], []),
                         "welch_per_series": {}}
                out.append(entry)
                continue
            # orientation: ties go to the incumbent
            if _is_baseline(b) and not _is_baseline(a):
                incumbent = b
            elif _is_baseline(a) and not _is_baseline(b):
                incumbent = a
            else:
                incumbent = b  # later-listed method
            a_wins = [sid for sid in usable
                      if per_series[sid][a]["mase"] < per_series[sid][b]["mase"]]
            b_wins = [sid for sid in usable
                      if per_series[sid][b]["mase"] < per_series[sid][a]["mase"]]
            n_ties = len(usable) - len(a_wins) - len(b_wins)
            n = len(usable)
            credited_a = len(a_wins) + (n_ties if incumbent == a else 0)
            a_pct = 100.0 * credited_a / n if n else float("nan")

            def cond(sids):
                # conditional means over strict winners only
                if not sids:
                    return {"n": 0, "a_avg": None, "b_avg": None, "diff": None}
                av = float(np.mean([per_series[s][a]["mase"] for s in sids]))
                bv = float(np.mean([per_series[s][b]["mase"] for s in sids]))
                return {"n": len(sids), "a_avg": av, "b_avg": bv,
                        "diff": abs(av - bv)}

            means_a = [per_series[s][a]["mase"] for s in usable]
            means_b = [per_series[s][b]["mase"] for s in usable]
            per_series_welch = {}
            for sid in usable:
                wa = [v for v in window_metrics[sid][a]["mase"] if np.isfinite(v)]
                wb = [v for v in window_metrics[sid][b]["mase"] if np.isfinite(v)]
                per_series_welch[sid] = _welch_dict(wa, wb)
            out.append({
                "a": a, "b": b, "n_series": n, "incumbent": incumbent,
                "n_ties": n_ties,
                "a_better_pct": a_pct,
                "b_better_pct": 100.0 - a_pct if n else float("nan"),
                "cond_a_better": cond(a_wins),
                "cond_b_better": cond(b_wins),
                "welch_series_means": _welch_dict(means_a, means_b),
                "welch_per_series": per_series_welch,
            })
    return out


def _welch_dict(a, b) -> dict:
    r = welch_t_test(a, b) if len(a) >= 2 and len(b) >= 2 else None
    if r is None or not r.defined:
        return {"t": None, "dof": None, "p": None, "defined": False,
                "significant": False}
    return {"t": r.t, "dof": r.dof, "p": r.p, "defined": True,
            "significant": r.significant}


def benchmark(methods: list[str], records: list[SeriesRecord],
              cfg: BenchmarkConfig,
              train_overrides: dict[str, TrainingConfig] | None = None) -> EvalReport:
    """Run every method under identical conditions and assemble the report."""
    if not methods:
        raise UsageError("no methods requested")
    for m in methods:
        if m not in ALL_METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {ALL_METHODS}")
    if not records:
        raise DataError("no series to benchmark")
    overrides = train_overrides or {}
    for m, t in overrides.items():
        if t.seed != cfg.train.seed:
            raise ProtocolError(
                f"method {m!r} was given seed {t.seed}, but the shared protocol "
                f"seed is {cfg.train.seed}; all methods must share seeds and splits")

    truth_by_id = {r.series_id: r for r in records}
    if cfg.masking is not None:
        masked = [synthetic_mask(r, cfg.masking) for r in records]
    else:
        masked = records
    masked_by_id = {r.series_id: r for r in masked}
    series_ids = [r.series_id for r in records]

    # every model trains and forecasts in per-series scaled space (fit on the
    # training slice only); predictions are rescaled before scoring, and the
    # copy-previous yardstick works on raw values throughout
    train_slices = {r.series_id: r.slice(0, r.length - cfg.test_len) for r in masked}
    profile: ScalingProfile = fit_scaling(list(train_slices.values()))

    train_examples: dict[str, list[ForecastExample]] = {}
    eval_windows: dict[str, list[EvalWindow]] = {}
    for rec in masked:
        sid = rec.series_id
        source = apply_scaling(rec, profile)
        tr = source.slice(0, rec.length - cfg.test_len)
        exs, _ = make_examples(tr, cfg.in_len, cfg.horizon, cfg.stride)
        train_examples[sid] = exs
        eval_windows[sid] = build_eval_windows(source, truth_by_id[sid], cfg)

    per_series: dict = {sid: {} for sid in series_ids}
    window_metrics: dict = {sid: {} for sid in series_ids}
    for method in methods:
        tcfg = overrides.get(method, cfg.train)
        if cfg.mode == "background" and method != "copy_previous":
            pooled = [ex for sid in series_ids for ex in train_examples[sid]]
            all_windows = [ew for sid in series_ids for ew in eval_windows[sid]]
            # copy-previous stays on raw values either way
            run = run_baseline(method, pooled, all_windows, cfg,
                               masked_by_id, tcfg)
            preds = run["preds"]
        else:
            preds = {}
            for sid in series_ids:
                exs = train_examples[sid]
                if method != "copy_previous" and not exs:
                    raise DataError(f"series '{sid}' produced no training examples")
                run = run_baseline(method, exs, eval_windows[sid], cfg,
                                   masked_by_id, tcfg)
                preds.update(run["preds"])

        for sid in series_ids:
            truth = truth_by_id[sid]
            train_truth = truth.slice(0, truth.length - cfg.test_len)
            w_mase, w_mape = [], []
            n_undef = 0
            for ew in eval_windows[sid]:
                p = np.asarray(preds[(sid, ew.anchor)], dtype=float)
                if method != "copy_previous":
                    p = p * profile.scale_y[sid]
                actual = np.where(ew.truth_mask[:, None], ew.truth_y, np.nan)
                mr = mase(p[:, 0], actual[:, 0], train_truth.y[:, 0],
                          train_truth.observed)
                pr = mape(p[:, 0], actual[:, 0])
                if np.isfinite(mr.value):
                    w_mase.append(mr.value)
                else:
                    n_undef += 1
                if np.isfinite(pr.value):
                    w_mape.append(pr.value)
            per_series[sid][method] = {
                "mase": float(np.mean(w_mase)) if w_mase else float("nan"),
                "mape": float(np.mean(w_mape)) if w_mape else float("nan"),
                "n_windows": len(eval_windows[sid]),
                "n_undefined": n_undef,
            }
            window_metrics[sid][method] = {"mase": w_mase, "mape": w_mape}

    relevant = [sid for sid in series_ids
                if any(per_series[sid][m]["mase"] < 1.0 for m in methods
                       if np.isfinite(per_series[sid][m]["mase"]))]
    hard = [sid for sid in series_ids if sid not in relevant]

    aggregates = {}
    agg_base = relevant if relevant else series_ids
    for m in methods:
        mases = [per_series[sid][m]["mase"] for sid in agg_base
                 if np.isfinite(per_series[sid][m]["mase"])]
        mapes = [per_series[sid][m]["mape"] for sid in agg_base
                 if np.isfinite(per_series[sid][m]["mape"])]
        aggregates[m] = {
            "mase": {"max": max(mases) if mases else None,
                     "avg": float(np.mean(mases)) if mases else None,
                     "min": min(mases) if mases else None},
            "mape": {"max": max(mapes) if mapes else None,
                     "avg": float(np.mean(mapes)) if mapes else None,
                     "min": min(mapes) if mapes else None},
        }

    pairwise = _pairwise_section(methods, agg_base, per_series, window_metrics) \
        if len(methods) > 1 else []

    config_echo = {
        "in_len": cfg.in_len, "horizon": cfg.horizon, "stride": cfg.stride,
        "eval_stride": cfg.eval_stride, "test_len": cfg.test_len,
        "enc_hidden": cfg.enc_hidden, "dec_hidden": cfg.dec_hidden,
        "layers": cfg.layers, "mode": cfg.mode,
        "masking": None if cfg.masking is None else {
            "q0": cfg.masking.q0, "widths": list(cfg.masking.widths),
            "seed": cfg.masking.seed},
        "train": {"batch_size": cfg.train.batch_size, "epochs": cfg.train.epochs,
                  "optimizer": cfg.train.optimizer,
                  "learning_rate": cfg.train.learning_rate,
                  "seed": cfg.train.seed, "loss_mode": cfg.train.loss_mode,
                  "patience": cfg.train.patience},
    }
    return EvalReport(config_echo, list(methods), series_ids, per_series,
                      aggregates, pairwise, relevant, hard, window_metrics)
