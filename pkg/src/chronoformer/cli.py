"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (including training divergence).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from typing import TextIO

import numpy as np

from . import config as C
from . import data as D
from .attention import (
    MASK_KINDS,
    CostCounter,
    build_logsparse_mask,
    build_mask,
    causal_mask,
    probsparse_attention,
    scaled_dot_product_attention,
)
from .blocks import Batch, Transformer, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, DataError, NumericError, ParseError, UsageError
from .positional import PESpec, pe_columns
from .tensor import tensor
from .training import TrainState, autoregressive_forecast, train, write_log

PRED_HEADER = "origin,h,timestamp"
BENCH_HEADER = "L,full,causal,logsparse,logsparse_bound,probsparse,probsparse_u,probsparse_ratio"
SPLITS = ("train", "valid", "test", "last")
FORECAST_CHUNK = 64


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageExit(f"{self.prog}: error: {message}")


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _open_out(path: str | None) -> TextIO:
    if path is None or path == "-":
        return sys.stdout
    return open(path, "w", encoding="utf-8", newline="\n")


def _close(fh: TextIO) -> None:
    if fh is not sys.stdout:
        fh.close()


def _matrix_csv(fh: TextIO, matrix, columns=None) -> None:
    matrix = np.asarray(matrix)
    cols = range(matrix.shape[1]) if columns is None else columns
    fh.write(",".join(str(c) for c in cols) + "\n")
    for row in matrix:
        fh.write(",".join(_fmt(v) for v in row) + "\n")


def _int_list(text: str) -> list[int]:
    """``"2-32"`` or ``"2,4,8"``."""
    try:
        if "-" in text and "," not in text:
            lo, hi = (int(p) for p in text.split("-", 1))
            return list(range(lo, hi + 1))
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a list like 2,4,8 or a range like 2-32, got {text!r}") from None


# -- gen --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    ts = D.gen_synthetic(args.kind, args.n, args.period, args.sigma, args.seed, args.slope, args.step_seconds)
    out = _open_out(args.out)
    try:
        D.write_csv(out, ts)
    finally:
        _close(out)
    if args.figure:
        from . import plotting

        shown = min(len(ts), 1024)
        plotting.lines(ts.timestamps[:shown], {"v1": ts.values[:shown, 0]}, args.figure,
                       title=f"{args.kind} (first {shown} steps)", xlabel="timestamp")
    return 0


# -- train --------------------------------------------------------------------------


def _values(args) -> dict:
    file_values = C.load_config(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, k) for k in C.KEYS if hasattr(args, k)}
    return C.resolve(file_values, flags)


def _fit(values: dict, ts: D.TimeSeries, on_step=None):
    prep = D.prepare_datasets(
        ts, values["window"], values["horizon"], values["tde_dim"], values["tde_tau"],
        values["stride"], differences=values["differences"], segments=values["segments"],
    )
    cfg = C.model_config(values, prep.train.inputs.shape[-1], prep.target_width)
    model = Transformer(cfg, seed=values["seed"])
    state = TrainState(model, C.schedule(values), values["clip"] or None, values["seed"])
    train(state, prep.train, values["steps"], values["batch"], on_step)
    return state, prep


def cmd_train(args) -> int:
    values = _values(args)
    ts = D.read_csv(args.data)
    state, prep = _fit(values, ts)
    tensors = state.model.state_dict()
    tensors["norm.mean"] = prep.stats.mean
    tensors["norm.std"] = prep.stats.std
    save_checkpoint(args.out, tensors)
    resolved = C.format_config(values)
    with open(args.out + ".cfg", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(resolved)
    log_path = args.log or args.out + ".log.csv"
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        write_log(fh, state.log)
    sys.stdout.write("# resolved configuration\n" + resolved)
    if state.history:
        sys.stdout.write(f"# final training loss {_fmt(state.history[-1])} after {state.step} steps\n")
    if args.figure:
        from . import plotting

        steps = np.array([r.step for r in state.log])
        plotting.lines(steps, {"loss": np.array(state.history)}, args.figure,
                       title="training loss", xlabel="step", ylabel="loss", logy=True)
    return 0


# -- shared checkpoint loading -----------------------------------------------------------


def _load_model(ckpt: str, ts: D.TimeSeries):
    cfg_path = ckpt + ".cfg"
    if not os.path.exists(cfg_path):
        raise DataError(f"missing resolved configuration {cfg_path} next to the checkpoint")
    values = C.resolve(C.load_config(cfg_path))
    tensors = load_checkpoint(ckpt)
    try:
        stats = D.Normalizer(tensors.pop("norm.mean"), tensors.pop("norm.std"))
    except KeyError:
        raise DataError(f"checkpoint {ckpt} lacks normalisation statistics") from None
    v = ts.width
    expected = v * (3 if values["differences"] else 1)
    if stats.mean.shape != (expected,):
        raise DataError(f"checkpoint was trained on {stats.mean.size} columns, data gives {expected}")
    series = D.add_differences(ts) if values["differences"] else ts
    normed = D.TimeSeries(series.timestamps, stats.normalize(series.values), series.period)
    embedded = D.time_delay_embed(normed, values["tde_dim"], values["tde_tau"])
    cfg = C.model_config(values, embedded.width, v)
    model = Transformer(cfg, seed=values["seed"])
    model.load_state_dict(tensors)
    offset = len(ts) - len(embedded)
    return model, values, stats, embedded, offset


def _windows(values, embedded: D.TimeSeries, offset: int, split: str, v: int, stride: int = 1):
    lags = D.segment_lags(embedded.period, values["segments"])
    return D.split_windows(embedded, SPLITS.index(split), values["window"], values["horizon"],
                           stride, v, offset, lags)


def _final_window(values, embedded: D.TimeSeries, offset: int, start: int | None = None) -> Batch:
    """Inputs for one window whose recent part starts at row ``start`` (default: the last rows)."""
    M = values["window"]
    lags = D.segment_lags(embedded.period, values["segments"])
    n = len(embedded)
    start = n - M if start is None else start
    lo = max(lags, default=0)
    if not lo <= start <= n - M:
        raise DataError(f"window start must lie in {lo}..{n - M}, got {start}")
    rows = D.window_rows([start], M, lags)
    return Batch(embedded.values[rows], input_index=rows + offset, input_times=embedded.timestamps[rows])


def _forecast_windows(model, ds: D.WindowedDataset, H: int) -> np.ndarray:
    chunks = []
    for i in range(0, len(ds), FORECAST_CHUNK):
        idx = np.arange(i, min(i + FORECAST_CHUNK, len(ds)))
        chunks.append(autoregressive_forecast(model, ds.batch(idx), H))
    return np.concatenate(chunks, axis=0)


# -- forecast -----------------------------------------------------------------------


def cmd_forecast(args) -> int:
    ts = D.read_csv(args.data)
    model, values, stats, embedded, offset = _load_model(args.checkpoint, ts)
    v, M, H = ts.width, values["window"], values["horizon"]
    if args.split == "last":
        period = ts.period
        if period is None:
            raise DataError("cannot extend timestamps past the data: sampling is irregular")
        batch = _final_window(values, embedded, offset)
        pred = autoregressive_forecast(model, batch, H)
        origins = embedded.timestamps[-1:]
        times = origins[:, None] + period * np.arange(1, H + 1)[None]
        inputs = batch.inputs
    else:
        ds = _windows(values, embedded, offset, args.split, v, args.stride)
        pred = _forecast_windows(model, ds, H)
        origins = ds.input_times[:, -1]
        times = ds.target_times
        inputs = ds.inputs
    pred = stats.denormalize(pred, slice(0, v))
    out = _open_out(args.out)
    try:
        out.write(PRED_HEADER + "," + ",".join(f"v{j + 1}" for j in range(v)) + "\n")
        for w in range(pred.shape[0]):
            for h in range(H):
                fields = [str(int(origins[w])), str(h + 1), str(int(times[w, h]))]
                out.write(",".join(fields + [_fmt(x) for x in pred[w, h]]) + "\n")
    finally:
        _close(out)
    if args.figure:
        from . import plotting

        w = pred.shape[0] - 1
        hist = stats.denormalize(inputs[w, -M:, :v], slice(0, v))[:, 0]
        in_times = times[w, 0] - (ts.period or 1) * np.arange(M, 0, -1)
        truth = None
        if args.split != "last":
            index = {int(t): i for i, t in enumerate(ts.timestamps)}
            truth = np.array([ts.values[index[int(t)], 0] for t in times[w]])
        plotting.forecast(in_times, hist, times[w], pred[w, :, 0], args.figure, truth,
                          title=f"forecast from origin {int(origins[w])}")
    return 0


# -- eval -----------------------------------------------------------------------------


def _read_predictions(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    header = lines[0].split(",") if lines else []
    if header[:3] != PRED_HEADER.split(",") or len(header) < 4:
        raise ParseError(f"expected header '{PRED_HEADER},v1[,...]'", line=1)
    width = len(header) - 3
    origins, hs, stamps, values = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != width + 3:
            raise ParseError(f"expected {width + 3} fields, got {len(fields)}", line=lineno)
        try:
            origins.append(int(fields[0]))
            hs.append(int(fields[1]))
            stamps.append(int(fields[2]))
            values.append([float(x) for x in fields[3:]])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
    if not values:
        raise DataError(f"{path} holds no predictions")
    return np.array(origins), np.array(hs), np.array(stamps), np.array(values)


def cmd_eval(args) -> int:
    origins, hs, stamps, pred = _read_predictions(args.pred)
    ts = D.read_csv(args.data)
    if pred.shape[1] != ts.width:
        raise DataError(f"predictions have {pred.shape[1]} columns, truth has {ts.width}")
    index = {int(t): i for i, t in enumerate(ts.timestamps)}

    def rows_for(stamps_):
        try:
            return np.array([index[int(t)] for t in stamps_])
        except KeyError as exc:
            raise DataError(f"timestamp {exc.args[0]} not found in {args.data}") from None

    target_rows = rows_for(stamps)
    truth = ts.values[target_rows]
    result = D.metrics(pred, truth)
    lines = [("rmse", result["rmse"]), ("mae", result["mae"]), ("count", pred.size)]
    horizons = np.unique(hs)
    per_h = {int(h): D.metrics(pred[hs == h], truth[hs == h])["rmse"] for h in horizons}
    lines += [(f"rmse_h{h}", r) for h, r in per_h.items()]
    base_per_h = None
    if args.baseline != "none":
        origin_rows = rows_for(origins)
        if args.baseline == "persistence":
            source = origin_rows
        else:
            if args.period is None:
                raise ConfigError("--baseline seasonal needs --period (in steps)")
            source = origin_rows + hs - args.period * np.ceil(hs / args.period).astype(int)
            if source.min() < 0:
                raise DataError("seasonal baseline reaches before the start of the data")
        base = ts.values[source]
        b = D.metrics(base, truth)
        base_per_h = {int(h): D.metrics(base[hs == h], truth[hs == h])["rmse"] for h in horizons}
        lines += [
            (f"{args.baseline}_rmse", b["rmse"]),
            (f"{args.baseline}_mae", b["mae"]),
            ("rmse_ratio", result["rmse"] / b["rmse"] if b["rmse"] > 0 else math.inf),
        ]
        lines += [(f"{args.baseline}_rmse_h{h}", r) for h, r in base_per_h.items()]
    out = _open_out(args.out)
    try:
        out.write("metric,value\n")
        for name, value in lines:
            out.write(f"{name},{value if isinstance(value, (int, np.integer)) else _fmt(value)}\n")
    finally:
        _close(out)
    if args.figure:
        from . import plotting

        series = {"model": np.array(list(per_h.values()))}
        if base_per_h is not None:
            series[args.baseline] = np.array(list(base_per_h.values()))
        plotting.lines(horizons, series, args.figure, title="RMSE by horizon", xlabel="h", ylabel="RMSE")
    return 0


# -- pe / mask ----------------------------------------------------------------------------


def cmd_pe(args) -> int:
    spec = PESpec(args.d, args.base)
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    positions = np.arange(args.start, args.start + args.n)
    matrix = pe_columns(positions, spec)
    out = _open_out(args.out)
    try:
        _matrix_csv(out, matrix, positions)
    finally:
        _close(out)
    if args.figure:
        from . import plotting

        plotting.heatmap(matrix, args.figure, title=f"sinusoidal encoding, d={args.d}",
                         xlabel="position", ylabel="dimension", cmap="RdBu")
    return 0


def cmd_mask(args) -> int:
    if args.len < 1:
        raise ConfigError(f"--len must be >= 1, got {args.len}")
    mask = build_mask(args.kind, args.len, window=args.window, block=args.block)
    out = _open_out(args.out)
    try:
        mask.write_csv(out)
    finally:
        _close(out)
    if args.figure:
        from . import plotting

        plotting.heatmap(mask.allowed.astype(float), args.figure, title=f"{args.kind} mask, L={args.len}",
                         xlabel="key", ylabel="query", cmap="Greys")
    return 0


# -- attn ---------------------------------------------------------------------------------


def cmd_attn(args) -> int:
    ts = D.read_csv(args.data)
    model, values, stats, embedded, offset = _load_model(args.checkpoint, ts)
    batch = _final_window(values, embedded, offset, args.origin)
    weights: list = []
    model.forward(batch, mode="one_shot", weights_out=weights)
    os.makedirs(args.out_dir, exist_ok=True)
    panels = []
    seen: dict[str, int] = {}
    for layer, w in weights:
        k = seen.get(layer, 0)
        seen[layer] = k + 1
        tag = f"{layer}_{('self', 'cross')[k]}" if layer.startswith("dec") else layer
        for head in range(w.shape[1]):
            name = f"attn_{tag}_head{head}.csv"
            with open(os.path.join(args.out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
                _matrix_csv(fh, w[0, head])
            sys.stdout.write(name + "\n")
            panels.append((f"{tag} head {head}", w[0, head]))
    if args.figure:
        from . import plotting

        plotting.heatmap_grid(panels, args.figure)
    return 0


# -- bench ----------------------------------------------------------------------------------


def bench_rows(lens, factor: float = 5.0, seed: int = 0, head_size: int = 4) -> list[dict]:
    rows = []
    for L in lens:
        if L < 2:
            raise ConfigError(f"benchmark lengths must be >= 2, got {L}")
        rng = np.random.default_rng(seed)
        Q, K, V = (tensor(rng.standard_normal((head_size, L))) for _ in range(3))
        counts = {}
        for name, mask in (
            ("full", None),
            ("causal", causal_mask(L)),
            ("logsparse", build_logsparse_mask(L, "logsparse")),
        ):
            c = CostCounter()
            scaled_dot_product_attention(Q, K, V, mask, c)
            counts[name] = c.dot_products
        c = CostCounter()
        u = min(L, max(1, math.ceil(factor * math.log(L))))
        probsparse_attention(Q, K, V, None, None, seed, c, factor)
        rows.append({
            "L": L,
            **counts,
            "logsparse_bound": L * (math.log2(L) + 2),
            "probsparse": c.dot_products,
            "probsparse_u": u,
            "probsparse_ratio": c.dot_products / L**2,
        })
    return rows


def cmd_bench(args) -> int:
    rows = bench_rows(args.lens, args.factor, args.seed, args.head_size)
    out = _open_out(args.out)
    try:
        out.write(BENCH_HEADER + "\n")
        for r in rows:
            out.write(",".join(
                str(r[k]) if isinstance(r[k], int) else _fmt(r[k]) for k in BENCH_HEADER.split(",")
            ) + "\n")
    finally:
        _close(out)
    if args.figure:
        from . import plotting

        L = np.array([r["L"] for r in rows])
        series = {k: np.array([r[k] for r in rows], dtype=float) for k in ("full", "causal", "logsparse", "probsparse")}
        plotting.lines(L, series, args.figure, title="query-key dot products", xlabel="L",
                       ylabel="count", logx=True, logy=True)
    return 0


# -- tde-sweep --------------------------------------------------------------------------------


def cmd_tde_sweep(args) -> int:
    values = _values(args)
    ts = D.read_csv(args.data)
    v = ts.width
    out = _open_out(args.out)
    results = []
    try:
        out.write("tde_dim,input_width,test_rmse,test_mae,persistence_rmse\n")
        for d in args.dims:
            run = dict(values, tde_dim=d, tde_tau=args.tau)
            state, prep = _fit(run, ts)
            if prep.test is None:
                raise DataError(f"test split too short for window {run['window']} + horizon {run['horizon']}")
            pred = _forecast_windows(state.model, prep.test, run["horizon"])
            cols = slice(0, v)
            pred = prep.stats.denormalize(pred, cols)
            truth = prep.stats.denormalize(prep.test.targets, cols)
            last = prep.stats.denormalize(prep.test.inputs[:, :, :v], cols)
            base = D.baseline_forecast("persistence", last, run["horizon"])
            m = D.metrics(pred, truth)
            b = D.metrics(base, truth)
            out.write(f"{d},{prep.test.inputs.shape[-1]},{_fmt(m['rmse'])},{_fmt(m['mae'])},{_fmt(b['rmse'])}\n")
            results.append((d, m["rmse"], b["rmse"]))
    finally:
        _close(out)
    if args.figure:
        from . import plotting

        dims = np.array([r[0] for r in results])
        plotting.lines(dims, {"model": np.array([r[1] for r in results]),
                              "persistence": np.array([r[2] for r in results])},
                       args.figure, title="test RMSE by embedding dimension", xlabel="d", ylabel="RMSE")
    return 0


# -- parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chronoformer", description="Time-series Transformer laboratory.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic series as CSV")
    g.add_argument("--kind", choices=D.SYNTHETIC_KINDS, default="sine")
    g.add_argument("--n", type=int, default=4096)
    g.add_argument("--period", type=float, default=64.0)
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--slope", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--step-seconds", type=int, default=300)
    g.add_argument("--out", help="output CSV (default stdout)")
    g.add_argument("--figure", help="also plot the series to this image file")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train on a CSV series; writes checkpoint, resolved config and log")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value file; flags override it")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log CSV (default <out>.log.csv)")
    t.add_argument("--figure", help="also plot the loss curve")
    C.add_flags(t)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="predict with a checkpoint")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--split", choices=SPLITS, default="test",
                   help="windows of a chronological split, or 'last' for the end of the series")
    f.add_argument("--stride", type=int, default=1, help="origin spacing within the split")
    f.add_argument("--out", help="predictions CSV (default stdout)")
    f.add_argument("--figure", help="also plot the final window's forecast")
    f.set_defaults(func=cmd_forecast)

    e = sub.add_parser("eval", help="score predictions against a truth CSV")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--baseline", choices=("none", "persistence", "seasonal"), default="persistence")
    e.add_argument("--period", type=int, help="seasonal lag in steps")
    e.add_argument("--out", help="metrics CSV (default stdout)")
    e.add_argument("--figure", help="also plot RMSE by horizon")
    e.set_defaults(func=cmd_eval)

    pe = sub.add_parser("pe", help="sinusoidal position-encoding matrix (dimensions x positions)")
    pe.add_argument("--d", type=int, default=16)
    pe.add_argument("--n", type=int, default=64)
    pe.add_argument("--base", type=float, default=10_000.0)
    pe.add_argument("--start", type=int, default=0, help="first position")
    pe.add_argument("--out")
    pe.add_argument("--figure")
    pe.set_defaults(func=cmd_pe)

    m = sub.add_parser("mask", help="attention mask as a 0/1 matrix (queries x keys)")
    m.add_argument("--kind", choices=MASK_KINDS, default="logsparse")
    m.add_argument("--len", type=int, default=16)
    m.add_argument("--window", type=int, default=4)
    m.add_argument("--block", type=int, default=8)
    m.add_argument("--out")
    m.add_argument("--figure")
    m.set_defaults(func=cmd_mask)

    a = sub.add_parser("attn", help="attention weights of a checkpointed model, one CSV per layer and head")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--origin", type=int, help="first input row (default: the final window)")
    a.add_argument("--out-dir", required=True)
    a.add_argument("--figure")
    a.set_defaults(func=cmd_attn)

    b = sub.add_parser("bench", help="dot-product counts by sequence length")
    b.add_argument("--lens", type=_int_list, default=[128, 256, 512, 1024])
    b.add_argument("--factor", type=float, default=5.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--head-size", type=int, default=4)
    b.add_argument("--out")
    b.add_argument("--figure")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("tde-sweep", help="train and score one model per delay-embedding dimension")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--dims", type=_int_list, default=list(range(2, 33)))
    s.add_argument("--tau", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--figure")
    C.add_flags(s, [k for k in C.KEYS if k not in ("tde_dim", "tde_tau")])
    s.set_defaults(func=cmd_tde_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageExit as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ContractError) as exc:
        print(f"chronoformer: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"chronoformer: data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"chronoformer: data error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"chronoformer: numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
