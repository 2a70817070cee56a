"""``stdk`` command line: ingest -> train-interp -> interpolate -> train-forecast
-> forecast -> evaluate -> render.

Every command reads the same TOML config (``--config``) and writes into the
output directory. Artifacts carry the config hash and seed, either in a
binary header or in a ``.meta`` sidecar; downstream commands refuse inputs
built under a different config.

Exit codes: 0 ok, 2 missing input, 3 provenance mismatch, 4 shape/index
error, 5 numeric failure.
"""
from __future__ import annotations

import argparse
import datetime as dt
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import basis as B
from . import forecast as fc
from . import ingest, metrics, net, render
from .config import RunConfig
from .errors import InvalidArgumentError, MissingInputError, ProvenanceError, ShapeError, StdkError

log = logging.getLogger("stdk")

SERIES_FILE = "series.csv"
PARAMS_FILE = "standardization.txt"
INTERP_CKPT = "interp.ckpt"
INTERP_STACK = "interp.grds"
FORECAST_CKPT = "forecast.ckpt"
FORECAST_STACK = "forecast.grds"
EVAL_FILE = "eval.csv"


def _write_meta(path: Path, meta: dict) -> None:
    Path(str(path) + ".meta").write_text("".join(f"{k}={meta[k]}\n" for k in sorted(meta)))


def _read_meta(path: Path) -> dict:
    meta_path = Path(str(path) + ".meta")
    if not meta_path.exists():
        raise MissingInputError(f"provenance sidecar not found: {meta_path}")
    return ingest.parse_key_values(meta_path.read_text())


def _check_provenance(cfg: RunConfig, meta: dict, what) -> None:
    if meta.get("config_hash") != cfg.hash:
        raise ProvenanceError(f"{what} was built with a different config (hash {meta.get('config_hash', '?')[:12]})")


def _prepare_out(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective.toml").write_text(cfg.to_toml())
    return out


def _input(path, default: Path) -> Path:
    p = Path(path) if path else default
    if not p.exists():
        raise MissingInputError(f"input file not found: {p}")
    return p


def _basis(cfg: RunConfig, grid) -> B.Basis:
    mask_path = cfg.path("water_mask")
    mask = None
    if mask_path is not None:
        mask = B.read_water_mask(cfg.require("water_mask"))
    return B.Basis(cfg.basis_config(), mask, grid.bbox)


def _grid(cfg: RunConfig):
    return ingest.parse_grid_spec(cfg.require("grid").read_text())


def cmd_ingest(cfg: RunConfig, args) -> int:
    stations = ingest.parse_station_csv(cfg.require("stations"))
    window = int(cfg.data["ingest"]["window"])
    smoothed, params = ingest.smooth_and_standardize(stations, window)
    out = _prepare_out(cfg)
    ingest.write_station_csv(out / SERIES_FILE, smoothed, value_column="value")
    (out / PARAMS_FILE).write_text(params.to_text() + f"seed={cfg.seed}\nconfig_hash={cfg.hash}\nwindow={window}\n")
    _write_meta(out / SERIES_FILE, {"seed": cfg.seed, "config_hash": cfg.hash, "stations": len(stations)})
    log.info("ingested %d stations; mean %.4f std %.4f", len(stations), params.mean, params.std)
    return 0


def _time_span(stations):
    day0 = min(s.start_date for s in stations)
    last = max(s.start_date + dt.timedelta(days=len(s.values) - 1) for s in stations)
    return day0, (last - day0).days + 1


def _normalize_time(day_index, n_days):
    return np.asarray(day_index, dtype=np.float64) / max(n_days - 1, 1)


def _station_rows(stations, grid, day0, n_days):
    u, v, t, y, sid = [], [], [], [], []
    for k, s in enumerate(stations):
        su, sv = grid.to_unit(s.lon, s.lat)
        offset = (s.start_date - day0).days
        days = offset + np.arange(len(s.values))
        obs = ~np.isnan(s.values)
        u.append(np.full(obs.sum(), su))
        v.append(np.full(obs.sum(), sv))
        t.append(_normalize_time(days[obs], n_days))
        y.append(s.values[obs])
        sid.append(np.full(obs.sum(), k))
    return [np.concatenate(a) for a in (u, v, t, y, sid)]


def cmd_train_interp(cfg: RunConfig, args) -> int:
    out = cfg.out_dir
    series_path = _input(args.series, out / SERIES_FILE)
    _check_provenance(cfg, _read_meta(series_path), series_path)
    stations = ingest.parse_station_csv(series_path, value_column="value")
    params = ingest.StandardizationParams.from_text(_input(None, out / PARAMS_FILE).read_text())
    grid = _grid(cfg)
    inside = [s for s in stations if grid.contains(s.lon, s.lat)]
    if len(inside) < len(stations):
        log.warning("dropping %d stations outside the grid bbox", len(stations) - len(inside))
    if not inside:
        raise InvalidArgumentError("no stations inside the grid bbox")
    day0, n_days = _time_span(inside)
    basis = _basis(cfg, grid)
    stdk_cfg = cfg.stdk_config()

    frac = float(cfg.data["ingest"]["holdout_fraction"])
    train, test = (inside, []) if frac <= 0 or len(inside) < 2 else ingest.split_train_test(inside, frac, cfg.seed)
    u, v, t, y, _ = _station_rows(train, grid, day0, n_days)
    x = basis.embed(u, v, t)
    model, history = net.train_interpolator(x, y, stdk_cfg, cfg.seed)

    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": "stdk-interp",
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "basis_digest": basis.digest(),
        "layout_version": B.LAYOUT_VERSION,
        "input_dim": basis.n_features,
        "n_temporal": basis.n_temporal,
        "n_spatial": basis.n_spatial,
        "hidden_layout": ",".join(map(str, stdk_cfg.hidden_layout)),
        "quantiles": ",".join(map(repr, stdk_cfg.quantiles)),
        "day0": day0.isoformat(),
        "n_days": n_days,
        "mean": repr(params.mean),
        "std": repr(params.std),
    }
    ad.save_checkpoint(out / INTERP_CKPT, model.state_dict(), meta)
    sidecar = "".join(f"{k}={meta[k]}\n" for k in sorted(meta))
    sidecar += "loss_history=" + ",".join(repr(h) for h in history) + "\n"
    if test:
        tu, tv, tt, ty, _ = _station_rows(test, grid, day0, n_days)
        q = net.predict_quantiles(model, basis.embed(tu, tv, tt))
        report = metrics.evaluate(ty, q[:, 0], q[:, 1], q[:, 2])
        (out / "interp_holdout.csv").write_text(report.to_csv())
        _write_meta(out / "interp_holdout.csv", {"seed": cfg.seed, "config_hash": cfg.hash, "test_stations": len(test)})
        sidecar += f"holdout_stations={len(test)}\n"
        log.info("held-out stations:\n%s", report.to_text())
    (out / (INTERP_CKPT + ".txt")).write_text(sidecar)
    return 0


def _load_interp(cfg: RunConfig, path: Path):
    state, meta = ad.load_checkpoint(path)
    if meta.get("kind") != "stdk-interp":
        raise ProvenanceError(f"{path} is not an interpolation checkpoint")
    _check_provenance(cfg, meta, path)
    if int(meta.get("layout_version", -1)) != B.LAYOUT_VERSION:
        raise ProvenanceError(f"{path}: feature layout version {meta.get('layout_version')} != {B.LAYOUT_VERSION}")
    model = net.StdkNet(int(meta["input_dim"]), tuple(int(w) for w in meta["hidden_layout"].split(",") if w))
    model.load_state_dict(state)
    return model, meta


def cmd_interpolate(cfg: RunConfig, args) -> int:
    out = cfg.out_dir
    model, meta = _load_interp(cfg, _input(args.checkpoint, out / INTERP_CKPT))
    grid = _grid(cfg)
    basis = _basis(cfg, grid)
    if basis.digest() != meta["basis_digest"]:
        raise ProvenanceError("basis configuration or water mask differs from the one used in training")
    if basis.n_features != model.input_dim:
        raise ShapeError(f"embedding width {basis.n_features} != model input {model.input_dim}")
    n_days = int(meta["n_days"])
    times = list(grid.times) or list(range(n_days))
    bad = [d for d in times if not 0 <= d < n_days]
    if bad:
        raise InvalidArgumentError(f"time indices {bad[:5]} outside the trained span 0..{n_days - 1}")

    uu, vv = grid.unit_centers()
    spatial = B.spatial_embedding_batch(uu.ravel(), vv.ravel(), basis.spatial)
    stack = np.empty((len(times), 3, grid.ny, grid.nx))
    for k, day in enumerate(times):
        temporal = B.temporal_embedding_batch(_normalize_time([day], n_days), basis.temporal)
        x = np.concatenate([np.broadcast_to(temporal, (len(spatial), temporal.shape[1])), spatial], axis=1)
        q = net.predict_quantiles(model, x)
        stack[k] = q.T.reshape(3, grid.ny, grid.nx)
    out.mkdir(parents=True, exist_ok=True)
    target = Path(args.output) if args.output else out / INTERP_STACK
    fc.write_grid_stack(target, stack)
    _write_meta(target, {"seed": cfg.seed, "config_hash": cfg.hash, "channels": "lower,median,upper",
                         "times": ",".join(map(str, times)), "day0": meta["day0"]})
    log.info("wrote %d interpolated frames of %dx%d to %s", len(times), grid.ny, grid.nx, target)
    return 0


def _median_frames(stack: np.ndarray) -> np.ndarray:
    if stack.shape[1] == 3:
        return stack[:, 1]
    if stack.shape[1] == 1:
        return stack[:, 0]
    raise ShapeError(f"expected 1 or 3 channels per frame, got {stack.shape[1]}")


def _forecaster_from(cfg: RunConfig, kind: str, shape, fcfg: fc.ForecastConfig):
    if kind == "convlstm":
        return fc.ConvLstmForecaster(1, fcfg.hidden_channels, fcfg.kernel, cfg.seed), None
    if kind == "stdk":
        basis = _basis(cfg, _grid(cfg))
        level = int(cfg.data["forecast"]["basis_level"])
        channels = basis.spatial_channels(shape, level)
        return fc.StdkForecaster(channels, fcfg.hidden_channels, fcfg.kernel, cfg.seed), basis.digest()
    raise InvalidArgumentError(f"forecast.model must be 'convlstm' or 'stdk', got {kind!r}")


def cmd_train_forecast(cfg: RunConfig, args) -> int:
    out = cfg.out_dir
    stack_path = _input(args.stack, out / INTERP_STACK)
    _check_provenance(cfg, _read_meta(stack_path), stack_path)
    frames = _median_frames(fc.read_grid_stack(stack_path))
    samples = fc.build_sequences(list(frames))
    fcfg = cfg.forecast_config()
    kind = cfg.data["forecast"]["model"]
    model, digest = _forecaster_from(cfg, kind, frames.shape[1:], fcfg)
    model, history = fc.train_forecaster(samples, fcfg, cfg.seed, model=model)
    meta = {
        "kind": kind,
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "height": frames.shape[1],
        "width": frames.shape[2],
        "samples": len(samples),
    }
    if digest:
        meta["basis_digest"] = digest
    out.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(out / FORECAST_CKPT, model.state_dict(), meta)
    sidecar = "".join(f"{k}={meta[k]}\n" for k in sorted(meta))
    sidecar += "loss_history=" + ",".join(repr(h) for h in history) + "\n"
    (out / (FORECAST_CKPT + ".txt")).write_text(sidecar)
    log.info("trained %s forecaster on %d sequences; loss %.4f -> %.4f", kind, len(samples), history[0] if history else float("nan"), history[-1] if history else float("nan"))
    return 0


def cmd_forecast(cfg: RunConfig, args) -> int:
    out = cfg.out_dir
    ckpt_path = _input(args.checkpoint, out / FORECAST_CKPT)
    state, meta = ad.load_checkpoint(ckpt_path)
    _check_provenance(cfg, meta, ckpt_path)
    stack_path = _input(args.stack, out / INTERP_STACK)
    _check_provenance(cfg, _read_meta(stack_path), stack_path)
    frames = _median_frames(fc.read_grid_stack(stack_path))
    if frames.shape[1:] != (int(meta["height"]), int(meta["width"])):
        raise ShapeError(f"stack frames {frames.shape[1:]} vs checkpoint grid {meta['height']}x{meta['width']}")
    fcfg = cfg.forecast_config()
    model, digest = _forecaster_from(cfg, meta["kind"], frames.shape[1:], fcfg)
    if digest is not None and digest != meta.get("basis_digest"):
        raise ProvenanceError("basis rasters differ from the ones used in training")
    model.load_state_dict(state)
    samples = fc.build_sequences(list(frames))
    preds = fc.predict_fields(model, samples)
    result = np.full((len(frames), 3) + frames.shape[1:], np.nan)
    for sample, pred in zip(samples, preds):
        result[sample.start + fc.TARGET_OFFSET] = pred
    target = Path(args.output) if args.output else out / FORECAST_STACK
    fc.write_grid_stack(target, result)
    _write_meta(target, {"seed": cfg.seed, "config_hash": cfg.hash, "channels": "lower,median,upper",
                         "model": meta["kind"], "lead": fc.TARGET_OFFSET})
    log.info("wrote %d forecasts to %s", len(samples), target)
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = cfg.out_dir
    truth = fc.read_grid_stack(_input(args.truth, out / INTERP_STACK))
    pred = fc.read_grid_stack(_input(args.pred, out / FORECAST_STACK))
    if pred.shape[1] != 3:
        raise ShapeError(f"prediction stack needs 3 channels (lower, median, upper), got {pred.shape[1]}")
    y = _median_frames(truth)
    if y.shape != pred[:, 0].shape:
        raise ShapeError(f"truth frames {y.shape} vs prediction frames {pred[:, 0].shape}")
    lower, median, upper = pred[:, 0], pred[:, 1], pred[:, 2]
    if args.mm:
        params = ingest.StandardizationParams.from_text(_input(args.params, out / PARAMS_FILE).read_text())
        y, lower, median, upper = (ingest.destandardize(a, params) for a in (y, lower, median, upper))
    report = metrics.evaluate(y, lower, median, upper)
    out.mkdir(parents=True, exist_ok=True)
    target = Path(args.output) if args.output else out / EVAL_FILE
    target.write_text(report.to_csv())
    _write_meta(target, {"seed": cfg.seed, "config_hash": cfg.hash, "scale": "mm" if args.mm else "standardized"})
    print(report.to_text(), end="")
    return 0


def cmd_render(cfg: RunConfig, args) -> int:
    out = cfg.out_dir
    stack = fc.read_grid_stack(_input(args.stack, out / FORECAST_STACK))
    if not 0 <= args.time < len(stack):
        raise InvalidArgumentError(f"time index {args.time} out of range 0..{len(stack) - 1}")
    frame = stack[args.time]
    if args.triptych:
        if frame.shape[0] != 3:
            raise ShapeError("triptych needs a 3-channel (lower, median, upper) stack")
        fields = [frame[0], frame[1], frame[2]]
    else:
        channel = args.channel if args.channel is not None else (1 if frame.shape[0] == 3 else 0)
        if not 0 <= channel < frame.shape[0]:
            raise InvalidArgumentError(f"channel {channel} out of range 0..{frame.shape[0] - 1}")
        fields = [frame[channel]]
    out.mkdir(parents=True, exist_ok=True)
    target = Path(args.png) if args.png else out / f"frame_{args.time:04d}.png"
    render.render_fields(target, fields, args.palette)
    _write_meta(target, {"seed": cfg.seed, "config_hash": cfg.hash, "time": args.time})
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "train-interp": cmd_train_interp,
    "interpolate": cmd_interpolate,
    "train-forecast": cmd_train_forecast,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stdk", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="smooth and standardize station CSV")
    p = sub.add_parser("train-interp", parents=[common], help="train the quantile interpolator")
    p.add_argument("--series")
    p = sub.add_parser("interpolate", parents=[common], help="predict quantile grids")
    p.add_argument("--checkpoint")
    p.add_argument("--output")
    p = sub.add_parser("train-forecast", parents=[common], help="train the ConvLSTM forecaster")
    p.add_argument("--stack")
    p = sub.add_parser("forecast", parents=[common], help="forecast from an interpolated stack")
    p.add_argument("--checkpoint")
    p.add_argument("--stack")
    p.add_argument("--output")
    p = sub.add_parser("evaluate", parents=[common], help="MSPE / PICP / MPIW of a prediction stack")
    p.add_argument("--truth")
    p.add_argument("--pred")
    p.add_argument("--output")
    p.add_argument("--mm", action="store_true", help="destandardize before scoring")
    p.add_argument("--params")
    p = sub.add_parser("render", parents=[common], help="write a PNG heatmap of one frame")
    p.add_argument("--stack")
    p.add_argument("--time", type=int, default=0)
    p.add_argument("--png")
    p.add_argument("--palette", default="blues", choices=sorted(render.PALETTES))
    p.add_argument("--channel", type=int)
    p.add_argument("--triptych", action="store_true", help="lower | median | upper side by side")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config, seed=args.seed, out=args.out)
        return COMMANDS[args.command](cfg, args)
    except StdkError as exc:
        print(f"stdk {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
