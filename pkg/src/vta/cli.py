"""Command-line driver. Every command works inside one run directory (``--out``) that holds the
resolved config, the data, checkpoints, curves, figures and a manifest of what was written."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import backbone as bb
from . import guidance as gd
from . import plotting
from .annotation import annotate, build_prompt
from .config import RunConfig, from_dict, load_config
from .errors import PrerequisiteError, ValidationError, VtaError
from .grpo import Task, make_tasks, run_pipeline, write_curve, write_stage_metrics
from .indicators import compute_panel
from .market import (BarSeries, DatasetManifest, Regime, ingest_csv, make_windows, split_pairs, synth_market,
                     window_at, write_csv)
from .policy import PolicyCheckpoint, ToyReasoningPolicy
from .portfolio import backtest, equal_weight_equity, metrics, read_ledger, write_ledger

STAGE_FILES = ("base", "stage1", "stage2", "stage3")


# -- run directory ---------------------------------------------------------------------------

class Run:
    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def dir(self, *parts) -> Path:
        d = self.path(*parts)
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ValidationError(f"cannot create output directory {d}: {exc}") from exc
        return d

    def require(self, *parts, hint: str) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise PrerequisiteError(f"missing {p} (run `vta {hint}` first)")
        return p

    def record(self, command: str, files) -> None:
        """Manifest entry per command (rerunning replaces it), with a sha256 per artifact."""
        mpath = self.path("manifest.json")
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        manifest["version"] = __version__
        manifest["seed"] = self.cfg.seed
        manifest.setdefault("commands", {})[command] = {
            str(Path(f).relative_to(self.root)): hashlib.sha256(Path(f).read_bytes()).hexdigest()
            for f in sorted(map(str, files))
        }
        manifest["commands"] = dict(sorted(manifest["commands"].items()))
        mpath.write_text(json.dumps(manifest, indent=2) + "\n")


def _write_json(path, obj) -> Path:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return Path(path)


def _regime(cfg: RunConfig, i: int) -> Regime:
    m = cfg.market
    return Regime(drift=m.drift + m.drift_spread * (i - (m.symbols - 1) / 2), volatility=m.volatility, ar=m.ar,
                  start_price=m.start_price, start_date=m.start_date)


def load_dataset(run: Run) -> dict[str, BarSeries]:
    manifest = DatasetManifest.load(run.require("data", "dataset.json", hint="synth or ingest"))
    out = {}
    for sym in manifest.symbols:
        res = ingest_csv(run.path("data", manifest.files[sym]), symbol=sym)
        out[sym] = res.series[sym]
    return out


def dataset_split(cfg: RunConfig, data: dict[str, BarSeries], stride: int | None = None):
    m = cfg.market
    stride = m.stride if stride is None else stride
    calendar = np.unique(np.concatenate([s.dates for s in data.values()])) if data else None
    pairs = {sym: make_windows(s, m.window, m.horizon, stride, sym) for sym, s in sorted(data.items())}
    return split_pairs(pairs, m.val_frac, m.test_frac, calendar=calendar)


def _save_dataset(run: Run, series: dict[str, BarSeries]) -> list[Path]:
    cfg = run.cfg
    ddir = run.dir("data")
    files = {}
    for sym, s in sorted(series.items()):
        write_csv(s, ddir / f"{sym}.csv")
        files[sym] = f"{sym}.csv"
    _, cuts = dataset_split(cfg, series)
    DatasetManifest.describe(series, cuts, files, cfg.seed).save(ddir / "dataset.json")
    written = [ddir / f for f in files.values()] + [ddir / "dataset.json",
                                                     _write_json(run.path("config.json"), cfg.to_dict())]
    return written


# -- commands --------------------------------------------------------------------------------

def cmd_synth(run: Run, args) -> dict:
    cfg = run.cfg
    series = {f"SYN{i}": synth_market(cfg.seed * 1000 + i, cfg.market.days, _regime(cfg, i))
              for i in range(cfg.market.symbols)}
    written = _save_dataset(run, series)
    run.record("synth", written)
    return {"symbols": sorted(series), "days": cfg.market.days}


def cmd_ingest(run: Run, args) -> dict:
    series, rejected = {}, []
    for f in args.files:
        res = ingest_csv(f)
        for sym, s in res.series.items():
            if sym in series:
                raise ValidationError(f"symbol {sym} appears in more than one input file")
            series[sym] = s
        rejected += [{"file": str(f), "row": r.row, "message": r.message} for r in res.rejected]
    written = _save_dataset(run, series)
    written.append(_write_json(run.path("data", "rejected.json"), rejected))
    run.record("ingest", written)
    return {"symbols": sorted(series), "rejected_rows": len(rejected)}


def cmd_annotate(run: Run, args) -> dict:
    cfg = run.cfg
    data = load_dataset(run)
    split, _ = dataset_split(cfg, data)
    out = run.dir("annotations") / "annotations.jsonl"
    panels = {sym: compute_panel(s, cfg.indicators) for sym, s in data.items()}
    n = 0
    with open(out, "w") as fh:
        for part in ("train", "validation", "test"):
            for p in getattr(split, part):
                report = annotate(p.window, config=cfg.indicators, panel=panels[p.symbol])
                prompt = build_prompt(p.window, report, cfg.annotation.template, cfg.market.horizon,
                                      cfg.annotation.budget)
                fh.write(json.dumps({"symbol": p.symbol, "anchor": str(p.anchor), "split": part,
                                     "stats": report.stats._asdict(), "indicators": report.panel_tail,
                                     "annotation": report.text, "prompt": prompt.text}) + "\n")
                n += 1
    if n == 0:
        warnings.warn("dataset yields no windows; wrote an empty annotation file")
    run.record("annotate", [out])
    return {"records": n}


def _backbone_data(run: Run):
    data = load_dataset(run)
    split, _ = dataset_split(run.cfg, data)
    return data, split


def cmd_train_backbone(run: Run, args) -> dict:
    cfg = run.cfg
    _, split = _backbone_data(run)
    bdir = run.dir("backbone")
    emb = bb.EmbeddingMatrix.synthetic(width=cfg.backbone.d_model, seed=cfg.seed)
    emb.save(bdir / "embeddings.bin")
    model = bb.build_backbone(cfg.backbone, emb)
    xv, yv = bb.pairs_to_arrays(split.validation)
    init_mse = bb.evaluate_mse(model, xv, yv)
    curve = bb.train_backbone(model, split.train, split.validation, cfg.backbone, cfg.seed)
    bb.save_backbone(model, bdir / "model")
    bb.write_curve(curve, bdir / "curve.csv")
    metrics_ = {"init_val_mse": init_mse, "final_val_mse": bb.evaluate_mse(model, xv, yv),
                "train_windows": len(split.train), "val_windows": len(split.validation)}
    written = [bdir / "embeddings.bin", bdir / "model.bin", bdir / "model.json", bdir / "curve.csv",
               _write_json(bdir / "metrics.json", metrics_)]
    if curve:
        written += plotting.plot_curves({"train loss": ([p.epoch for p in curve], [p.train_loss for p in curve]),
                                         "val MSE": ([p.epoch for p in curve], [p.val_mse for p in curve])},
                                        bdir / "curve.svg", "loss", "Backbone training")
    run.record("train-backbone", written)
    return metrics_


def _reasoner_tasks(run: Run, data):
    cfg = run.cfg
    split, _ = dataset_split(cfg, data, stride=cfg.reasoner.task_stride)
    a = cfg.annotation
    return (make_tasks(split.train, cfg.indicators, a.template, a.budget),
            make_tasks(split.validation, cfg.indicators, a.template, a.budget))


def cmd_train_reasoner(run: Run, args) -> dict:
    cfg = run.cfg
    data = load_dataset(run)
    train, val = _reasoner_tasks(run, data)
    if not train:
        raise ValidationError("dataset yields no training windows for the reasoner")
    policy = ToyReasoningPolicy(cfg.policy)
    result = run_pipeline(policy, policy.init(cfg.seed), train, val, cfg.pipeline(), cfg.seed)
    rdir = run.dir("reasoner")
    written = []
    for name in STAGE_FILES:
        result.checkpoints[name].save(rdir / name)
        written += [rdir / f"{name}.bin", rdir / f"{name}.json"]
    for name, curve in result.curves.items():
        write_curve(curve, rdir / f"{name}_curve.csv")
        written.append(rdir / f"{name}_curve.csv")
    write_stage_metrics(result, rdir / "metrics.json")
    written.append(rdir / "metrics.json")
    curves = {name: ([p.step for p in c], [p.mean_reward for p in c]) for name, c in result.curves.items() if c}
    if curves:
        written += plotting.plot_curves(curves, rdir / "reward.svg", "mean reward", "Time-GRPO reward")
    run.record("train-reasoner", written)
    return result.metrics()


def _load_reasoner(run: Run) -> tuple[ToyReasoningPolicy, PolicyCheckpoint]:
    ckpt = PolicyCheckpoint.load(run.require("reasoner", "stage3.json", hint="train reasoner"))
    return ToyReasoningPolicy(run.cfg.policy), ckpt


def cmd_train_joint(run: Run, args) -> dict:
    cfg = run.cfg
    run.require("backbone", "model.json", hint="train backbone")
    model = bb.load_backbone(run.path("backbone", "model"))
    policy, ckpt = _load_reasoner(run)
    data, split = _backbone_data(run)
    a = cfg.annotation
    train_tasks = make_tasks(split.train, cfg.indicators, a.template, a.budget)
    val_tasks = make_tasks(split.validation, cfg.indicators, a.template, a.budget)
    train_attrs = [v.attributes for v in gd.reasoner_attributes(policy, ckpt, train_tasks)]
    val_attrs = [v.attributes for v in gd.reasoner_attributes(policy, ckpt, val_tasks)]
    head = gd.build_head(cfg.market.horizon, cfg.seed)
    curve = gd.train_joint(head, model, split.train, train_attrs, cfg.guidance, cfg.seed, split.validation, val_attrs)
    jdir = run.dir("joint")
    gd.save_head(head, jdir / "head")
    gd.write_curve(curve, jdir / "curve.csv")
    out = {"train_windows": len(split.train), "null_train_attributes": sum(c.null_flag for c in train_attrs)}
    if split.validation:
        xv, yv = bb.pairs_to_arrays(split.validation)
        phi = bb.forecast_uncond(model, xv)
        psi = gd.conditional_forward(head, phi, val_attrs)
        out.update(val_mse_uncond=float(np.mean((phi - yv) ** 2)), val_mse_cond=float(np.mean((psi - yv) ** 2)),
                   val_mse_guided=float(np.mean((gd.combine(phi, psi, cfg.guidance.s) - yv) ** 2)),
                   s=cfg.guidance.s)
    written = [jdir / "head.bin", jdir / "head.json", jdir / "curve.csv", _write_json(jdir / "metrics.json", out)]
    run.record("train-joint", written)
    return out


class Forecaster:
    """Full inference path: annotate, reason, extract attributes, guide the backbone forecast."""

    def __init__(self, run: Run):
        cfg = run.cfg
        run.require("backbone", "model.json", hint="train backbone")
        run.require("joint", "head.json", hint="train joint")
        self.cfg = cfg
        self.model = bb.load_backbone(run.path("backbone", "model"))
        self.head = gd.load_head(run.path("joint", "head"))
        self.policy, self.ckpt = _load_reasoner(run)
        self.panels = {}

    def __call__(self, symbol: str, window) -> gd.GuidedForecast:
        cfg = self.cfg
        hist = window.history
        # indicators are causal: a panel over the full history serves any earlier anchor
        if symbol not in self.panels or len(self.panels[symbol].dates) < len(hist):
            self.panels[symbol] = compute_panel(hist, cfg.indicators)
        report = annotate(window, hist, cfg.indicators, panel=self.panels[symbol])
        prompt = build_prompt(window, report, cfg.annotation.template, cfg.market.horizon, cfg.annotation.budget)
        task = Task(prompt, np.zeros(cfg.market.horizon), symbol, window.anchor)
        view = gd.reasoner_attributes(self.policy, self.ckpt, [task])[0]
        return gd.guided_forecast(self.model, self.head, window.features(), view.attributes, cfg.guidance.s,
                                  view.trace, symbol, str(window.anchor))


def cmd_forecast(run: Run, args) -> dict:
    cfg = run.cfg
    data = load_dataset(run)
    symbol = args.symbol or sorted(data)[0]
    if symbol not in data:
        raise ValidationError(f"unknown symbol {symbol!r}; dataset has {', '.join(sorted(data))}")
    series = data[symbol]
    if args.date:
        try:
            idx = series.index_of(args.date)
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"{symbol} has no bar on {args.date}") from exc
    else:
        idx = len(series) - 1
    try:
        window = window_at(series, idx, cfg.market.window, symbol)
    except IndexError as exc:
        raise ValidationError(str(exc)) from exc
    fc = Forecaster(run)(symbol, window)
    fdir = run.dir("forecasts")
    stem = f"{symbol}_{window.anchor}"
    out = fdir / f"{stem}.json"
    out.write_text(json.dumps(fc.to_dict(), indent=2) + "\n")
    norm = window.normalizer
    truth = series.adj_close[idx + 1: idx + 1 + cfg.market.horizon]
    written = [out] + plotting.plot_forecast(
        window.bars.adj_close, norm.inverse(fc.y_uncond), norm.inverse(fc.y_final), fdir / f"{stem}.svg",
        y_cond=norm.inverse(fc.y_cond), truth=truth if len(truth) == cfg.market.horizon else None,
        title=f"{symbol} from {window.anchor}")
    run.record(f"forecast:{stem}", written)
    return fc.to_dict()


def cmd_backtest(run: Run, args) -> dict:
    cfg = run.cfg
    data = load_dataset(run)
    manifest = DatasetManifest.load(run.path("data", "dataset.json"))
    start = manifest.splits.get("test_start")
    if start is None:
        raise ValidationError("dataset has no test period")
    forecaster = Forecaster(run)
    ledger = backtest(forecaster, data, start, kappa=cfg.portfolio.kappa, cost_bps=cfg.portfolio.cost_bps,
                      window=cfg.market.window, workers=args.workers)
    if not ledger.rows:
        raise ValidationError("test period has no tradable days")
    tdir = run.dir("backtest")
    summary = write_ledger(ledger, tdir / "ledger.csv", tdir / "summary.json")
    dates = [r.date for r in ledger.rows]
    bench = equal_weight_equity(data, dates)
    start_day = np.datetime64(dates[0], "D") - np.timedelta64(1, "D")  # equity before the first return
    written = [tdir / "ledger.csv", tdir / "summary.json"] + plotting.plot_equity(
        [start_day] + [np.datetime64(d, "D") + np.timedelta64(1, "D") for d in dates],
        ledger.equity(), tdir / "equity.svg", benchmark=bench)
    run.record("backtest", written)
    return summary


def _read_curve(path, x: str, y: str):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [int(r[x]) for r in rows], [float(r[y]) for r in rows]


def cmd_report(run: Run, args) -> dict:
    rdir = run.dir("report")
    rows, written = [], []
    if run.path("backbone", "curve.csv").exists():
        x, y = _read_curve(run.path("backbone", "curve.csv"), "epoch", "val_mse")
        written += plotting.plot_curves({"validation MSE": (x, y)}, rdir / "backbone_val_mse", "MSE",
                                        "Backbone validation MSE", formats=("png", "svg"))
        for k, v in json.loads(run.path("backbone", "metrics.json").read_text()).items():
            rows.append(("backbone", k, v))
    if run.path("reasoner", "metrics.json").exists():
        m = json.loads(run.path("reasoner", "metrics.json").read_text())
        written += plotting.plot_bars(m["val_mse"], rdir / "reasoner_stage_mse", "validation MSE",
                                      "Greedy validation MSE by stage", formats=("png", "svg"))
        curves = {}
        for stage in ("stage1", "stage3"):
            p = run.path("reasoner", f"{stage}_curve.csv")
            if p.exists():
                curves[stage] = _read_curve(p, "step", "mean_reward")
        if curves:
            written += plotting.plot_curves(curves, rdir / "reasoner_reward", "mean reward",
                                            "Time-GRPO reward", formats=("png", "svg"))
        rows += [("reasoner", f"val_mse_{k}", v) for k, v in m["val_mse"].items()]
        rows += [("reasoner", "kept_samples", m["kept_samples"]), ("reasoner", "generated_samples",
                                                                   m["generated_samples"])]
    if run.path("joint", "metrics.json").exists():
        rows += [("joint", k, v) for k, v in json.loads(run.path("joint", "metrics.json").read_text()).items()]
    if run.path("backtest", "ledger.csv").exists():
        ledger = read_ledger(run.path("backtest", "ledger.csv"), run.path("backtest", "summary.json"))
        m = metrics(ledger.equity(), strict=False)
        rows += [("backtest", k, v) for k, v in m._asdict().items()]
        written += plotting.plot_curves({"portfolio": (list(range(len(ledger.equity()))), ledger.equity())},
                                        rdir / "equity", "equity", "Backtest equity", formats=("png", "svg"))
    if not rows:
        raise PrerequisiteError(f"nothing to report in {run.root}; train or backtest first")
    with open(rdir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("section", "metric", "value"))
        for r in rows:
            w.writerow((r[0], r[1], "" if r[2] is None else repr(r[2]) if isinstance(r[2], float) else r[2]))
    written.append(rdir / "summary.csv")
    run.record("report", written)
    return {"rows": len(rows), "figures": len(written) - 1}


# -- entry point -----------------------------------------------------------------------------

TRAIN = {"backbone": cmd_train_backbone, "reasoner": cmd_train_reasoner, "joint": cmd_train_joint}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run config (default: the run's config.json, else defaults)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="run directory (default: the config's `out`)")
    common.add_argument("--workers", type=int, default=1, help="cap on parallel workers")

    p = argparse.ArgumentParser(prog="vta", description=__doc__)
    p.add_argument("--version", action="version", version=f"vta {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic multi-symbol dataset")
    ing = sub.add_parser("ingest", parents=[common], help="import OHLCV csv files")
    ing.add_argument("files", nargs="+", type=Path)
    sub.add_parser("annotate", parents=[common], help="write one annotation record per window")
    tr = sub.add_parser("train", parents=[common], help="train one component")
    tr.add_argument("stage", choices=sorted(TRAIN))
    fc = sub.add_parser("forecast", parents=[common], help="guided forecast for one window")
    fc.add_argument("--symbol")
    fc.add_argument("--date", help="anchor date (default: the symbol's last bar)")
    sub.add_parser("backtest", parents=[common], help="daily-rebalanced backtest over the test period")
    sub.add_parser("report", parents=[common], help="figures and a summary table from a run")
    return p


def _resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
        existing = Path(args.out or cfg.out) / "config.json"
        if args.command not in ("synth", "ingest") and existing.exists():
            cfg = from_dict(json.loads(existing.read_text()))
    cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    return from_dict(cfg.to_dict())  # re-validate after overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.workers < 1:
            raise ValidationError("--workers must be >= 1")
        cfg = _resolve_config(args)
        torch.set_num_threads(args.workers)
        run = Run(cfg.out, cfg)
        run.dir()
        if args.command == "train":
            result = TRAIN[args.stage](run, args)
        else:
            result = COMMANDS[args.command](run, args)
        print(json.dumps(result, indent=2, default=str))
        return 0
    except VtaError as exc:
        return _fail(exc, exc.exit_code)
    except Exception as exc:  # anything unexpected is a runtime failure
        return _fail(exc, 2)


def _fail(exc: Exception, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "annotate": cmd_annotate, "forecast": cmd_forecast,
            "backtest": cmd_backtest, "report": cmd_report}


if __name__ == "__main__":
    sys.exit(main())
