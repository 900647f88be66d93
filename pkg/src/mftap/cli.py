"""Command-line entry point: ``mftap {gendata,flow,train,eval,propagate}``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error (missing or
corrupt files), 3 numeric failure. Diagnostics are a single line on stderr.
``MFTAP_THREADS`` sets the worker count for ``flow`` and ``eval``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from mftap import synth
from mftap.autodiff import Tensor
from mftap.config import ConfigError, RunConfig, coerce_value, dump_config, parse_config_text
from mftap.dataset import (
    DataError,
    estimate_sequence_flows,
    load_sequences,
    read_flow_cache,
    write_dataset,
    write_flow_cache,
)
from mftap.errors import (
    CheckpointError,
    FlowFormatError,
    ImageFormatError,
    NumericError,
    ShapeError,
    SpecValidationError,
)
from mftap.flow import FlowConfig, apply_flow, dilate, endpoint_error
from mftap.formats import Checkpoint, load_checkpoint, read_flo, read_pnm, save_checkpoint, write_overlay, write_pnm
from mftap.metrics import MetricReport, aggregate, format_table, is_finite, score_frame, write_csv
from mftap.network import ABLATION_NAMES, NetworkConfig, TAPNet
from mftap.training import Adam, TrainConfig, TrainState, predict_sequence, train, write_loss_log

log = logging.getLogger("mftap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def worker_count() -> int:
    raw = os.environ.get("MFTAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MFTAP_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _pmap(fn, items):
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    for f in fields(RunConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="VALUE")


def _explicit(args) -> dict:
    """Settings from the config file, then flags; flags win."""
    values = parse_config_text(Path(args.config).read_text()) if args.config else {}
    for f in fields(RunConfig):
        raw = getattr(args, "cfg_" + f.name, None)
        if raw is not None:
            values[f.name] = coerce_value(f.name, raw)
    return values


def _run_config(args, base: dict | None = None) -> RunConfig:
    return RunConfig(**{**(base or {}), **_explicit(args)})


def _network_config(cfg: RunConfig) -> NetworkConfig:
    return NetworkConfig(
        num_classes=cfg.num_classes,
        stage_widths=cfg.widths,
        prior_mode=cfg.prior_mode,
        upsample_mode=cfg.upsample,
        dtype=cfg.dtype,
    )


def _flow_config(cfg: RunConfig) -> FlowConfig:
    return FlowConfig(levels=cfg.flow_levels, smoothness=cfg.flow_smoothness, iterations=cfg.flow_iterations)


def _needs_flow(cfg: RunConfig) -> bool:
    return cfg.prior_mode == "flow" or cfg.semi


def _sequence_flows(cfg: RunConfig, seqs) -> dict[str, list]:
    out = {}
    for seq in seqs:
        if not _needs_flow(cfg):
            out[seq.name] = [None] * (len(seq) - 1)
        elif cfg.flow_source == "ground_truth":
            if len(seq.flows) != len(seq) - 1:
                raise DataError(f"{seq.name}: manifest has no ground-truth flow")
            out[seq.name] = seq.flows
        else:
            if not cfg.flow_cache:
                raise ConfigError("flow_source=estimated needs flow_cache (run `mftap flow` first)")
            out[seq.name] = read_flow_cache(cfg.flow_cache, seq)
    return out


def _require(cfg: RunConfig, *keys: str) -> None:
    for k in keys:
        if not getattr(cfg, k):
            raise ConfigError(f"missing required setting: {k}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gendata(args) -> int:
    def make(seeds):
        return [synth.generate(synth.random_scene(s, frames=args.frames, height=args.size, width=args.size)) for s in seeds]

    splits = {
        "train": make(range(args.seed, args.seed + args.train)),
        "test": make(range(args.seed + 10_000, args.seed + 10_000 + args.test)),
    }
    if args.edge_cases:
        splits["edge"] = [synth.generate(s) for s in synth.edge_case_suite(args.frames, args.size, args.size)]
    path = write_dataset(splits, args.out, args.label_interval)
    count = sum(len(v) for v in splits.values())
    print(f"wrote {count} sequences to {path}")
    return EXIT_OK


def _estimate_one(job):
    seq, fcfg = job
    return seq.name, estimate_sequence_flows(seq, fcfg)


def cmd_flow(args) -> int:
    cfg = _run_config(args)
    _require(cfg, "manifest", "flow_cache")
    seqs = load_sequences(cfg.manifest, None if args.all_splits else cfg.split)
    fcfg = _flow_config(cfg)
    results = _pmap(_estimate_one, [(s, fcfg) for s in seqs])
    errors = []
    for seq, (name, flows) in zip(seqs, results):
        write_flow_cache(cfg.flow_cache, name, flows)
        if len(seq.flows) == len(flows):
            for t, (est, ref) in enumerate(zip(flows, seq.flows)):
                fg = seq.masks["binary"][t] > 0 if "binary" in seq.masks else None
                if fg is None or fg.any():
                    errors.append(endpoint_error(est, ref, fg))
    msg = f"wrote {sum(len(f) for _, f in results)} flow fields to {cfg.flow_cache}"
    if errors:
        msg += f"; mean endpoint error on instrument pixels {np.mean(errors):.3f} px"
    print(msg)
    return EXIT_OK


def _checkpoint_for(net: TAPNet, cfg: RunConfig, state: TrainState) -> Checkpoint:
    opt = state.optimizer
    return Checkpoint(
        config=cfg.as_dict(),
        tensors={k: p.data for k, p in net.params.items()},
        step=state.step,
        optimizer={"t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        moments={k: (opt.m[k], opt.v[k]) for k in net.params} if opt.m else None,
    )


def _restore(ckpt: Checkpoint) -> tuple[RunConfig, TAPNet, TrainState]:
    try:
        cfg = RunConfig(**ckpt.config)
    except TypeError as exc:
        raise CheckpointError(f"config echo does not match this version: {exc}") from None
    net_cfg = _network_config(cfg)
    net = TAPNet(net_cfg, params={k: Tensor(v, requires_grad=True) for k, v in ckpt.tensors.items()})
    expected = set(TAPNet(net_cfg).params)
    if set(net.params) != expected:
        raise CheckpointError("checkpoint tensors do not match the configured network")
    o = ckpt.optimizer or {}
    opt = Adam(lr=o.get("lr", cfg.learning_rate), beta1=o.get("beta1", 0.9), beta2=o.get("beta2", 0.999), eps=o.get("eps", 1e-8))
    opt.t = int(o.get("t", 0))
    if ckpt.moments:
        opt.m = {k: m.copy() for k, (m, _) in ckpt.moments.items()}
        opt.v = {k: v.copy() for k, (_, v) in ckpt.moments.items()}
    return cfg, net, TrainState(optimizer=opt, step=ckpt.step)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    _require(cfg, "manifest", "checkpoint")
    seqs = load_sequences(cfg.manifest, cfg.split)
    if any(cfg.task not in s.masks for s in seqs):
        raise DataError(f"manifest lacks {cfg.task} masks")
    flows = _sequence_flows(cfg, seqs)
    if args.resume and Path(cfg.checkpoint).is_file():
        _, net, state = _restore(load_checkpoint(cfg.checkpoint))
        state.optimizer.lr = cfg.learning_rate
    else:
        net = TAPNet(_network_config(cfg), seed=cfg.seed)
        state = TrainState(optimizer=Adam(lr=cfg.learning_rate))
    tcfg = TrainConfig(
        lr=cfg.learning_rate,
        epochs=cfg.epochs,
        seed=cfg.seed,
        label_interval=cfg.label_interval,
        semi=cfg.semi,
        beta=cfg.beta,
        dilation_radius=cfg.dilation_radius,
        task=cfg.task,
    )
    first = len(state.log)
    state = train(seqs, net, tcfg, flows=flows, state=state)
    Path(cfg.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(_checkpoint_for(net, cfg, state), cfg.checkpoint)
    if cfg.loss_log:
        write_loss_log(state.log[first:], cfg.loss_log, append=bool(args.resume))
    recent = [r.loss_value for r in state.log[-20:]]
    print(f"trained {ABLATION_NAMES[cfg.prior_mode]} for {cfg.epochs} epochs, {state.step} steps, "
          f"final loss {np.mean(recent) if recent else float('nan'):.4f}; saved {cfg.checkpoint}")
    return EXIT_OK


def _predict_job(job):
    net_cfg, arrays, seq, flows, radius = job
    net = TAPNet(net_cfg, params={k: Tensor(v) for k, v in arrays.items()})
    return predict_sequence(net, seq, flows, radius)


def evaluate_checkpoint(cfg: RunConfig, net: TAPNet, seqs, overlay_dir: Path | None = None) -> MetricReport:
    flows = _sequence_flows(cfg, seqs)
    arrays = {k: p.data for k, p in net.params.items()}
    preds = _pmap(_predict_job, [(net.cfg, arrays, s, flows[s.name], cfg.dilation_radius) for s in seqs])
    scores = []
    for seq, pred in zip(seqs, preds):
        gt = seq.masks[cfg.task]
        scores.extend(score_frame(pred.labels[t], gt[t], cfg.num_classes) for t in range(len(seq)))
        if overlay_dir is not None:
            d = overlay_dir / seq.name
            d.mkdir(parents=True, exist_ok=True)
            for t in range(len(seq)):
                heat = pred.attention[t][-1] if pred.attention[t] else None
                write_overlay(d / f"frame_{t:03d}.ppm", seq.frames[t], pred.labels[t], heat)
    return aggregate(scores, task=cfg.task, label=ABLATION_NAMES[cfg.prior_mode])


# settings that define the network; eval takes them from the checkpoint
_NETWORK_KEYS = ("task", "prior_mode", "stage_widths", "upsample", "dtype")


def cmd_eval(args) -> int:
    explicit = _explicit(args)
    if not explicit.get("checkpoint"):
        raise UsageError("eval needs --checkpoint")
    saved, net, _ = _restore(load_checkpoint(explicit["checkpoint"]))
    for k in _NETWORK_KEYS:
        if k in explicit and explicit[k] != getattr(saved, k):
            raise ConfigError(f"{k}={explicit[k]!r} contradicts the checkpoint ({getattr(saved, k)!r})")
    keep = {k: v for k, v in saved.as_dict().items() if k not in ("manifest", "split", "flow_cache", "report_dir")}
    keep["split"] = "test"
    cfg = _run_config(args, base=keep)
    _require(cfg, "manifest")
    seqs = load_sequences(cfg.manifest, cfg.split)
    if any(cfg.task not in s.masks for s in seqs):
        raise DataError(f"manifest lacks {cfg.task} masks")
    report_dir = Path(cfg.report_dir) if cfg.report_dir else None
    overlay_dir = report_dir / "overlays" if report_dir is not None and args.overlays else None
    report = evaluate_checkpoint(cfg, net, seqs, overlay_dir)
    if not is_finite(report):
        raise NumericError("evaluation produced non-finite scores")
    table = format_table([report])
    if report_dir is not None:
        report_dir.mkdir(parents=True, exist_ok=True)
        write_csv(report, report_dir / "report.csv")
        (report_dir / "report.txt").write_text(table)
        (report_dir / "config.txt").write_text(dump_config(cfg))
    print(table, end="")
    return EXIT_OK


def cmd_propagate(args) -> int:
    mask = read_pnm(args.mask, as_float=False)
    if mask.ndim != 2:
        raise DataError(f"{args.mask}: expected a single-channel PGM")
    flow = read_flo(args.flow)
    if args.radius < 0:
        raise UsageError("--radius must be >= 0")
    # gray levels go through unchanged: splat-max and dilation commute with monotone scaling
    prior = dilate(apply_flow(mask.astype(np.float64), flow), args.radius)
    write_pnm(args.out, prior.astype(np.uint8))
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mftap", description="Temporal-prior instrument segmentation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gendata", help="render a synthetic dataset with manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=8)
    g.add_argument("--test", type=int, default=2)
    g.add_argument("--frames", type=int, default=30)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--label-interval", type=int, default=1)
    g.add_argument("--edge-cases", action="store_true", help="add the edge-case scenes as split 'edge'")
    g.set_defaults(func=cmd_gendata)

    f = sub.add_parser("flow", help="estimate and cache flow for adjacent frame pairs")
    _add_config_flags(f)
    f.add_argument("--all-splits", action="store_true")
    f.set_defaults(func=cmd_flow)

    t = sub.add_parser("train", help="train and write a checkpoint and loss log")
    _add_config_flags(t)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint if it exists")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    _add_config_flags(e)
    e.add_argument("--overlays", action="store_true", help="write per-frame PPM overlays")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("propagate", help="carry a mask along a flow field")
    pr.add_argument("--mask", required=True)
    pr.add_argument("--flow", required=True)
    pr.add_argument("--radius", type=int, default=2)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_propagate)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"mftap: error[{kind}]: {msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        # non-finite values are detected explicitly; keep stderr to one line
        with np.errstate(all="ignore"):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (DataError, FlowFormatError, ImageFormatError, CheckpointError, ShapeError, SpecValidationError, OSError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)


if __name__ == "__main__":
    sys.exit(main())
