"""Command-line entry points: simulate | train | eval | predict | flow-viz.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure during
training, 4 incompatible inputs (mismatched grids, malformed containers).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import ParameterError
from .evaluation import (
    DEFAULT_THRESHOLD,
    color_wheel_legend,
    direct_head_rollout,
    evaluate_flow_model,
    f1_from_counts,
    flow_to_color,
    overlay_image,
    pr_curve,
    predict_next,
    rollout_flow,
)
from .io_formats import (
    CompatibilityError,
    Config,
    ConfigError,
    FormatError,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    write_pgm,
    write_ppm,
)
from .sim import ScenarioConfig, generate_dataset
from .training import TrainConfig, TrainingDivergedError, train, train_direct

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_COMPAT = 4


def _scenario_from_config(cfg: Config) -> ScenarioConfig:
    rows, cols = cfg.get_grid("grid", default=(100, 100))
    return ScenarioConfig(
        scenario=cfg.get_str("scenario", "static_platform"),
        rows=rows,
        cols=cols,
        cell_size=cfg.get_float("cell_size", 0.1),
        fps=cfg.get_float("fps", 15.0),
        seq_len=cfg.get_int("seq_len", 20),
        beam_count=cfg.get_int("beams", 181),
        range_max=cfg.get_float("range_max", max(rows, cols) * cfg.get_float("cell_size", 0.1) * 1.5),
        objects_min=int(cfg.get_range("objects", default=(1, 3))[0]),
        objects_max=int(cfg.get_range("objects", default=(1, 3))[1]),
        disc_radius=cfg.get_range("radii", default=(0.15, 0.35)),
        disc_speed=cfg.get_range("speeds", default=(0.5, 1.5)),
        ego_speed=cfg.get_range("ego_speeds", default=(0.0, 1.0)),
        ego_omega=cfg.get_range("ego_omega", default=(-0.3, 0.3)),
        walls=cfg.get_bool("walls", True),
        with_gt_flow=cfg.get_bool("gt_flow", True),
    )


def _train_config(cfg: Config, preset: str, meta: dict, seed: int) -> TrainConfig:
    base = TrainConfig.desk() if preset == "desk" else TrainConfig.paper()
    return replace(
        base,
        batch_size=cfg.get_int("batch_size", base.batch_size),
        lr0=cfg.get_float("lr0", base.lr0),
        epochs=cfg.get_int("epochs", base.epochs),
        schedule_period=cfg.get_int("schedule_period", base.schedule_period),
        gaussian_f0=cfg.get_int("gaussian_f0", base.gaussian_f0),
        warmup_frames=cfg.get_int("warmup_frames", base.warmup_frames),
        precision=cfg.get_str("precision", base.precision),
        momentum=cfg.get_float("momentum", base.momentum),
        grad_clip=cfg.get_float("grad_clip", base.grad_clip),
        seq_len=meta["seq_len"],
        rows=meta["rows"],
        cols=meta["cols"],
        seed=seed,
    )


def cmd_simulate(args) -> int:
    cfg = Config.load(args.config)
    scenario = _scenario_from_config(cfg)
    count = cfg.get_int("count", 8)
    samples = generate_dataset(scenario, count, args.seed)
    save_dataset(args.out, samples, scenario.scenario)
    frames = count * (scenario.seq_len + 1)
    occ_rate = float(np.mean([fr.occupancy.mean() for s in samples for fr in [*s.frames, s.gt_next]]))
    print(
        f"wrote {args.out}: {count} sequences, {frames} frames of "
        f"{scenario.rows}x{scenario.cols}, scenario {scenario.scenario}, "
        f"occupancy rate {occ_rate:.4f}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    dataset, meta = load_dataset(args.dataset)
    cfg = Config.load(args.config) if args.config else Config({}, "<defaults>")
    config = _train_config(cfg, args.preset, meta, args.seed)
    trainer = train_direct if args.head == "direct" else train

    epoch_hook = None
    if args.checkpoint_every > 0:

        def epoch_hook(epoch, p):
            if epoch % args.checkpoint_every == args.checkpoint_every - 1:
                save_checkpoint(f"{args.out}.epoch{epoch:04d}", p, epoch=epoch + 1, rows=config.rows, cols=config.cols)

    params, log = trainer(dataset, config, epoch_hook=epoch_hook)
    save_checkpoint(args.out, params, epoch=config.epochs, rows=config.rows, cols=config.cols)
    log_path = args.log or f"{args.out}.log.csv"
    log.to_csv(log_path)
    from .reports import save_training_figure

    save_training_figure(f"{args.out}.curves.png", log)
    print(
        f"trained {args.head} model for {config.epochs} epochs "
        f"(final loss {log.rows[-1].loss:.6g}, final f {log.rows[-1].filter_size}); "
        f"checkpoint {args.out}, log {log_path}"
    )
    return EXIT_OK


def _check_grid(meta: dict, ckpt_meta: dict, path) -> None:
    arch = ckpt_meta["architecture"]
    if (arch.get("rows"), arch.get("cols")) != (meta["rows"], meta["cols"]):
        raise CompatibilityError(
            f"checkpoint {path} was trained on {arch.get('rows')}x{arch.get('cols')} grids, "
            f"dataset has {meta['rows']}x{meta['cols']}"
        )


def _eval_direct(dataset, params, threshold: float, warmup: int):
    tp = fp = fn = 0
    softs, gts = [], []
    for sample in dataset:
        probs = direct_head_rollout(sample.frames, params)
        for t in range(warmup, len(sample.frames)):
            target = sample.frames[t + 1] if t + 1 < len(sample.frames) else sample.gt_next
            soft = probs[t]
            pred = (soft > threshold).astype(np.float64)
            p = pred > 0.5
            g = target.occupancy > 0.5
            tp += int(np.count_nonzero(p & g))
            fp += int(np.count_nonzero(p & ~g))
            fn += int(np.count_nonzero(~p & g))
            softs.append(soft)
            gts.append(target.occupancy)
    return f1_from_counts(tp, fp, fn), softs, gts


def cmd_eval(args) -> int:
    dataset, meta = load_dataset(args.dataset)
    params, ckpt_meta = load_checkpoint(args.checkpoint)
    if params.kind != "flow":
        raise CompatibilityError(f"{args.checkpoint} holds a {params.kind} head, eval needs a flow model")
    _check_grid(meta, ckpt_meta, args.checkpoint)
    warmup = min(args.warmup, meta["seq_len"] - 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = evaluate_flow_model(dataset, params, DEFAULT_THRESHOLD, warmup)
    rows = [
        f"model,{meta['scenario']},{result.f1:.6f},{result.f1_visible:.6f}",
        f"persistence,{meta['scenario']},{result.persistence_f1:.6f},",
    ]
    curves = {"model": result.curve()}
    if args.direct_checkpoint:
        dparams, dmeta = load_checkpoint(args.direct_checkpoint)
        if dparams.kind != "direct":
            raise CompatibilityError(f"{args.direct_checkpoint} does not hold a direct head")
        _check_grid(meta, dmeta, args.direct_checkpoint)
        f1_direct, dsofts, dgts = _eval_direct(dataset, dparams, DEFAULT_THRESHOLD, warmup)
        rows.append(f"direct,{meta['scenario']},{f1_direct:.6f},")
        curves["direct"] = pr_curve(dsofts, dgts)

    header = [
        "# micro-averaged over all supervised cells; threshold "
        f"{DEFAULT_THRESHOLD}; warmup {warmup}; epe "
        f"{'n/a' if result.epe is None else f'{result.epe:.4f}'}",
        "method,scenario,f1,f1_visible",
    ]
    (out / "f1.csv").write_text("\n".join(header + rows) + "\n")
    (out / "pr.csv").write_text(
        "\n".join(f"{t:.2f},{p:.6f},{r:.6f}" for t, p, r in curves["model"].points) + "\n"
    )
    from .reports import save_pr_figure

    save_pr_figure(out / "pr_curve.png", curves)

    for i, sample in enumerate(dataset[: args.images]):
        softs, targets, flows, _vis = rollout_flow(sample, params, warmup)
        pred = (softs[-1] > DEFAULT_THRESHOLD).astype(np.float64)
        write_ppm(out / f"overlay_{i:03d}.ppm", overlay_image(pred, targets[-1]))
        write_ppm(out / f"flow_{i:03d}.ppm", flow_to_color(flows[-1], max_flow=args.max_flow))
    epe_text = "n/a" if result.epe is None else f"{result.epe:.4f} cells"
    print(
        f"eval on {meta['seq_count']} sequences ({meta['scenario']}): "
        f"model F1 {result.f1:.4f} (visible {result.f1_visible:.4f}), "
        f"persistence F1 {result.persistence_f1:.4f}, flow EPE {epe_text}; report in {out}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    dataset, meta = load_dataset(args.dataset)
    params, ckpt_meta = load_checkpoint(args.checkpoint)
    if params.kind != "flow":
        raise CompatibilityError(f"{args.checkpoint} holds a {params.kind} head, predict needs a flow model")
    _check_grid(meta, ckpt_meta, args.checkpoint)
    warmup = min(args.warmup, meta["seq_len"] - 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(dataset):
        softs, targets, flows, _vis = rollout_flow(sample, params, warmup)
        prediction = predict_next(sample.frames[-1].occupancy, flows[-1])
        write_pgm(out / f"pred_soft_{i:03d}.pgm", prediction.soft_map)
        write_pgm(out / f"pred_binary_{i:03d}.pgm", prediction.binary_map)
        write_ppm(out / f"pred_overlay_{i:03d}.ppm", overlay_image(prediction.binary_map, targets[-1]))
    print(f"wrote next-map predictions for {meta['seq_count']} sequences to {out}")
    return EXIT_OK


def cmd_flow_viz(args) -> int:
    dataset, meta = load_dataset(args.dataset)
    params, ckpt_meta = load_checkpoint(args.checkpoint)
    if params.kind != "flow":
        raise CompatibilityError(f"{args.checkpoint} holds a {params.kind} head, flow-viz needs a flow model")
    _check_grid(meta, ckpt_meta, args.checkpoint)
    warmup = min(args.warmup, meta["seq_len"] - 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "legend.ppm", color_wheel_legend())
    count = 0
    for i, sample in enumerate(dataset):
        _softs, _targets, flows, _vis = rollout_flow(sample, params, warmup)
        for k in range(flows.shape[0]):
            write_ppm(out / f"flow_{i:03d}_{warmup + k:03d}.ppm", flow_to_color(flows[k], max_flow=args.max_flow))
            count += 1
    print(f"wrote {count} flow images (+legend) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="key = value scenario file")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--config", help="key = value hyperparameter overrides")
    p.add_argument("--preset", choices=("desk", "paper"), default="paper")
    p.add_argument("--head", choices=("flow", "direct"), default="flow")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="training log CSV path")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also save every N epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, write report")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direct-checkpoint", help="optional direct-head baseline checkpoint")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--images", type=int, default=4, help="number of overlay/flow images")
    p.add_argument("--max-flow", type=float, default=5.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write next-map predictions")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warmup", type=int, default=10)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("flow-viz", help="render flow fields as images")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--max-flow", type=float, default=5.0)
    p.set_defaults(func=cmd_flow_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CompatibilityError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
