"""Command-line surface for the train / calibrate / sample / analyze pipeline.

Every subcommand accepts --config, --seed (overrides the config's seed) and
--out; nothing is written outside --out. Failures print a one-line
machine-parsable ``error: <kind>: <message>`` and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import analysis, csvio
from .calibration import CalibOptConfig, run_calibration
from .checkpoint import (load_any_model, load_model, save_calibration_set,
                         save_model, save_quantized_model)
from .config import RunConfig, load_config
from .datasets import gmm8_centers, make_dataset
from .diffusion import ddim_sample, make_linear_schedule, make_plan, moving_average, train
from .errors import QuantdiffError
from .network import build_model
from .quantizer import QuantConfig, QuantizedModel
from .rng import Rng

# Fixed substream allocation per pipeline stage (train's per-step substreams
# stay below 10^6, so these never collide with them).
DATA_STREAM = 1_000_000
MODEL_INIT_STREAM = 1_000_001
TRAIN_STREAM = 1_000_002
CALIB_STREAM = 1_000_003
SAMPLE_STREAM = 1_000_004
EVAL_STREAM = 1_000_005
ANALYSIS_STREAM = 1_000_006


def _setup(args) -> tuple[RunConfig, Rng, str]:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out
    os.makedirs(out, exist_ok=True)
    return cfg, Rng(cfg.seed), out


def _schedule_plan(cfg: RunConfig):
    schedule = make_linear_schedule(cfg.T_train, cfg.beta_start, cfg.beta_end)
    plan = make_plan(schedule, cfg.T_sample, cfg.eta)
    return schedule, plan


def _as_quantized(model) -> QuantizedModel:
    if isinstance(model, QuantizedModel):
        return model
    qm = QuantizedModel(model, QuantConfig(bits_w=32, bits_a=32),
                        {name: None for name in model.layers()},
                        {name: None for name in model.layers()})
    qm.freeze()
    return qm


def _reference(cfg: RunConfig, root: Rng) -> np.ndarray:
    return make_dataset(cfg.dataset, root.substream(EVAL_STREAM), cfg.eval_count)


def cmd_train(args) -> int:
    cfg, root, out = _setup(args)
    schedule, _ = _schedule_plan(cfg)
    dataset = make_dataset(cfg.dataset, root.substream(DATA_STREAM), cfg.dataset_size)
    model = build_model(root.substream(MODEL_INIT_STREAM))
    model, losses = train(model, dataset, schedule, root.substream(TRAIN_STREAM),
                          steps=cfg.train_steps, lr=cfg.train_lr, batch=cfg.train_batch)
    save_model(os.path.join(out, "model.qdck"), model)
    ma = moving_average(losses)
    csvio.write_loss_csv(os.path.join(out, "loss.csv"), losses, ma)
    print(f"trained {cfg.train_steps} steps; final loss_ma100 = {ma[-1]:.4f}")
    return 0


def cmd_calibrate(args) -> int:
    cfg, root, out = _setup(args)
    schedule, plan = _schedule_plan(cfg)
    fp_model = load_model(args.model)
    opt = CalibOptConfig(iters=cfg.calib_iters)
    qm, D = run_calibration(fp_model, schedule, plan, cfg.quant_config(),
                            cfg.calib_c, cfg.calib_n, root.substream(CALIB_STREAM),
                            opt=opt, strategy=cfg.calib_strategy)
    save_quantized_model(os.path.join(out, "quantized.qdck"), qm)
    if D is not None:
        save_calibration_set(os.path.join(out, "calibration_set.qdck"), D)
        print(f"calibration set: N = {len(D)} "
              f"(n = {D.meta['n']} x {len(D.meta['iterations'])} recorded steps)")
    print(f"calibrated W{cfg.bits_w}A{cfg.bits_a}, strategy {cfg.calib_strategy}")
    return 0


def cmd_sample(args) -> int:
    cfg, root, out = _setup(args)
    schedule, plan = _schedule_plan(cfg)
    model = load_any_model(args.model)
    traj = ddim_sample(model, schedule, plan, cfg.sample_count,
                       root.substream(SAMPLE_STREAM), record=args.trajectory)
    path = os.path.join(out, "samples.csv")
    if args.trajectory:
        csvio.write_trajectory_csv(path, traj)
    else:
        csvio.write_samples_csv(path, traj.final_sample)
    print(f"wrote {cfg.sample_count} samples to {path}")
    return 0


def cmd_profile_mse(args) -> int:
    cfg, root, out = _setup(args)
    schedule, plan = _schedule_plan(cfg)
    fp_model = load_model(args.model_fp)
    qm = _as_quantized(load_any_model(args.model_q))
    curve = analysis.per_timestep_mse(fp_model, qm, schedule, plan, cfg.mse_batch,
                                      root.substream(ANALYSIS_STREAM), mode=args.mode)
    csvio.write_curve_csv(os.path.join(out, "error_curve.csv"), curve)
    print(f"{args.mode}-loop curve over {len(curve)} steps; final mse = {curve.mse[-1]:.6g}")
    return 0


def cmd_profile_act(args) -> int:
    cfg, root, out = _setup(args)
    schedule, plan = _schedule_plan(cfg)
    model = load_any_model(args.model)
    profile = analysis.activation_profile(model, schedule, plan, cfg.profile_batch,
                                          root.substream(ANALYSIS_STREAM))
    csvio.write_profile_csv(os.path.join(out, "activation_profile.csv"), profile)
    print(f"profiled {len(profile.layers)} layers over {profile.steps.size} steps")
    return 0


def cmd_compare_calib(args) -> int:
    cfg, root, out = _setup(args)
    schedule, plan = _schedule_plan(cfg)
    fp_model = load_model(args.model)
    reference = _reference(cfg, root)
    results = analysis.compare_strategies(
        fp_model, schedule, plan, cfg.quant_config(), reference,
        root.substream(ANALYSIS_STREAM), c=cfg.calib_c, n=cfg.calib_n,
        opt=CalibOptConfig(iters=cfg.calib_iters), n_samples=cfg.sample_count)
    csvio.write_comparison_csv(os.path.join(out, "strategy_comparison.csv"), results)
    for r in results:
        print(f"{r.strategy}: energy_distance = {r.report.energy_distance:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg, root, out = _setup(args)
    samples = csvio.read_samples_csv(args.samples)
    reference = _reference(cfg, root)
    centers = gmm8_centers() if cfg.dataset == "gmm8" else None
    report = analysis.quality_report(samples, reference, centers)
    csvio.write_quality_csv(os.path.join(out, "quality.csv"), report)
    print(f"energy_distance = {report.energy_distance:.4f} over {report.n_samples} samples")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantdiff",
                                     description="toy diffusion model quantization workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("train", help="train the toy model; writes model.qdck + loss.csv")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("calibrate", help="quantize + calibrate; writes quantized.qdck")
    common(p)
    p.add_argument("--model", required=True, help="full-precision checkpoint")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("sample", help="generate samples; writes samples.csv")
    common(p)
    p.add_argument("--model", required=True, help="fp or quantized checkpoint")
    p.add_argument("--trajectory", action="store_true", help="dump all recorded states")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("profile-mse", help="fp-vs-quantized error curve; writes error_curve.csv")
    common(p)
    p.add_argument("--model-fp", required=True)
    p.add_argument("--model-q", required=True)
    p.add_argument("--mode", choices=("closed", "open"), default="closed")
    p.set_defaults(fn=cmd_profile_mse)

    p = sub.add_parser("profile-act", help="activation ranges; writes activation_profile.csv")
    common(p)
    p.add_argument("--model", required=True)
    p.set_defaults(fn=cmd_profile_act)

    p = sub.add_parser("compare-calib", help="strategy comparison; writes strategy_comparison.csv")
    common(p)
    p.add_argument("--model", required=True)
    p.set_defaults(fn=cmd_compare_calib)

    p = sub.add_parser("eval", help="sample quality report; writes quality.csv")
    common(p)
    p.add_argument("--samples", required=True, help="samples.csv from the sample command")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except QuantdiffError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: FileNotFound: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
