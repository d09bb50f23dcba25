"""Command-line entry point.

Exit codes: 0 ok, 1 failed check, 2 config error, 3 numeric error, 4 data error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import hwcost
from .data import load_events, load_mnist, make_toy_dataset
from .device import (AlphaParams, MifParams, StepConfig, STANDARD_DRIVE, load_device_config,
                     rk4_reference, simulate_neuron)
from .errors import ConfigError, DataError, NonFiniteError, ShapeMismatch
from .network import build_model, count_spikes, model_forward, parse_arch
from .train import (TrainConfig, evaluate, export_weights, format_history, load_checkpoint,
                    loss_nll_membrane, model_from_checkpoint, save_checkpoint, train,
                    write_export_csv)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def parse_spikes(text: str) -> list[tuple[int, float]]:
    """'100:5e-6,400:2e-6' -> [(100, 5e-6), (400, 2e-6)]."""
    if not text:
        return []
    out = []
    for item in text.split(","):
        step, sep, weight = item.partition(":")
        if not sep:
            raise ConfigError(f"spike {item!r} is not step:weight")
        try:
            out.append((int(step), float(weight)))
        except ValueError as exc:
            raise ConfigError(f"bad spike {item!r}") from exc
    return out


def _device(args):
    if args.params:
        return load_device_config(args.params)
    return MifParams(), AlphaParams(), StepConfig()


def cmd_neuron_sim(args) -> int:
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    params, alpha, step = _device(args)
    cfg = StepConfig(dt=args.dt if args.dt is not None else step.dt,
                     integrator=args.integrator or step.integrator, substeps=args.substeps or step.substeps)
    spikes = parse_spikes(args.spikes) if args.spikes is not None else list(STANDARD_DRIVE)
    trace = simulate_neuron(params, alpha, spikes, args.steps, cfg)
    columns = {"t": trace.t * cfg.dt, "v": trace.v, "x1": trace.x1, "x2": trace.x2, "I": trace.i}
    if args.oracle == "rk4":
        ref = rk4_reference(params, alpha, spikes, args.steps, dt_inner=cfg.dt / args.rk4_divisions, dt=cfg.dt)
        columns.update(v_rk4=ref.v, x1_rk4=ref.x1, x2_rk4=ref.x2, I_rk4=ref.i)
    with open(args.out, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(columns)
        for row in zip(*columns.values()):
            out.writerow([repr(float(x)) for x in row])
    print(f"rows={args.steps} spikes={int(count_spikes(trace.v, params.v_th))} out={args.out}")
    if args.oracle == "rk4":
        print(f"max|Δv| = {np.max(np.abs(trace.v - ref.v)):.6g}")
        print(f"spikes_rk4={int(count_spikes(ref.v, params.v_th))}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    arch = parse_arch(args.arch)
    worst = 0.0
    failed = False
    for seed in range(args.seed, args.seed + args.seeds):
        model = build_model(arch, seed, input_gain=args.input_gain, attenuation=args.attenuation)
        rng = np.random.default_rng(seed)
        sample = rng.uniform(0, 1, size=(args.batch, arch[0]))
        labels = rng.integers(0, arch[-1], size=args.batch)

        def f(*weights):
            trace = model_forward(model, sample, args.steps, weights=weights)
            return loss_nll_membrane(trace.v_out, labels, args.beta)

        rep = ad.gradcheck(f, model.weights, eps=args.eps, tol=args.tol)
        worst = max(worst, rep.max_rel_err)
        failed |= not rep.passed
        print(f"seed={seed} max_rel_err={rep.max_rel_err:.3e} worst_leaf={rep.worst_leaf}")
    tol = np.format_float_scientific(args.tol, trim="-", exp_digits=1)
    print(f"max_rel_err={worst:.3e} tol={tol} {'FAIL' if failed else 'PASS'}")
    return EXIT_FAIL if failed else EXIT_OK


def _data_dir(args) -> Path:
    d = args.data_dir or os.environ.get("MSNN_DATA_DIR")
    if not d:
        raise ConfigError("--data-dir or MSNN_DATA_DIR is required")
    return Path(d)


def _load(args, split: str):
    """(inputs, labels, steps) for the requested dataset split."""
    if args.dataset == "toy":
        ds = make_toy_dataset(seed=args.seed)
        return ds.inputs, ds.labels, args.steps or 100
    if args.dataset == "dvs":
        ds = load_events(_data_dir(args) / split)
        return ds.inputs, ds.labels, ds.steps
    ds = load_mnist(_data_dir(args), split)
    limit = args.train_limit if split == "train" else args.test_limit
    if limit:
        ds = ds.subset(slice(0, limit))
    return ds.inputs, ds.labels, args.steps or 1000


def cmd_train(args) -> int:
    x, y, steps = _load(args, "train")
    if args.dataset == "dvs":
        steps = min(steps, args.steps or steps)
    n_classes = 11 if args.dataset == "dvs" else (2 if args.dataset == "toy" else 10)
    arch = [x.shape[-1], *args.hidden, n_classes]
    model = build_model(arch, args.seed, input_gain=args.input_gain, attenuation=args.attenuation,
                        spike_period=args.spike_period, events=args.dataset == "dvs")
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch or (16 if args.dataset == "dvs" else 128),
                      lr=args.lr, steps=steps, seed=args.seed, softmax_beta=args.beta,
                      patience=args.patience, eval_fraction=0.0 if args.dataset == "toy" else args.eval_fraction,
                      eval_steps=args.eval_steps, workers=args.workers)
    print("epoch,train_loss,val_acc", flush=True)
    result = train(model, x, y, cfg, on_epoch=lambda h: print(f"{h.epoch},{h.train_loss:.6g},{h.val_acc:.6f}",
                                                              flush=True))
    ckpt_dir = Path(args.ckpt)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / "best.msnn"
    save_checkpoint(path, result.checkpoint)
    (ckpt_dir / "history.csv").write_text(format_history(result.history) + "\n")
    print(f"best_epoch={result.best_epoch} checkpoint={path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    if args.dataset == "toy":
        args.seed = ckpt.config.get("train", {}).get("seed", 0) if args.seed is None else args.seed
    x, y, steps = _load(args, args.split)
    width = int(np.prod(x.shape[2:] if x.ndim == 3 else x.shape[1:]))
    if width != model.arch[0]:
        raise ShapeMismatch(f"checkpoint expects {model.arch[0]} inputs, {args.dataset} data has {width}")
    trained = ckpt.config.get("train", {})
    if args.steps is None and trained:
        # default to the step count used for validation during training
        want = trained["eval_steps"] or trained["steps"]
        steps = min(steps, want) if args.dataset == "dvs" else want
    elif args.dataset == "dvs" and args.steps:
        steps = min(steps, args.steps)
    res = evaluate(model, x, y, steps, readout=args.readout)
    print(f"accuracy={res.accuracy:.6f}")
    print(f"activity={res.activity:.6f}")
    print(f"spikes_per_neuron={res.spikes_per_neuron:.6f}")
    if args.confusion:
        np.savetxt(args.confusion, res.confusion, fmt="%d", delimiter=",")
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    rows, max_err = export_weights(ckpt.weights, args.r_on, args.r_off, args.g_scale)
    write_export_csv(args.out, rows)
    print(f"weights={len(rows)} max_reconstruction_error={max_err:.6g} out={args.out}")
    return EXIT_OK


def cmd_hwcost(args) -> int:
    cfg = hwcost.HwConfig(layers=tuple(parse_arch(args.arch)), activity=args.activity, steps=args.steps)
    rep = hwcost.report(cfg)
    print(hwcost.format_table(rep))
    if args.csv:
        Path(args.csv).write_text(hwcost.format_csv(rep))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memsnn", description="Memristive SNN simulator and trainer")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("neuron-sim", help="simulate one MIF neuron under alpha drive")
    p.add_argument("--params", help="TOML device config")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--dt", type=float)
    p.add_argument("--integrator", choices=["expeuler", "euler"])
    p.add_argument("--substeps", type=int)
    p.add_argument("--oracle", choices=["rk4", "none"], default="none")
    p.add_argument("--rk4-divisions", type=int, default=10)
    p.add_argument("--spikes", help="step:weight,... (default: the standard single impulse)")
    p.add_argument("--out", default="trace.csv")
    p.set_defaults(func=cmd_neuron_sim)

    p = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    p.add_argument("--arch", default="8-4-3")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--beta", type=float, default=100.0)
    p.add_argument("--input-gain", type=float, default=3e-5)
    p.add_argument("--attenuation", type=float, default=3e-5)
    p.set_defaults(func=cmd_gradcheck)

    def data_args(p):
        p.add_argument("--dataset", choices=["mnist", "fmnist", "dvs", "toy"], default="mnist")
        p.add_argument("--data-dir")
        p.add_argument("--steps", type=int)
        p.add_argument("--train-limit", type=int)
        p.add_argument("--test-limit", type=int)

    p = sub.add_parser("train", help="train crossbar weights with BPTT")
    data_args(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--hidden", type=int, nargs="+", default=[100])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=100.0)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--eval-fraction", type=float, default=0.1)
    p.add_argument("--eval-steps", type=int, help="validation steps, e.g. 360 for event data")
    p.add_argument("--input-gain", type=float, default=3e-5)
    p.add_argument("--attenuation", type=float, default=3e-5)
    p.add_argument("--spike-period", type=int, default=100)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--ckpt", default="out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    data_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--seed", type=int)
    p.add_argument("--readout", choices=["membrane", "spikes"], default="membrane")
    p.add_argument("--confusion", help="write the confusion matrix CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-weights", help="map weights to differential conductance pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="conductances.csv")
    p.add_argument("--r-on", type=float, default=1e3)
    p.add_argument("--r-off", type=float, default=1e5)
    p.add_argument("--g-scale", type=float)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("hwcost", help="area/power/latency vs an ADC-based design")
    p.add_argument("--arch", default="784,100,10")
    p.add_argument("--activity", type=float, default=0.02)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_hwcost)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
