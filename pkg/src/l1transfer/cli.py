"""Command-line harness: ``l1transfer <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 solver or rollout fault.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .lti import StateSpaceModel
from .plant import TRAJECTORY_NAMES

EXIT_OK, EXIT_CONFIG, EXIT_FAULT = 0, 2, 3


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=d, help="experiment config (JSON)")
    parser.add_argument("--out", type=Path, default=d if suppress else Path("results"),
                        help="output directory (default: results)")
    parser.add_argument("--seed", type=int, default=d, help="override the config seed")
    parser.add_argument("--quiet", action="store_true", default=d if suppress else False,
                        help="suppress the summary printout")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="l1transfer", description=__doc__.splitlines()[0])
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        _common(sp, suppress=True)
        return sp

    sp = add("learn", "run ILC on the source vehicle and store learned inputs")
    sp.add_argument("--trajectory", nargs="+", choices=TRAJECTORY_NAMES,
                    help="trajectories to learn (default: all configured)")

    sp = add("transfer", "transfer one learned trajectory to another on the target vehicle")
    sp.add_argument("--source", choices=TRAJECTORY_NAMES)
    sp.add_argument("--target", choices=TRAJECTORY_NAMES)
    sp.add_argument("--iterations", type=int, help="ILC iterations after transfer")

    add("matrix", "one-to-all transfer matrix over the configured trajectories")

    sp = add("repeat", "repeated noisy transfer-and-learn runs with distinct seeds")
    sp.add_argument("--repetitions", type=int)
    sp.add_argument("--source", choices=TRAJECTORY_NAMES)
    sp.add_argument("--target", choices=TRAJECTORY_NAMES)

    add("diff-ref", "transfer to a target whose L1 reference model differs")

    sp = add("relative-degree", "analytic and step-response relative degree of a model")
    sp.add_argument("--model", type=Path, help="model JSON (default: the source reference model)")
    sp.add_argument("--steps", type=int, default=50, help="step-experiment length in samples")
    sp.add_argument("--tol", type=float, default=1e-9)
    return p


def load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ex.ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _with_pair(cfg, source=None, target=None):
    t = cfg.transfer
    return cfg.with_(transfer=replace(t, source_trajectory=source or t.source_trajectory,
                                      target_trajectory=target or t.target_trajectory))


class _Out:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, *msg):
        if not self.quiet:
            print(*msg)


def cmd_learn(cfg, args, say) -> None:
    names = args.trajectory or list(cfg.trajectories)
    results = ex.learn_all(cfg, names)
    faults = []
    for name in names:
        res = results[name]
        ex.write_learned(args.out, cfg, name, res)
        if res.fault:
            faults.append(f"{name}: {res.fault} after {len(res.record)} iterations")
            continue
        e = res.record.errors
        say(f"learn {name}: e1={e[0]:.5f} m  e{len(e)}={e[-1]:.5f} m  "
            f"ratio={e[-1] / e[0]:.4f}")
    if faults:
        raise ex.ExperimentFault("; ".join(faults))


def cmd_transfer(cfg, args, say) -> None:
    cfg = _with_pair(cfg, args.source, args.target)
    s, t = cfg.transfer.source_trajectory, cfg.transfer.target_trajectory
    u = ex.load_learned(args.out, cfg, [s])[s]
    res = ex.transfer_pair(cfg, u, iterations=args.iterations)
    d = Path(args.out) / "transfer"
    ex.transfer_report(res).write(d / f"{s}__{t}.csv", cfg, [f"source: {s}", f"target: {t}"])
    doc = {"config": cfg.to_dict(), "source_trajectory": s, "map": res.tmap.to_dict()}
    (d / f"{s}.map.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    e = res.xfer.errors
    say(f"transfer {s} -> {t}: e1 xfer={e[0]:.5f} m  noxfer={res.noxfer.errors[0]:.5f} m  "
        f"reduction={res.reduction:.2f}%  worst/e1={e.max() / e[0]:.3f}")


def cmd_matrix(cfg, args, say) -> None:
    learned = ex.load_learned(args.out, cfg, list(cfg.trajectories))
    res = ex.matrix(cfg, learned)
    cells, grid, summary = ex.matrix_reports(res)
    d = Path(args.out) / "matrix"
    for rep, name in ((cells, "cells.csv"), (grid, "reduction_grid.csv"), (summary, "summary.csv")):
        rep.write(d / name, cfg)
    say(f"matrix: mean reduction {res.mean_reduction:.2f}% "
        f"(min diagonal {res.diagonal.min():.2f}%; hardware reference "
        f"{ex.HARDWARE_MATRIX_REDUCTION}%)")


def cmd_repeat(cfg, args, say) -> None:
    cfg = _with_pair(cfg, args.source, args.target)
    if args.repetitions is not None:
        cfg = cfg.with_(repeat=replace(cfg.repeat, repetitions=args.repetitions))
    s, t = cfg.transfer.source_trajectory, cfg.transfer.target_trajectory
    u = ex.load_learned(args.out, cfg, [s])[s]
    res = ex.repeat(cfg, u)
    ex.repeat_report(res).write(Path(args.out) / "repeat" / f"{s}__{t}.csv", cfg,
                                [f"source: {s}", f"target: {t}"])
    xm, xs, nm, ns = res.stats()
    say(f"repeat {s} -> {t} x{cfg.repeat.repetitions}: iteration-1 mean xfer={xm[0]:.5f} m "
        f"(std {xs[0]:.5f}), noxfer={nm[0]:.5f} m (std {ns[0]:.5f})")


def cmd_diff_ref(cfg, args, say) -> None:
    learned = ex.load_learned(args.out, cfg, [cfg.transfer.source_trajectory])
    res = ex.diff_ref(cfg, learned)
    cells, summary = ex.diff_ref_reports(res)
    d = Path(args.out) / "diff_ref"
    cells.write(d / "cells.csv", cfg)
    summary.write(d / "summary.csv", cfg)
    say(f"diff-ref: mean reduction with map {res.reduction_mapped.mean():.2f}%, "
        f"naive {res.reduction_naive.mean():.2f}% (hardware reference "
        f"{ex.HARDWARE_DIFF_REF_REDUCTION}%)")


def cmd_relative_degree(cfg, args, say) -> None:
    if args.model:
        try:
            model = StateSpaceModel.load(args.model)
        except FileNotFoundError:
            raise ex.ConfigError(f"model file not found: {args.model}") from None
        except (KeyError, ValueError) as exc:
            raise ex.ConfigError(f"invalid model file: {exc}") from None
        source = str(args.model)
    else:
        model, source = ex.reference_model(cfg.source.l1), "source reference model (zoh)"
    rep = ex.relative_degree_report(model, args.steps, args.tol)
    rep.write(Path(args.out) / "relative_degree.csv", cfg, [f"model: {source}"])
    say(f"relative degree of {source}: analytic {[row[1] for row in rep.rows]}, "
        f"steps {[row[2] for row in rep.rows]}")


COMMANDS = {"learn": cmd_learn, "transfer": cmd_transfer, "matrix": cmd_matrix,
            "repeat": cmd_repeat, "diff-ref": cmd_diff_ref,
            "relative-degree": cmd_relative_degree}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    say = _Out(args.quiet)
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg, args, say)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.ExperimentFault as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
