"""Command line front end: ``coopal <verb> [options]``.

Verbs ``render``, ``separate``, ``estimate``, ``design`` and ``evaluate`` run
one stage against ``--out``; ``run`` does all of them. ``render`` and ``run``
take the full configuration as flags; later stages read ``config.json``
from the run directory. ``scene`` writes the built-in scene as JSON for
editing, ``enhance`` filters a WAV with a stored statistics file.
"""

import argparse
import logging
import sys
from dataclasses import fields

import numpy as np

from .pipeline import STAGES, ExperimentConfig, StageError, run_experiment, run_stage, write_manifest

log = logging.getLogger("coopal")


def _csv(type_):
    return lambda s: tuple(type_(v) for v in s.split(",") if v)


def _add_config_flags(p):
    d = ExperimentConfig()
    special = {
        "methods": _csv(str), "array_configs": _csv(str), "gains": _csv(float),
    }
    for f in fields(ExperimentConfig):
        if f.name == "out_dir":
            continue
        flag = "--" + f.name.replace("_", "-")
        default = getattr(d, f.name)
        if f.name == "write_wavs":
            p.add_argument("--no-wavs", dest="write_wavs", action="store_false", help="skip WAV outputs")
        elif f.name in special:
            p.add_argument(flag, type=special[f.name], default=default, help="comma-separated")
        elif f.name == "scene":
            p.add_argument(flag, default=None, help="scene JSON (default: built-in desk scene)")
        else:
            p.add_argument(flag, type=type(default), default=default, help=f"default {default}")


def build_parser():
    parser = argparse.ArgumentParser(prog="coopal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("run", "render"):
        p = sub.add_parser(verb)
        p.add_argument("--out", required=True)
        _add_config_flags(p)
    for verb in STAGES[1:]:
        p = sub.add_parser(verb)
        p.add_argument("--out", required=True)
    p = sub.add_parser("scene", help="write the built-in scene as JSON")
    p.add_argument("path")
    p.add_argument("--n-sources", type=int, default=4)
    p.add_argument("--absorption", type=float, default=0.45)
    p = sub.add_parser("enhance", help="filter a listener WAV with stored statistics")
    p.add_argument("mixture")
    p.add_argument("stats")
    p.add_argument("output")
    p.add_argument("--gains", type=_csv(float), required=True)
    p.add_argument("--delay-ms", type=float, default=16.0)
    p.add_argument("--filter-ms", type=float, default=128.0)
    return parser


def _config_from(args):
    kw = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig) if f.name != "out_dir"}
    return ExperimentConfig(out_dir=args.out, **kw)


def _print_summary(summary, meta):
    for t in summary["table"]:
        imp = t["improvement"]
        print(f"{t['kind']:12s} {t['method']:9s} {t['array_config']:10s} "
              f"median {imp['median']:7.2f} dB  [{imp['q1']:.2f}, {imp['q3']:.2f}]")
    for k, v in meta.items():
        if isinstance(v, float):
            print(f"{k}: {v:.3f}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "scene":
            from .room import default_scene, save_scene

            save_scene(default_scene(args.n_sources, absorption=args.absorption), args.path)
        elif args.verb == "enhance":
            from .enhance import RemixSpec, enhance
            from .io import read_wav, write_wav
            from .signal import MultichannelSignal

            x = read_wav(args.mixture)
            fs = x.sample_rate
            order = int(round(args.filter_ms * fs / 1000)) - 1
            spec = RemixSpec(args.gains, int(round(args.delay_ms * fs / 1000)), order)
            y = enhance(x, args.stats, spec)
            write_wav(args.output, MultichannelSignal(y, fs))
        elif args.verb == "run":
            cfg = _config_from(args)
            report, summary = run_experiment(cfg)
            _print_summary(summary, report.meta)
        elif args.verb == "render":
            run_stage(_config_from(args), "render")
        else:
            cfg = ExperimentConfig.load(args.out)
            out = run_stage(cfg, args.verb)
            if args.verb == "evaluate":
                report, summary = out
                write_manifest(cfg, STAGES, report.meta)
                _print_summary(summary, report.meta)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
