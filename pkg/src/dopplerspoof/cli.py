"""Command-line entry point: ``dopplerspoof <kind> [options]``."""
from __future__ import annotations

import argparse
import sys

from .errors import NumericalError, ValidationError
from .harness import KINDS, run_experiment, spec_from_mapping
from .iqfile import read_keyvalue

EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _snr_list(text: str) -> tuple:
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from None


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed {text} does not fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dopplerspoof", description="OFDM Doppler spoofing experiments")
    sub = p.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        s = sub.add_parser(kind)
        s.add_argument("--config", help="key = value file mirroring the experiment fields")
        s.add_argument("--seed", type=_u64)
        s.add_argument("--out", required=True, help="output CSV path")
        s.add_argument("--snr", type=_snr_list, help="comma-separated SNR grid in dB")
        s.add_argument("--doppler-real-hz", type=float, help="carrier Doppler of the real motion")
        s.add_argument("--doppler-spoof-hz", type=float, help="artificial Doppler added by the spoofer")
        s.add_argument("--trials", type=int)
        s.add_argument("--workers", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        values = {}
        if args.config:
            with open(args.config) as fh:
                values = read_keyvalue(fh.read())
        # Command-line speeds replace whatever form the file used.
        if args.doppler_real_hz is not None:
            values.pop("v_re", None)
        if args.doppler_spoof_hz is not None:
            values.pop("v_sp", None)
        spec = spec_from_mapping(
            values, kind=args.kind, seed=args.seed, out_path=args.out, snr_grid_db=args.snr,
            n_trials=args.trials, workers=args.workers,
            doppler_hz_real=args.doppler_real_hz, doppler_hz_spoof=args.doppler_spoof_hz)
        for path in run_experiment(spec):
            print(path)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
