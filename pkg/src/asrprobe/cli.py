"""Command-line entry point.

Exit codes: 0 success, 2 configuration problems, 3 missing upstream
artifact, 4 numeric failure during computation.
"""

import argparse
import sys

from . import audio, features, pipeline
from .errors import (AsrProbeError, ConfigError, MissingArtifactError,
                     NumericError)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _add_run_args(sub):
    sub.add_argument("--config", required=True, help="INI run configuration")
    sub.add_argument("--out", required=True, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asrprobe",
        description="Probe what a small CTC recognizer keeps of its input: "
                    "train it, decode speech back out of each hidden layer, "
                    "and measure speaker identity and intelligibility trends.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    for name, _ in pipeline.STAGES:
        sub = subs.add_parser(name, help=f"run the {name} stage")
        _add_run_args(sub)

    sub = subs.add_parser("report", help="aggregate metrics and layer trends")
    _add_run_args(sub)

    sub = subs.add_parser("run-all", help="run every stage and the report")
    _add_run_args(sub)
    sub.add_argument("--verify", action="store_true",
                     help="after running, check artifacts against hashes.json")

    sub = subs.add_parser("export-spectrogram",
                          help="render a WAV as a PGM log-mel spectrogram")
    sub.add_argument("wav")
    sub.add_argument("pgm")
    return parser


def _export_spectrogram(wav_path, pgm_path) -> None:
    w = audio.read_wav(wav_path)
    mel = features.logmel(w, features.make_mel(), features.StftConfig())
    features.export_pgm(mel, pgm_path)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export-spectrogram":
            _export_spectrogram(args.wav, args.pgm)
            return EXIT_OK

        cfg = pipeline.parse_config(args.config, args.out)
        stages = dict(pipeline.STAGES)
        with pipeline.run_lock(cfg.out_dir):
            if args.command == "run-all":
                pipeline.run_all(cfg)
                if args.verify:
                    bad = pipeline.verify_hashes(cfg)
                    if bad:
                        print("hash mismatches:", *bad, sep="\n  ",
                              file=sys.stderr)
                        return EXIT_NUMERIC
            elif args.command == "report":
                report = pipeline.layer_trend_report(cfg)
                for key, entry in report.items():
                    rho = entry["spearman"]
                    print(f"{key}: eer_trend={rho['eer']:+.3f} "
                          f"stoi_trend={rho['stoi']:+.3f} "
                          f"l1_trend={rho['l1']:+.3f}")
            else:
                stages[args.command](cfg)
        return EXIT_OK
    except MissingArtifactError as exc:
        print(f"asrprobe: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"asrprobe: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, AsrProbeError) as exc:
        print(f"asrprobe: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
