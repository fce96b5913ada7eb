"""Command-line entry point: ``pwface <subcommand> ...``.

Exit codes: 0 success, 2 usage/config error, 3 data/model error, 4 numeric
failure. Errors are printed to stderr as one line of JSON naming the offending
flag when there is one.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import torch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("pwface")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE, flag: str | None = None):
        super().__init__(message)
        self.code = code
        self.flag = flag


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, EXIT_USAGE)


def _emit_error(err: CliError) -> None:
    payload = {"error": type(err.__cause__ or err).__name__, "message": str(err), "exit_code": err.code}
    if err.flag:
        payload["flag"] = err.flag
    print(json.dumps(payload), file=sys.stderr)


# ------------------------------------------------------------------- helpers


def _config(cls, args, base=None):
    from .config import ConfigFileError, load_config, parse_overrides

    try:
        overrides = parse_overrides(args.set or [])
    except ConfigFileError as exc:
        raise CliError(str(exc), EXIT_USAGE, "--set") from exc
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    try:
        return load_config(cls, args.config, overrides, base)
    except ConfigFileError as exc:
        raise CliError(str(exc), EXIT_USAGE, "--set" if args.set else "--config") from exc


def _write_effective(cfg, out_dir, name="config.json", extra: dict | None = None) -> None:
    from .config import dump_config

    dump_config(cfg, Path(out_dir) / name)
    if extra:
        (Path(out_dir) / "run.json").write_text(json.dumps(extra, indent=2, sort_keys=True) + "\n")


def _load_model(path, flag="--model"):
    from .checkpoint import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError(f"model file {path} not found", EXIT_DATA, flag) from exc
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_DATA, flag) from exc


def _load_recognizer(path, flag):
    from .checkpoint import CheckpointError, load_recognizer

    try:
        return load_recognizer(path)
    except FileNotFoundError as exc:
        raise CliError(f"recognizer file {path} not found", EXIT_DATA, flag) from exc
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_DATA, flag) from exc


def _password(text, n_bits, seed):
    from .passwords import PasswordError, parse_password_arg

    try:
        return parse_password_arg(text, n_bits, seed)
    except PasswordError as exc:
        raise CliError(str(exc), EXIT_USAGE, "--password") from exc


def _inputs(path, flag="--in"):
    from .data import list_images

    path = Path(path)
    if not path.exists():
        raise CliError(f"input {path} does not exist", EXIT_DATA, flag)
    files = list_images(path)
    if not files:
        raise CliError(f"no images under {path}", EXIT_DATA, flag)
    return files


# --------------------------------------------------------------- subcommands


def cmd_make_toy_data(args) -> int:
    from .data import make_toy_dataset

    splits = make_toy_dataset(args.out, args.identities, args.images, args.size, args.seed)
    print(json.dumps({k: len(v) for k, v in splits.items()}))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .checkpoint import save_recognizer
    from .data import ensure_splits, load_split
    from .recognizer import PretrainConfig, accuracy, recognizer_pretrain

    cfg = _config(PretrainConfig, args)
    ensure_splits(args.data)
    train = load_split(args.data, "train", args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_effective(cfg, out, extra={"seed": cfg.seed, "data": str(args.data), "size": args.size})
    result = {}
    for name, seed in (("recognizer", cfg.seed), ("verifier", cfg.seed + 1)):
        model = recognizer_pretrain(train, PretrainConfig(**{**asdict(cfg), "seed": seed}))
        save_recognizer(model, out / f"{name}.pwf", {"seed": seed, "identities": train.identities})
        result[name] = {"seed": seed, "train_accuracy": accuracy(model, train)}
    print(json.dumps(result))
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import ensure_splits, load_split
    from .trainer import TrainConfig, train

    cfg = _config(TrainConfig, args)
    recognizer = _load_recognizer(args.recognizer, "--recognizer")
    verifier = _load_recognizer(args.verifier, "--verifier") if args.verifier else None
    ensure_splits(args.data)
    data = load_split(args.data, "train", cfg.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_effective(cfg, out, extra={"seed": cfg.seed, "data": str(args.data), "resume": args.resume})
    bundle = train(data, cfg, recognizer, verifier, out, resume=args.resume)
    print(json.dumps({"steps": bundle.step, "checkpoint": str(out / "final.pwf")}))
    return EXIT_OK


def _cmd_transform(args) -> int:
    from .pipeline import transform_paths

    bundle = _load_model(args.model)
    p = _password(args.password, bundle.password_bits, args.seed)
    files = _inputs(args.input)
    written = transform_paths(bundle.inference_copy(), files, args.out, p)
    report = {"written": len(written), "out": str(args.out)}
    if args.password.strip().lower() == "random":
        # the sampled key exists nowhere else, so it is shown once and never stored
        report["password"] = p.to_hex()
    print(json.dumps(report))
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .baselines import apply_baseline
    from .data import read_image, write_image

    out = Path(args.out)
    for i, path in enumerate(_inputs(args.input)):
        img = read_image(path)
        write_image(apply_baseline(args.kind, img, seed=args.seed + i)[0], out / (path.stem + ".png"))
    print(json.dumps({"kind": args.kind, "out": str(out)}))
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    from .baselines import train_baseline_deanonymizer
    from .checkpoint import save_checkpoint
    from .data import ensure_splits, load_split
    from .trainer import TrainConfig

    cfg = _config(TrainConfig, args)
    ensure_splits(args.data)
    data = load_split(args.data, "train", cfg.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_effective(cfg, out, extra={"seed": cfg.seed, "kind": args.kind, "data": str(args.data)})
    bundle = train_baseline_deanonymizer(args.kind, data, cfg)
    path = out / f"baseline_{args.kind}.pwf"
    save_checkpoint(bundle, path)
    print(json.dumps({"kind": args.kind, "steps": bundle.step, "checkpoint": str(path)}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .baselines import apply_baseline, deanonymize_baseline
    from .data import ensure_splits, load_split
    from .metrics import evaluate_model, reconstruction_distances

    bundle = _load_model(args.model)
    verifier = _load_recognizer(args.verifier, "--verifier") if args.verifier else bundle.verifier
    if verifier is None:
        raise CliError("no verifier in the checkpoint; pass --verifier", EXIT_DATA, "--verifier")
    ensure_splits(args.data)
    test = load_split(args.data, args.split, bundle.image_size)
    report, _ = evaluate_model(bundle, verifier, test, args.seed, args.k)
    for path in args.baseline or []:
        b = _load_model(path, "--baseline")
        kind = b.meta.get("baseline")
        if kind is None:
            raise CliError(f"{path} is not a baseline deanonymizer", EXIT_DATA, "--baseline")
        rec = deanonymize_baseline(b, apply_baseline(kind, test.images, seed=args.seed))
        report.methods[f"baseline_{kind}"] = reconstruction_distances(rec, test.images, verifier)
    report.write(args.out)
    (Path(args.out) / "run.json").write_text(json.dumps({"seed": args.seed, "k": args.k, "split": args.split}) + "\n")
    print(report.to_json())
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .data import read_image
    from .metrics import MetricsError, password_sweep

    bundle = _load_model(args.model)
    verifier = _load_recognizer(args.verifier, "--verifier") if args.verifier else bundle.verifier
    image = read_image(_inputs(args.image, "--image")[0], bundle.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = password_sweep(bundle, image, verifier, args.tau, out / "sweep.png")
    except MetricsError as exc:
        raise CliError(str(exc), EXIT_USAGE, "--model") from exc
    summary = {"tiles": len(res.outputs), "pairwise": res.pairwise, "changed_fraction": res.changed_fraction}
    (out / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _add_config_flags(p):
    p.add_argument("--config", help="YAML or JSON file of key: value settings")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    from .baselines import KINDS

    parser = _Parser(prog="pwface", description="Password-conditioned face anonymization.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("make-toy-data", help="render a procedural identity-labelled face set")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--identities", type=int, default=30)
    p.add_argument("--images", type=int, default=12, help="images per identity")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("pretrain-classifier", help="train the face recognizer and a held-out verifier")
    p.add_argument("--data", required=True, help="dataset root (<root>/<identity>/<image>.png)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the identity transformer")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--recognizer", required=True, help="pretrained recognizer file")
    p.add_argument("--verifier", help="held-out verifier file stored with the model")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, help_text in (("anonymize", "anonymize faces with a password"), ("deanonymize", "apply a recovery password")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--model", required=True, help="trained checkpoint")
        p.add_argument("--in", dest="input", required=True, help="image file or directory")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--password", required=True, help="hex password, or 'random'")
        p.add_argument("--seed", type=int, help="seed for --password random")
        p.set_defaults(func=_cmd_transform)

    p = sub.add_parser("baseline", help="apply an image-processing anonymizer")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--in", dest="input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("train-baseline-deanon", help="train a deanonymizer for a baseline")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("evaluate", help="verification rates and reconstruction distances")
    p.add_argument("--model", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--verifier", help="verifier file (default: the one in the checkpoint)")
    p.add_argument("--baseline", action="append", metavar="CKPT", help="baseline deanonymizer to compare (repeatable)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--k", type=int, default=4, help="passwords per face for multimodality")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="render every password for one face (small N)")
    p.add_argument("--model", required=True, help="trained checkpoint")
    p.add_argument("--image", required=True, help="face image")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--verifier", help="verifier file (default: the one in the checkpoint)")
    p.add_argument("--tau", type=float, help="verification threshold for the changed fraction")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    from .config import ConfigFileError
    from .data import DataError
    from .networks import ConfigError
    from .passwords import PasswordError
    from .recognizer import PretrainError
    from .trainer import NumericError

    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        torch.set_num_threads(max(1, torch.get_num_threads()))
        return args.func(args)
    except CliError as err:
        _emit_error(err)
        return err.code
    except (DataError, FileNotFoundError, PretrainError) as exc:
        err = CliError(str(exc), EXIT_DATA)
        err.__cause__ = exc
    except NumericError as exc:
        err = CliError(str(exc), EXIT_NUMERIC)
        err.__cause__ = exc
    except PasswordError as exc:
        err = CliError(str(exc), EXIT_USAGE, "--password")
        err.__cause__ = exc
    except (ConfigError, ConfigFileError) as exc:
        err = CliError(str(exc), EXIT_USAGE)
        err.__cause__ = exc
    _emit_error(err)
    return err.code


if __name__ == "__main__":
    sys.exit(main())
