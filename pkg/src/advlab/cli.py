"""``advlab`` command line.

Exit codes: 0 ok, 1 failure (including failed property suites), 2 missing
prerequisite, 3 configuration error. Errors are printed to stderr as one
JSON line.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from advlab.core.errors import AdvlabError, ConfigError, MissingPrerequisiteError

EXIT_OK, EXIT_FAILURE, EXIT_MISSING, EXIT_CONFIG = 0, 1, 2, 3

# flag dest -> config key; path-valued flags are made absolute before use
FLAG_KEYS = {
    "out": "out_dir",
    "seed": "seed",
    "dataset": "dataset.name",
    "subset_fraction": "dataset.subset_fraction",
    "data_dir": "dataset.data_dir",
    "target": "target.checkpoint",
    "surrogate": "target.surrogate.checkpoint",
    "id": "id.checkpoint",
    "fr": "fr.checkpoint",
    "n_examples": "eval.n_examples",
}
PATH_FLAGS = {"out", "data_dir", "target", "surrogate", "id", "fr"}
EPOCH_KEYS = {"train-target": "target.epochs", "train-id": "id.epochs", "train-fr": "fr.epochs"}


def _common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. id.epochs=3 (repeatable)")
    p.add_argument("--out", help="output directory (out_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", help="mnist or cifar10")
    p.add_argument("--subset-fraction", type=float)
    p.add_argument("--data-dir")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="advlab", description="Input denoiser + feature restorer defense lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-target", help="train the target (or surrogate) classifier")
    _common(p)
    p.add_argument("--surrogate-role", action="store_true", help="train the black-box surrogate instead")
    p.add_argument("--epochs", type=int)
    p.add_argument("--target", help="output checkpoint path")
    p.add_argument("--surrogate", help="surrogate output checkpoint path")

    p = sub.add_parser("attack", help="generate an adversarial set")
    _common(p)
    p.add_argument("--target", help="model to attack (target checkpoint)")
    p.add_argument("--surrogate", help="attack this surrogate checkpoint instead")
    p.add_argument("--method", required=True, choices=["fgsm", "bim", "cw", "cw_linf"])
    p.add_argument("--eps", type=float, required=True, help="budget on the 0-255 scale")
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("-n", type=int, help="number of examples")
    p.add_argument("--output", help="output .advset path")

    p = sub.add_parser("train-id", help="train the input denoiser")
    _common(p)
    p.add_argument("--target")
    p.add_argument("--id", help="output checkpoint path")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-fr", help="train the feature restorer")
    _common(p)
    p.add_argument("--target")
    p.add_argument("--id")
    p.add_argument("--fr", help="output checkpoint path")
    p.add_argument("--epochs", type=int)

    for name, helptext in (("eval", "evaluate attacks x defenses and write the report"),
                           ("ablate", "no defense / ID / ID+FR comparison")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--target")
        p.add_argument("--surrogate")
        p.add_argument("--id")
        p.add_argument("--fr")
        p.add_argument("--n-examples", type=int)

    p = sub.add_parser("run", help="full pipeline: target, surrogate, ID, FR, eval")
    _common(p)

    p = sub.add_parser("verify", help="run the self-contained property suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget-tol", type=float, default=None, help="budget fuzz tolerance (default 1e-6)")
    p.add_argument("--hull-trials", type=int, default=None)
    p.add_argument("--fuzz-cases", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("fetch-data", help="download and unpack a dataset into the cache")
    p.add_argument("name", choices=["mnist", "cifar10"])
    p.add_argument("--data-dir")
    p.add_argument("--archive", help="use an already downloaded archive")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args):
    from advlab.runconfig import parse_override

    out = [parse_override(s) for s in args.set]
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest in PATH_FLAGS:
            value = str(Path(value).resolve())
        out.append((key, value))
    if getattr(args, "epochs", None) is not None:
        key = EPOCH_KEYS[args.command]
        if args.command == "train-target" and args.surrogate_role:
            key = "target.surrogate.epochs"
        out.append((key, args.epochs))
    return out


def _load_config(args):
    from advlab.runconfig import RunConfig

    return RunConfig.load(args.config, _overrides(args))


def cmd_verify(args):
    from advlab import verify

    kw = {"seed": args.seed}
    if args.budget_tol is not None:
        kw["budget_tol"] = args.budget_tol
    if args.hull_trials is not None:
        kw["hull_trials"] = args.hull_trials
    if args.fuzz_cases is not None:
        kw["fuzz_cases"] = args.fuzz_cases
    results = verify.run_all(**kw)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    for r in failed:
        print(verify.failure_line(r), file=sys.stderr)
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_fetch(args):
    from advlab.core.datasets import fetch_dataset

    dest = fetch_dataset(args.name, args.data_dir, args.archive)
    print(f"{args.name}: {dest}")
    return EXIT_OK


def cmd_pipeline(args):
    from advlab import workflow

    cfg = _load_config(args)
    c = args.command
    if c == "train-target":
        res = workflow.stage_train_target(cfg, "surrogate" if args.surrogate_role else "target")
        print(f"checkpoint {res['checkpoint']} test_accuracy {res['metrics']['test_accuracy']:.4f}")
    elif c == "attack":
        key = "target.surrogate.checkpoint" if args.surrogate else "target.checkpoint"
        res = workflow.stage_attack(cfg, args.method, args.eps, args.split, args.n, key, args.output)
        print(f"attack set {res['path']} accuracy {res['accuracy']:.4f}")
    elif c == "train-id":
        res = workflow.stage_train_id(cfg)
        print(f"checkpoint {res['checkpoint']} {json.dumps(res['metrics'], sort_keys=True)}")
    elif c == "train-fr":
        res = workflow.stage_train_fr(cfg)
        print(f"checkpoint {res['checkpoint']} {json.dumps(res['metrics'], sort_keys=True)}")
    elif c in ("eval", "ablate"):
        res = workflow.stage_eval(cfg, ablation=(c == "ablate"))
        print(f"report {res['written']['csv']}")
        print(Path(res["written"]["table"]).read_text())
    elif c == "run":
        res = workflow.run_all(cfg)
        print(f"report {res['eval']['written']['csv']}")
        print(Path(res["eval"]["written"]["table"]).read_text())
    return EXIT_OK


def _error(kind, message, **extra):
    print(json.dumps({"error": kind, "message": str(message), **extra}, sort_keys=True, default=str), file=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "fetch-data":
            return cmd_fetch(args)
        return cmd_pipeline(args)
    except ConfigError as exc:
        _error("config", exc, field=exc.field)
        return EXIT_CONFIG
    except MissingPrerequisiteError as exc:
        _error("missing_prerequisite", exc, path=exc.path)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        _error("missing_prerequisite", exc, path=exc.filename)
        return EXIT_MISSING
    except (AdvlabError, RuntimeError, ValueError, OSError) as exc:
        _error(type(exc).__name__, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
