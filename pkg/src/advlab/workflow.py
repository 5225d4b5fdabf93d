"""Pipeline stages behind the command line: each reads a RunConfig and writes artifacts."""

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from advlab.attacks import AttackConfig, generate_attack_set, save_attack_set
from advlab.augment import gaussian_enhance
from advlab.core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from advlab.core.container import file_digest
from advlab.core.datasets import data_root, dataset_present, load_dataset
from advlab.core.errors import ConfigError, MissingPrerequisiteError
from advlab.core.rng import rng_stream
from advlab.fr_training import partition_spaces, train_fr
from advlab.id_training import build_adversarial_pool, train_id
from advlab.nets import Denoiser, Restorer, accuracy, build_target, target_from_spec, train_target
from advlab.pipeline import emit_report, evaluate

log = logging.getLogger(__name__)

_SPLITS = {}


def load_splits(cfg):
    name, data_dir = cfg["dataset.name"], cfg["dataset.data_dir"]
    if not dataset_present(name, data_dir):
        path = data_root(data_dir) / name
        raise MissingPrerequisiteError(f"dataset {name} not found at {path}; run `advlab fetch-data {name}`", path)
    key = (name, cfg["dataset.subset_fraction"], cfg["seed"], str(data_root(data_dir)))
    if key not in _SPLITS:
        _SPLITS.clear()
        _SPLITS[key] = load_dataset(name, cfg["dataset.subset_fraction"], cfg["seed"], data_dir)
    return _SPLITS[key]


def load_model(path, kind):
    """Rebuild a target, denoiser or restorer from its checkpoint."""
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(f"{kind} checkpoint {path} does not exist", path)
    ckpt = load_checkpoint(path)
    if ckpt.component_kind != kind:
        raise ConfigError(f"{path} holds a {ckpt.component_kind} checkpoint, expected {kind}",
                          {"target": "target.checkpoint", "denoiser": "id.checkpoint", "restorer": "fr.checkpoint"}[kind])
    spec = ckpt.config_snapshot["model"]
    if kind == "target":
        model = target_from_spec(spec)
    elif kind == "denoiser":
        model = Denoiser(spec["in_channels"], spec["width"])
    else:
        model = Restorer(spec["dim"], spec.get("skips", True))
    ckpt.load_into(model)
    model.eval()
    if kind == "target":
        model.freeze(True)
    return model


def _write_rows(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def record_manifest(cfg, stage, outputs, seconds):
    """Merge one stage's output digests and timing into ``out_dir/manifest.json``."""
    path = cfg.out_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest["config_digest"] = cfg.digest()
    manifest.setdefault("stages", {})[stage] = {
        "seconds": round(seconds, 3),
        "outputs": {str(Path(p).resolve().relative_to(cfg.out_dir.resolve()))
                    if Path(p).resolve().is_relative_to(cfg.out_dir.resolve()) else str(p): file_digest(p)
                    for p in outputs},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _roles(cfg, train):
    """Seeded split of the training set into denoiser and restorer sources."""
    n = len(train)
    perm = rng_stream(cfg["seed"], "roles:train").permutation(n)
    n_adv = min(cfg["id.n_adversarial"] or n, n)
    n_clean = min(cfg["id.n_clean"] or n_adv, n_adv)
    n_fr = min(cfg["fr.n_source"] or n_adv, n)
    rest = perm[n_adv:]
    fr = rest[:n_fr] if len(rest) >= n_fr else np.concatenate([rest, perm[:n_fr - len(rest)]])
    return np.sort(perm[:n_adv]), np.sort(perm[:n_clean]), np.sort(fr)


def _timed(fn):
    def wrapper(cfg, *a, **kw):
        t0 = time.perf_counter()
        result = fn(cfg, *a, **kw)
        record_manifest(cfg, result["stage"], result["outputs"], time.perf_counter() - t0)
        return result

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def stage_train_target(cfg, role="target"):
    """Train the target (or the black-box surrogate) classifier."""
    splits = load_splits(cfg)
    key = "target.checkpoint" if role == "target" else "target.surrogate.checkpoint"
    arch = cfg["target.arch"] if role == "target" else cfg["target.surrogate.arch"]
    tc = cfg.train_config(role)
    model = build_target(splits.train.descriptor, arch, seed=tc.seed)
    history = []
    model, metrics = train_target(model, splits.train, tc, eval_set=splits.validation,
                                  augment=cfg["target.augment"], history=history)
    metrics["test_accuracy"] = accuracy(model, splits.test)
    log.info("%s[%s] test accuracy %.4f", role, arch, metrics["test_accuracy"])
    out = cfg.resolve(key, f"{role}.advckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    snapshot = {"model": model.spec(), "train": tc.to_dict(), "role": role, "train_digest": splits.train.digest()}
    save_checkpoint(Checkpoint.from_module("target", model, snapshot, metrics), out)
    rows = _write_rows(cfg.out_dir / "metrics" / f"{role}.csv", history or [metrics])
    return {"stage": f"train-{role}", "outputs": [out, rows], "checkpoint": out, "metrics": metrics}


@_timed
def stage_train_id(cfg):
    """Train the input denoiser against the frozen target."""
    splits = load_splits(cfg)
    target = load_model(cfg.require("target.checkpoint"), "target")
    id_idx, clean_idx, _ = _roles(cfg, splits.train)
    attacks = cfg.id_attacks()
    validation = None
    n_val = min(cfg["id.n_validation"], len(splits.validation))
    if n_val:
        val = build_adversarial_pool(target, splits.validation.head(n_val), attacks, cfg["seed"])
        validation = (val.pixels, val.labels)
    tc = cfg.train_config("id")
    denoiser, state = train_id(target, splits.train.take(id_idx), attacks, cfg.augment_config(), tc,
                               clean_examples=splits.train.take(clean_idx), validation=validation,
                               width=cfg["id.width"])
    metrics = dict(state.epoch_rows[-1]) if state.epoch_rows else {}
    metrics.pop("epoch", None)
    metrics["epochs"] = state.epoch
    snapshot = {
        "model": denoiser.spec(),
        "train": tc.to_dict(),
        "attacks": cfg["id.attacks"],
        "augment": cfg.augment_config().to_dict(),
        "n_adversarial": len(id_idx),
        "n_clean": len(clean_idx),
        "target_digest": state.target_digest_before,
    }
    out = cfg.resolve("id.checkpoint", "id.advckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint.from_module("denoiser", denoiser, snapshot, metrics), out)
    rows = [dict(r, adversarial_drawn=a, clean_drawn=c) for r, (a, c) in zip(state.epoch_rows, state.source_counts)]
    outputs = [out]
    if rows:
        outputs.append(_write_rows(cfg.out_dir / "metrics" / "id.csv", rows))
    return {"stage": "train-id", "outputs": outputs, "checkpoint": out, "metrics": metrics, "state": state}


@_timed
def stage_train_fr(cfg):
    """Partition embeddings into p1/p2 and train the restorer on convex mixtures."""
    splits = load_splits(cfg)
    target = load_model(cfg.require("target.checkpoint"), "target")
    denoiser = load_model(cfg.require("id.checkpoint"), "denoiser")
    _, _, fr_idx = _roles(cfg, splits.train)
    src = splits.train.take(fr_idx)
    clean = gaussian_enhance(src, cfg.augment_config(), rng_stream(cfg["seed"], "augment:fr"))
    adv = build_adversarial_pool(target, src, cfg.id_attacks(), cfg["seed"])
    spaces = partition_spaces(target, denoiser, clean, adv)
    log.info("classified spaces: %s", spaces.summary())
    tc = cfg.train_config("fr")
    restorer, state = train_fr(target, spaces, tc)
    metrics = dict(state.epoch_rows[-1]) if state.epoch_rows else {}
    metrics.pop("epoch", None)
    metrics.update({"n_p1": spaces.n_p1, "n_p2": spaces.n_p2})
    snapshot = {"model": restorer.spec(), "train": tc.to_dict(), "spaces": spaces.summary(), "n_source": len(fr_idx)}
    out = cfg.resolve("fr.checkpoint", "fr.advckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint.from_module("restorer", restorer, snapshot, metrics), out)
    outputs = [out]
    if state.epoch_rows:
        outputs.append(_write_rows(cfg.out_dir / "metrics" / "fr.csv", state.epoch_rows))
    return {"stage": "train-fr", "outputs": outputs, "checkpoint": out, "metrics": metrics, "spaces": spaces}


def eval_examples(cfg, splits):
    test = splits.test
    n = min(cfg["eval.n_examples"], len(test))
    idx = np.sort(rng_stream(cfg["seed"], "eval:test").permutation(len(test))[:n])
    return test.take(idx)


def _load_eval_models(cfg, modes, boxes):
    target = load_model(cfg.require("target.checkpoint"), "target")
    denoiser = restorer = surrogate = None
    if "id_only" in modes or "id_fr" in modes:
        denoiser = load_model(cfg.require("id.checkpoint"), "denoiser")
    if "id_fr" in modes:
        restorer = load_model(cfg.require("fr.checkpoint"), "restorer")
    if "black" in boxes:
        surrogate = load_model(cfg.require("target.surrogate.checkpoint"), "target")
    return target, denoiser, restorer, surrogate


def _digests(cfg, keys):
    out = {}
    for key in keys:
        p = cfg.resolve(key)
        if p is not None and p.exists():
            out[key] = file_digest(p)
    return out


@_timed
def stage_eval(cfg, ablation=False):
    """Evaluate the attack grid across boxes and defense modes; emit the report."""
    modes = ("none", "id_only", "id_fr") if ablation else tuple(cfg["eval.modes"])
    boxes = tuple(cfg["eval.boxes"])
    # fail on missing configuration before any expensive loading
    target_path = cfg.require("target.checkpoint")
    target, denoiser, restorer, surrogate = _load_eval_models(cfg, modes, boxes)
    splits = load_splits(cfg)
    test = eval_examples(cfg, splits)
    meta = {
        "seed": cfg["seed"],
        "config_digest": cfg.digest(),
        "dataset": splits.test.descriptor.to_dict(),
        "subset_fraction": cfg["dataset.subset_fraction"],
        "checkpoints": _digests(cfg, ["target.checkpoint", "target.surrogate.checkpoint", "id.checkpoint",
                                      "fr.checkpoint"]),
        "target": str(target_path),
    }
    report = evaluate(target, denoiser, restorer, test, cfg.eval_grid(), modes=modes, boxes=boxes,
                      surrogate=surrogate, batch_size=cfg["eval.batch_size"], seed=cfg["seed"], metadata=meta)
    out_dir = cfg.out_dir / ("ablation" if ablation else cfg["eval.report_dir"])
    written = emit_report(report, out_dir)
    outputs = [written["csv"], written["md"], written["table"]]
    return {"stage": "ablate" if ablation else "eval", "outputs": outputs, "report": report, "written": written}


@_timed
def stage_attack(cfg, method, epsilon_255, split="test", n=None, model_key="target.checkpoint", out=None):
    """Generate and save one adversarial set from a dataset split."""
    model = load_model(cfg.require(model_key), "target")
    splits = load_splits(cfg)
    if split not in ("train", "validation", "test"):
        raise ConfigError(f"unknown split {split!r}", "attack.split")
    examples = getattr(splits, split)
    if split == "test":
        examples = eval_examples(cfg, splits)
    if n is not None:
        examples = examples.head(min(n, len(examples)))
    its = 1 if method == "fgsm" else cfg["attacks.iterations"]
    acfg = AttackConfig(method, float(epsilon_255), its, cfg["attacks.step_size"], cfg["attacks.confidence_margin"])
    aset = generate_attack_set(model, examples, acfg, batch_size=cfg["eval.batch_size"], seed=cfg["seed"])
    out = Path(out) if out else cfg.out_dir / "attacks" / f"{acfg.report_name}_{epsilon_255:g}_{split}.advset"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_attack_set(aset, out)
    acc = accuracy(model, aset)
    log.info("%s eps=%g/255 on %d %s examples: attacked accuracy %.4f", acfg.report_name, epsilon_255, len(aset),
             split, acc)
    return {"stage": f"attack:{acfg.report_name}:{epsilon_255:g}:{split}", "outputs": [out], "path": out,
            "accuracy": acc}


def run_all(cfg, stages=("target", "surrogate", "id", "fr", "eval")):
    """Full pipeline; each produced checkpoint is fed to the later stages."""
    results = {}
    if "target" in stages:
        results["target"] = stage_train_target(cfg, "target")
        cfg.set("target.checkpoint", str(Path(results["target"]["checkpoint"]).resolve()))
    if "surrogate" in stages and "black" in cfg["eval.boxes"]:
        results["surrogate"] = stage_train_target(cfg, "surrogate")
        cfg.set("target.surrogate.checkpoint", str(Path(results["surrogate"]["checkpoint"]).resolve()))
    if "id" in stages:
        results["id"] = stage_train_id(cfg)
        cfg.set("id.checkpoint", str(Path(results["id"]["checkpoint"]).resolve()))
    if "fr" in stages:
        results["fr"] = stage_train_fr(cfg)
        cfg.set("fr.checkpoint", str(Path(results["fr"]["checkpoint"]).resolve()))
    if "eval" in stages:
        results["eval"] = stage_eval(cfg)
    return results
