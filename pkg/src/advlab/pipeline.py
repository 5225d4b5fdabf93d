"""Defended inference, the evaluation grid and report emission."""

import csv
import datetime
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from advlab.attacks import AttackConfig, generate_attack_set
from advlab.core.errors import ConfigError
from advlab.nets import _batches

log = logging.getLogger(__name__)

MODES = ("none", "id_only", "id_fr")
BOXES = ("black", "white")
MODE_TITLES = {"none": "No Defense", "id_only": "ID", "id_fr": "ID+FR"}
CSV_FIELDS = ("attack", "epsilon_255", "box", "mode", "accuracy", "n_correct", "n_examples")


def check_mode(mode, denoiser=None, restorer=None):
    if mode not in MODES:
        raise ConfigError(f"unknown defense mode {mode!r}; expected one of {MODES}", "eval.modes")
    if mode in ("id_only", "id_fr") and denoiser is None:
        raise ConfigError(f"mode {mode} needs a trained denoiser", "id.checkpoint")
    if mode == "id_fr" and restorer is None:
        raise ConfigError("mode id_fr needs a trained restorer", "fr.checkpoint")


@torch.no_grad()
def defended_logits(mode, target, images, denoiser=None, restorer=None):
    """Logits of the target behind the chosen defense for one batch."""
    check_mode(mode, denoiser, restorer)
    if mode == "none":
        return target(images)
    h = target.embed(denoiser(images))
    if mode == "id_fr":
        h = restorer(h)
    return target.classify(h)


@torch.no_grad()
def defended_predict(mode, target, denoiser=None, restorer=None, images=None, batch_size=250):
    """Predicted labels under ``mode``:

    * ``none``    -- ``f_cls(f_enc(x))``
    * ``id_only`` -- ``f_cls(f_enc(D(x)))``
    * ``id_fr``   -- ``f_cls(R(f_enc(D(x))))``, the restorer applied to every input
    """
    check_mode(mode, denoiser, restorer)
    for m in (target, denoiser, restorer):
        if m is not None:
            m.eval()
    preds = [defended_logits(mode, target, xb, denoiser, restorer).argmax(1) for xb in _batches(images, batch_size)]
    return torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)


@torch.no_grad()
def _predict_modes(modes, target, denoiser, restorer, images, batch_size=250):
    """Predictions for several modes, sharing the denoiser pass between id modes."""
    out = {m: [] for m in modes}
    for xb in _batches(images, batch_size):
        if "none" in modes:
            out["none"].append(target(xb).argmax(1))
        if "id_only" in modes or "id_fr" in modes:
            h = target.embed(denoiser(xb))
            if "id_only" in modes:
                out["id_only"].append(target.classify(h).argmax(1))
            if "id_fr" in modes:
                out["id_fr"].append(target.classify(restorer(h)).argmax(1))
    return {m: torch.cat(v).numpy() for m, v in out.items()}


@dataclass(frozen=True)
class EvalRow:
    attack: str  # "clean" or an attack report name
    epsilon_255: float
    box: str  # "clean", "black" or "white"
    mode: str
    n_correct: int
    n_examples: int

    @property
    def accuracy(self):
        return self.n_correct / self.n_examples


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def get(self, attack, epsilon_255, box, mode):
        for r in self.rows:
            if (r.attack, float(r.epsilon_255), r.box, r.mode) == (attack, float(epsilon_255), box, mode):
                return r
        raise KeyError((attack, epsilon_255, box, mode))

    def averages(self):
        """Unweighted mean accuracy over attacked cells, per (box, mode)."""
        acc = {}
        for r in self.rows:
            if r.box != "clean":
                acc.setdefault((r.box, r.mode), []).append(r.accuracy)
        return {f"{box}/{mode}": float(np.mean(v)) for (box, mode), v in acc.items()}


def _row_key(order):
    attacks, boxes = order

    def key(r):
        return (attacks.index(r.attack), float(r.epsilon_255), boxes.index(r.box), MODES.index(r.mode))

    return key


def evaluate(target, denoiser, restorer, test_examples, attack_grid, modes=MODES, boxes=BOXES,
             surrogate=None, batch_size=250, seed=0, metadata=None):
    """Accuracy of every (attack, eps, box, mode) cell plus one clean row per mode.

    White-box AEs use the undefended target's gradients, black-box AEs the
    surrogate's; the defense is only applied at inference.
    """
    if not attack_grid:
        raise ConfigError("attack grid is empty", "eval.methods")
    modes = tuple(modes)
    for m in modes:
        check_mode(m, denoiser, restorer)
    for b in boxes:
        if b not in BOXES:
            raise ConfigError(f"unknown box {b!r}; expected one of {BOXES}", "eval.boxes")
    if "black" in boxes and surrogate is None:
        raise ConfigError("black-box evaluation needs a surrogate model", "target.surrogate.checkpoint")
    for m in (target, denoiser, restorer, surrogate):
        if m is not None:
            m.eval()

    labels = test_examples.labels
    n = len(labels)
    rows, p2_cells = [], []

    def add(attack, eps, box, preds):
        for mode in modes:
            rows.append(EvalRow(attack, float(eps), box, mode, int((preds[mode] == labels).sum()), n))
        if "id_only" in preds and "id_fr" in preds:
            # p2: inputs the denoiser alone leaves misclassified
            p2 = preds["id_only"] != labels
            p1 = ~p2
            p2_cells.append({
                "attack": attack, "epsilon_255": float(eps), "box": box,
                "n_p2": int(p2.sum()),
                "id_only_correct_p2": 0,
                "id_fr_correct_p2": int((preds["id_fr"][p2] == labels[p2]).sum()),
                "n_p1": int(p1.sum()),
                "id_fr_correct_p1": int((preds["id_fr"][p1] == labels[p1]).sum()),
            })

    add("clean", 0.0, "clean", _predict_modes(modes, target, denoiser, restorer, test_examples.pixels, batch_size))
    for box in boxes:
        attacker = target if box == "white" else surrogate
        for cfg in attack_grid:
            aset = generate_attack_set(attacker, test_examples, cfg, batch_size=batch_size, seed=seed)
            preds = _predict_modes(modes, target, denoiser, restorer, aset.pixels, batch_size)
            add(cfg.report_name, cfg.epsilon_255, box, preds)
            log.info("eval %s eps=%g %s: %s", cfg.report_name, cfg.epsilon_255, box,
                     " ".join(f"{m}={(preds[m] == labels).mean():.4f}" for m in modes))

    attacks = ["clean"] + list(dict.fromkeys(c.report_name for c in attack_grid))
    rows.sort(key=_row_key((attacks, ["clean", *BOXES])))
    meta = dict(metadata or {})
    meta.setdefault("n_examples", n)
    meta.setdefault("test_digest", test_examples.digest())
    meta["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    meta["aggregation"] = "unweighted mean over attacked cells per (box, mode)"
    if p2_cells:
        meta["p2_subset"] = p2_cells
    report = EvalReport(rows, meta)
    meta["averages"] = report.averages()
    return report


def run_ablation(target, denoiser, restorer, test_examples, attack_grid, surrogate=None, box="black", **kw):
    """Evaluate no-defense / ID / ID+FR on every attack cell."""
    boxes = (box,)
    return evaluate(target, denoiser, restorer, test_examples, attack_grid, modes=MODES, boxes=boxes,
                    surrogate=surrogate, **kw)


# -- emission ---------------------------------------------------------------------


def report_to_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in report.rows:
        writer.writerow([r.attack, repr(float(r.epsilon_255)), r.box, r.mode, repr(r.accuracy), r.n_correct, r.n_examples])
    return buf.getvalue()


def parse_report_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    rows = []
    for rec in reader:
        row = EvalRow(rec["attack"], float(rec["epsilon_255"]), rec["box"], rec["mode"],
                      int(rec["n_correct"]), int(rec["n_examples"]))
        if repr(row.accuracy) != rec["accuracy"]:
            raise ValueError(f"accuracy column {rec['accuracy']} disagrees with {row.n_correct}/{row.n_examples}")
        rows.append(row)
    return rows


def _fmt_eps(e):
    return f"{e:g}"


def report_to_markdown(report):
    lines = [
        "| attack | eps (0-255) | box | defense | accuracy | correct | n |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in report.rows:
        lines.append(f"| {r.attack} | {_fmt_eps(r.epsilon_255)} | {r.box} | {MODE_TITLES[r.mode]} "
                     f"| {100 * r.accuracy:.1f} | {r.n_correct} | {r.n_examples} |")
    return "\n".join(lines) + "\n"


def report_to_pivot_table(report):
    """Pivot: one line per (box, defense); clean column then ``a/b/c`` over eps per attack."""
    attacks = list(dict.fromkeys(r.attack for r in report.rows if r.attack != "clean"))
    boxes = list(dict.fromkeys(r.box for r in report.rows if r.box != "clean"))
    modes = list(dict.fromkeys(r.mode for r in report.rows))
    out = []
    for box in boxes:
        header = ["Defense", "Clean"]
        for a in attacks:
            eps = sorted({r.epsilon_255 for r in report.rows if r.attack == a and r.box == box})
            header.append(f"{a.upper()}(eps={'/'.join(_fmt_eps(e) for e in eps)})")
        out.append(f"### {box}-box\n")
        out.append("| " + " | ".join(header) + " |")
        out.append("|" + "---|" * len(header))
        for mode in modes:
            clean = [r for r in report.rows if r.box == "clean" and r.mode == mode]
            cells = [MODE_TITLES[mode], f"{100 * clean[0].accuracy:.1f}" if clean else "-"]
            for a in attacks:
                rs = sorted((r for r in report.rows if r.attack == a and r.box == box and r.mode == mode),
                            key=lambda r: r.epsilon_255)
                cells.append("/".join(f"{100 * r.accuracy:.1f}" for r in rs))
            out.append("| " + " | ".join(cells) + " |")
        out.append("")
    avgs = report.averages()
    if avgs:
        out.append("### Average accuracy over attacked cells (unweighted)\n")
        out.append("| box/defense | mean accuracy |")
        out.append("|---|---|")
        for k, v in sorted(avgs.items()):
            box, mode = k.split("/")
            out.append(f"| {box}/{MODE_TITLES[mode]} | {100 * v:.1f} |")
    return "\n".join(out) + "\n"


def plot_report(report, plot_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir = Path(plot_dir)
    plot_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    attacks = list(dict.fromkeys(r.attack for r in report.rows if r.attack != "clean"))
    for attack in attacks:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        series = {}
        for r in report.rows:
            if r.attack == attack:
                series.setdefault((r.box, r.mode), []).append((r.epsilon_255, r.accuracy))
        for (box, mode), pts in sorted(series.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{MODE_TITLES[mode]} ({box})",
                    linestyle="-" if box == "white" else "--")
        ax.set_xlabel("epsilon (0-255 scale)")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.set_title(attack)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = plot_dir / f"{attack}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def emit_report(report, out_dir, formats=("csv", "md", "plots")):
    """Write ``report.csv``, ``report.md`` (+ ``report_table.md``), ``report.json`` and ``plots/*.png``."""
    if not report.rows:
        raise ValueError("refusing to emit an empty report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    if "csv" in formats:
        written["csv"] = out_dir / "report.csv"
        written["csv"].write_text(report_to_csv(report))
    if "md" in formats:
        written["md"] = out_dir / "report.md"
        written["md"].write_text(report_to_markdown(report))
        written["table"] = out_dir / "report_table.md"
        written["table"].write_text(report_to_pivot_table(report))
    written["json"] = out_dir / "report.json"
    written["json"].write_text(json.dumps({"metadata": report.metadata}, indent=2, sort_keys=True, default=str))
    if "plots" in formats:
        written["plots"] = plot_report(report, out_dir / "plots")
    return written


def attack_grid(methods, epsilons_255, iterations=20, step_size=0.03, confidence_margin=0.0):
    grid = []
    for m in methods:
        for e in epsilons_255:
            its = 1 if m == "fgsm" else iterations
            grid.append(AttackConfig(m, float(e), its, step_size, confidence_margin))
    return grid
