"""Parameter sweeps over enhancement x segmentation x attack, and their CSV/text reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, craft
from .enhance import EnhanceConfig
from .errors import ConfigError, DataError
from .evaluate import Pipeline, evaluate, rate_of_reduction, stack_samples

log = logging.getLogger(__name__)

NA = "NA"
REPORT_COLUMNS = ("model", "attack", "eps", "alpha", "iters", "threat_mode", "option", "blur", "radius",
                  "amount", "cutoff", "segmented", "n_total", "n_filtered", "diff_base", "diff_defended",
                  "rate_of_reduction_pct", "error")
HEATMAP_COLUMNS = ("radius", "amount", "rate_of_reduction_pct")


@dataclass(frozen=True)
class SweepGrid:
    enhance: tuple
    segmentation: tuple = (False, True)
    attacks: tuple = ()
    threat_modes: tuple = ("bpda_identity",)

    def cells(self):
        """(attack, segmented, enhance) in report order; threat mode is folded into the attack."""
        out = []
        for atk in self.attacks:
            for mode in self.threat_modes:
                a = AttackConfig(atk.kind, atk.epsilon, atk.step_size, atk.iterations, mode)
                for seg in self.segmentation:
                    for enh in self.enhance:
                        out.append((a, seg, enh))
        return out

    @classmethod
    def from_dict(cls, d):
        try:
            enh = tuple(EnhanceConfig.from_dict(e) for e in d["enhance"])
            atks = tuple(AttackConfig.from_dict(a) for a in d["attacks"])
        except KeyError as exc:
            raise ConfigError(f"grid file is missing {exc}") from None
        if not enh or not atks:
            raise ConfigError("grid needs at least one enhancement and one attack")
        return cls(enh, tuple(bool(s) for s in d.get("segmentation", (False, True))), atks,
                   tuple(d.get("threat_modes", ("bpda_identity",))))

    @classmethod
    def from_file(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read grid file {path}: {exc}") from exc


def standard_enhancements():
    """CLAHE; UM-Gaussian r in 5..7 x a in 2..4; UM median/max/min x a in 2..4; HFE D0 in 10..50."""
    out = [EnhanceConfig("clahe", grid_x=4, grid_y=4, clip=8)]
    out += [EnhanceConfig("um", blur="gaussian", radius=r, amount=a) for r in (5, 6, 7) for a in (2, 3, 4)]
    out += [EnhanceConfig("um", blur=b, radius=2, amount=a)
            for b in ("median", "maximum", "minimum") for a in (2, 3, 4)]
    out += [EnhanceConfig("hfe", cutoff=d) for d in (10, 20, 30, 40, 50)]
    return tuple(out)


def standard_attacks():
    return (AttackConfig("fgsm", epsilon=0.001), AttackConfig("pgd", epsilon=1 / 255, step_size=2 / 255, iterations=7))


def standard_grid(threat_modes=("bpda_identity", "transfer")):
    return SweepGrid(standard_enhancements(), (False, True), standard_attacks(), tuple(threat_modes))


# ---------------------------------------------------------------- report rows

@dataclass(frozen=True)
class ReportRow:
    model: str
    attack: str
    eps: float
    alpha: float | None
    iters: int | None
    threat_mode: str
    option: str
    blur: str | None
    radius: int | None
    amount: float | None
    cutoff: float | None
    segmented: bool
    n_total: int
    n_filtered: int
    diff_base: float | None
    diff_defended: float | None
    rate_of_reduction_pct: float | None
    error: str = ""

    @classmethod
    def for_cell(cls, model, attack, enh, segmented, base=None, defended=None, rate=None, error=""):
        um, pgd = enh.option == "um", attack.kind == "pgd"
        # normalise numeric types so rows survive a CSV round trip byte for byte
        return cls(model, attack.kind, float(attack.epsilon), float(attack.step_size) if pgd else None,
                   int(attack.iterations) if pgd else None, attack.threat_mode, enh.option,
                   enh.blur if um else None, int(enh.radius) if um else None, float(enh.amount) if um else None,
                   float(enh.cutoff) if enh.option == "hfe" else None, segmented,
                   defended.n_total if defended else (base.n_total if base else 0),
                   defended.n_filtered if defended else 0,
                   base.diff if base else None, defended.diff if defended else None,
                   None if rate is None else 100.0 * rate, error)


def _fmt(v):
    if v is None:
        return NA
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(ReportRow)}


def _parse(name, text):
    kind = _TYPES[name]
    if name == "error":
        return text
    if text == NA:
        return None
    if kind == "bool":
        return text == "1"
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def write_report_csv(path, rows):
    try:
        Path(path).write_text(rows_to_csv(rows), encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write report {path}: {exc}") from exc


def read_report_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != REPORT_COLUMNS:
            raise DataError(f"{path}: unexpected report columns {header}")
        return [ReportRow(**{c: _parse(c, v) for c, v in zip(REPORT_COLUMNS, line)}) for line in reader]


def technique_label(row):
    if row.option == "um":
        name = f"UM-{row.blur.capitalize()}"
        return f"{name} r={row.radius} a={row.amount:g}" if row.blur == "gaussian" else f"{name} a={row.amount:g}"
    if row.option == "hfe":
        return f"HFE D0={row.cutoff:g}"
    return {"clahe": "CLAHE", "crop_resize": "Crop&Resize", "none": "None"}.get(row.option, row.option)


def rows_to_text(rows):
    """Tables laid out as technique | without segmentation | with segmentation."""
    groups = {}
    for r in rows:
        key = (r.model, r.attack, r.eps, r.alpha, r.iters, r.threat_mode)
        groups.setdefault(key, {}).setdefault(technique_label(r), {})[r.segmented] = r
    out = []
    for (model, attack, eps, alpha, iters, mode), techs in groups.items():
        title = f"{model} / {attack} eps={eps:.6g}"
        if attack == "pgd":
            title += f" step={alpha:.6g} iters={iters}"
        out.append(f"Rate of reduction (%) - {title} - threat mode {mode}")
        width = max([len("Image enhancement technique")] + [len(t) for t in techs])
        out.append(f"{'Image enhancement technique':<{width}} | {'Without segmentation':>20} | {'With segmentation':>17}")
        out.append("-" * (width + 44))
        for tech, cells in techs.items():
            def cell(seg):
                r = cells.get(seg)
                if r is None:
                    return "-"
                if r.error:
                    return "error"
                return NA if r.rate_of_reduction_pct is None else f"{r.rate_of_reduction_pct:.2f}"
            out.append(f"{tech:<{width}} | {cell(False):>20} | {cell(True):>17}")
        out.append("")
    return "\n".join(out)


def emit_report(rows, path, format="csv"):
    if format == "csv":
        write_report_csv(path, rows)
    elif format == "text_table":
        try:
            Path(path).write_text(rows_to_text(rows), encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot write report {path}: {exc}") from exc
    else:
        raise ConfigError(f"format must be csv or text_table, got {format!r}")


def heatmaps(rows):
    """Gaussian-UM radius x amount grids keyed by (model, attack, eps, threat_mode, segmented)."""
    maps = {}
    for r in rows:
        if r.option == "um" and r.blur == "gaussian":
            key = (r.model, r.attack, r.eps, r.threat_mode, r.segmented)
            maps.setdefault(key, []).append((r.radius, r.amount, r.rate_of_reduction_pct))
    return maps


def write_heatmaps(out_dir, rows):
    paths = []
    for (model, attack, eps, mode, seg), cells in heatmaps(rows).items():
        name = f"heatmap_{model}_{attack}-e{eps:.6g}_{mode}_{'seg' if seg else 'noseg'}.csv"
        lines = [",".join(HEATMAP_COLUMNS)]
        lines += [f"{r},{a!r},{_fmt(v)}" for r, a, v in sorted(cells, key=lambda c: (c[0], c[1]))]
        p = Path(out_dir) / name
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths.append(p)
    return paths


def directional_summary(rows):
    """Share of with-segmentation UM/HFE cells whose rate of reduction is positive."""
    cells = [r for r in rows if r.segmented and r.option in ("um", "hfe") and not r.error]
    defined = [r for r in cells if r.rate_of_reduction_pct is not None]
    positive = [r for r in defined if r.rate_of_reduction_pct > 0]
    return {"cells": len(cells), "defined": len(defined), "positive": len(positive),
            "majority_positive": bool(defined) and 2 * len(positive) > len(defined)}


# ---------------------------------------------------------------- sweep

def sweep(base_models, defended_models, test_samples, grid, out_dir=None, workers=1, mode="interpreted"):
    """Evaluate every grid cell against every base model.

    ``base_models`` maps a model tag to an undefended model;
    ``defended_models`` maps ``(model_tag, pipeline_tag)`` to the model
    trained with that pipeline. Missing models and per-cell failures become
    rows with the ``error`` column set. Rows come back in grid order
    whatever ``workers`` is.
    """
    if not grid.enhance or not grid.attacks:
        raise ConfigError("sweep grid is empty")
    x, y, _ = stack_samples(test_samples)
    base_runs = {}
    for tag, base in base_models.items():
        for atk in grid.attacks:
            adv = craft(base, x, y, atk)
            _, report = evaluate(base, test_samples, atk, Pipeline(), model_tag=tag, mode=mode, adversarial=adv)
            base_runs[(tag, atk.tag)] = (report, adv)
            log.info("base %s %s: diff=%s n_filtered=%d", tag, atk.tag, report.diff, report.n_filtered)
            if not report.diff:
                log.warning("rate of reduction undefined for %s %s: attack ineffective on base model (diff=%s)",
                            tag, atk.tag, report.diff)

    jobs = [(tag, atk, seg, enh) for tag in base_models for atk, seg, enh in grid.cells()]

    def run(job):
        tag, atk, seg, enh = job
        base_report, base_adv = base_runs[(tag, atk.tag)]
        pipeline = Pipeline(segmentation=seg, enhance=enh)
        model = defended_models.get((tag, pipeline.tag))
        if model is None:
            return ReportRow.for_cell(tag, atk, enh, seg, base_report,
                                      error=f"no defended model for {tag} {pipeline.tag}")
        try:
            adv = base_adv if atk.threat_mode == "transfer" else None
            _, rep = evaluate(model, test_samples, atk, pipeline, base_model=base_models[tag],
                              model_tag=tag, mode=mode, adversarial=adv)
        except Exception as exc:  # one bad cell must not sink the sweep
            log.exception("cell %s %s %s failed", tag, atk.tag, pipeline.tag)
            return ReportRow.for_cell(tag, atk, enh, seg, base_report, error=f"{type(exc).__name__}: {exc}")
        rate = rate_of_reduction(base_report, rep) if base_report.diff else None
        return ReportRow.for_cell(tag, atk, enh, seg, base_report, rep, rate)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(j) for j in jobs]

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report_csv(out / "report.csv", rows)
        write_heatmaps(out, rows)
        summary = directional_summary(rows)
        text = rows_to_text(rows) + "\nDirectional check (informational): " + json.dumps(summary, sort_keys=True) + "\n"
        (out / "summary.txt").write_text(text, encoding="utf-8")
    return rows


def base_accuracy(model, samples):
    x, y, _ = stack_samples(samples)
    probs = model.class_probs(x)
    return float(np.mean((probs[:, 1] > probs[:, 0]).astype(int) == y))
