"""Quantitative evaluation of counterfactual records plus figure/study exports.

Covers answer-flip (semantic change) rates, the per-pixel-channel l1
minimality grid in the standard All/Color/Shape x Same/Different layout,
attention/object overlap against ground-truth masks, the background
preservation check, 4-panel figure export, and the rater study bundle.

The l1 convention here is the mean absolute per-pixel-channel difference, so
values are resolution-independent; the full-scale VQAv1 reference values are
rendered alongside for comparison only.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .generator import GeneratorNet, build_language_embedding, composite, generate
from .gradcam import grad_cam, overlay_attention, to_attention_map
from .synth_data import Sample
from .vqa_core import VqaNet, vqa_forward

BACKGROUND_TOL = 1e-6
MASS_EPS = 1e-8

# Reference values reported for the original full-scale VQAv1 experiments;
# rendered as a comparison column, never asserted at desk scale.
REFERENCE_FLIP_RATES = {"all": 0.3782, "color": 0.3805, "shape": 0.2545}
REFERENCE_L1_GRID = {
    "train": {
        "mu": {
            "all": 0.0175, "color": 0.0174, "shape": 0.0207,
            "same_all": 0.0177, "same_color": 0.0176, "same_shape": 0.0212,
            "diff_all": 0.0173, "diff_color": 0.0172, "diff_shape": 0.0195,
        },
        "sigma": {
            "all": 0.0039, "color": 0.0039, "shape": 0.0048,
            "same_all": 0.0040, "same_color": 0.0039, "same_shape": 0.0049,
            "diff_all": 0.0039, "diff_color": 0.0038, "diff_shape": 0.0046,
        },
    },
    "val": {
        "mu": {
            "all": 0.0175, "color": 0.0174, "shape": 0.0208,
            "same_all": 0.0177, "same_color": 0.0176, "same_shape": 0.0212,
            "diff_all": 0.0173, "diff_color": 0.0173, "diff_shape": 0.0198,
        },
        "sigma": {
            "all": 0.0041, "color": 0.0040, "shape": 0.0047,
            "same_all": 0.0041, "same_color": 0.0041, "same_shape": 0.0048,
            "diff_all": 0.0038, "diff_color": 0.0038, "diff_shape": 0.0042,
        },
    },
}

GRID_COLUMNS = (
    "all", "color", "shape",
    "same_all", "same_color", "same_shape",
    "diff_all", "diff_color", "diff_shape",
)


@dataclass
class CounterfactualRecord:
    sample_id: str
    split: str
    question_type: str
    question_text: str
    image: np.ndarray  # I, (h, w, 3)
    attention: np.ndarray  # M, (1, h, w)
    generated: np.ndarray  # raw generator output
    counterfactual: np.ndarray  # I' after compositing
    attention_counterfactual: np.ndarray  # M'
    answer: int
    answer_counterfactual: int
    answer_text: str
    answer_counterfactual_text: str
    target_mask: np.ndarray  # (h, w) bool
    l1: float = 0.0
    flipped: bool = False

    def __post_init__(self):
        self.l1 = float(np.abs(self.counterfactual - self.image).mean())
        self.flipped = self.answer_counterfactual != self.answer


def generate_records(
    samples: list[Sample], vqa: VqaNet, gen: GeneratorNet, split: str
) -> list[CounterfactualRecord]:
    """Run the full pipeline over samples and collect evaluation records."""
    records = []
    h, w = samples[0].image.shape[:2]
    m_slices = gen.config.resolved_m()
    vocab = vqa.answer_vocab
    for s in samples:
        out = vqa_forward(vqa, s.image, s.question)
        attention = to_attention_map(
            grad_cam(out.conv_activations, out.logit_gradient()), h, w
        )
        language = build_language_embedding(out.q_bar, out.a_bar, m=m_slices)
        raw = generate(s.image, attention, language, gen)
        counterfactual = np.clip(composite(raw, s.image, attention), 0.0, 1.0)
        out_cf = vqa_forward(vqa, counterfactual, s.question)
        attention_cf = to_attention_map(
            grad_cam(out_cf.conv_activations, out_cf.logit_gradient()), h, w
        )
        records.append(
            CounterfactualRecord(
                sample_id=s.sample_id,
                split=split,
                question_type=s.question_type,
                question_text=s.question_text,
                image=s.image,
                attention=attention,
                generated=raw,
                counterfactual=counterfactual.astype(np.float32),
                attention_counterfactual=attention_cf,
                answer=out.predicted,
                answer_counterfactual=out_cf.predicted,
                answer_text=vocab[out.predicted],
                answer_counterfactual_text=vocab[out_cf.predicted],
                target_mask=s.masks[s.target_object],
            )
        )
    return records


def semantic_change_rate(records: list[CounterfactualRecord]) -> dict[str, float]:
    """Fraction of records whose answer flipped, overall and per question type."""
    if not records:
        raise ValueError("semantic change rate is undefined on an empty record set")
    rates = {"all": float(np.mean([r.flipped for r in records]))}
    for qtype in sorted({r.question_type for r in records}):
        subset = [r.flipped for r in records if r.question_type == qtype]
        rates[qtype] = float(np.mean(subset))
    return rates


def _grid_subset(records: list[CounterfactualRecord], column: str) -> list[float]:
    def keep(r: CounterfactualRecord) -> bool:
        if column.startswith("same_"):
            if r.flipped:
                return False
            column_type = column[len("same_"):]
        elif column.startswith("diff_"):
            if not r.flipped:
                return False
            column_type = column[len("diff_"):]
        else:
            column_type = column
        return column_type == "all" or r.question_type == column_type

    return [r.l1 for r in records if keep(r)]


def l1_stats(records: list[CounterfactualRecord]) -> dict:
    """Population mean/std of l1 per grid cell, split by manifest label.

    Empty cells are emitted as None (absent), never as zero.
    """
    grid: dict = {}
    for split in sorted({r.split for r in records}):
        split_records = [r for r in records if r.split == split]
        mu, sigma, counts = {}, {}, {}
        for column in GRID_COLUMNS:
            values = _grid_subset(split_records, column)
            counts[column] = len(values)
            mu[column] = float(np.mean(values)) if values else None
            sigma[column] = float(np.std(values)) if values else None  # population std
        grid[split] = {"mu": mu, "sigma": sigma, "counts": counts}
    return grid


def attention_overlap(
    attention: np.ndarray, mask: np.ndarray, threshold: float | None = None
) -> dict:
    """Does the attention peak hit the mask, and how much mass lies inside it?

    With a threshold, only attention values >= threshold contribute mass.
    """
    m = np.asarray(attention, dtype=np.float64)
    if m.ndim == 3:
        m = m[0]
    if m.shape != mask.shape:
        raise ValueError(f"attention {m.shape} and mask {mask.shape} differ")
    if threshold is not None:
        m = np.where(m >= threshold, m, 0.0)
    total = float(m.sum())
    if total <= MASS_EPS:
        return {"hit": False, "mass_fraction": 0.0}
    peak = np.unravel_index(int(m.argmax()), m.shape)
    return {
        "hit": bool(mask[peak]),
        "mass_fraction": float(m[mask].sum() / total),
    }


def background_bound_holds(
    original: np.ndarray, counterfactual: np.ndarray, attention: np.ndarray,
    tol: float = BACKGROUND_TOL,
) -> bool:
    """|I' - I| <= M + tol elementwise, with M broadcast across channels."""
    m = np.asarray(attention)
    if m.ndim == 3:
        m = m[0]
    diff = np.abs(np.asarray(counterfactual) - np.asarray(original))
    return bool((diff <= m[..., None] + tol).all())


def validate_background(record: CounterfactualRecord) -> bool:
    return background_bound_holds(record.image, record.counterfactual, record.attention)


@dataclass
class MetricsReport:
    flip_rates: dict
    l1_grid: dict
    attention_stats: dict
    counts: dict
    observations: dict
    reference: dict = field(
        default_factory=lambda: {
            "flip_rates": REFERENCE_FLIP_RATES,
            "l1_grid": REFERENCE_L1_GRID,
            "note": "full-scale VQAv1 reference values, comparison only",
        }
    )
    l1_convention: str = "mean absolute per-pixel-channel difference in [0,1]"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_metrics_report(
    records: list[CounterfactualRecord], attention_threshold: float = 0.5
) -> MetricsReport:
    flip_rates = {"all_splits": semantic_change_rate(records)}
    for split in sorted({r.split for r in records}):
        flip_rates[split] = semantic_change_rate([r for r in records if r.split == split])

    grid = l1_stats(records)

    hits, masses, masses_thr = [], [], []
    for r in records:
        plain = attention_overlap(r.attention, r.target_mask)
        thr = attention_overlap(r.attention, r.target_mask, threshold=attention_threshold)
        hits.append(plain["hit"])
        masses.append(plain["mass_fraction"])
        masses_thr.append(thr["mass_fraction"])
    attention_stats = {
        "hit_rate": float(np.mean(hits)),
        "mean_mass_fraction": float(np.mean(masses)),
        "mean_mass_fraction_thresholded": float(np.mean(masses_thr)),
        "threshold": attention_threshold,
    }

    counts = {
        "total": len(records),
        "background_valid": int(sum(validate_background(r) for r in records)),
    }
    for split, cells in grid.items():
        counts[split] = cells["counts"]["all"]

    # signed difference mu(different answers) - mu(same answers); negative means
    # fewer changes when the prediction flipped
    observations = {}
    for split, cells in grid.items():
        mu = cells["mu"]
        if mu["diff_all"] is not None and mu["same_all"] is not None:
            observations[f"{split}_mu_diff_minus_same"] = mu["diff_all"] - mu["same_all"]

    return MetricsReport(
        flip_rates=flip_rates,
        l1_grid=grid,
        attention_stats=attention_stats,
        counts=counts,
        observations=observations,
    )


def _fmt(value: float | None) -> str:
    return "   --  " if value is None else f"{value:7.4f}"


def render_report_text(report: MetricsReport) -> str:
    """Human-readable table mirroring the reference grid layout."""
    header = (
        f"{'':14s} {'All':>7s} {'Color':>7s} {'Shape':>7s} "
        f"{'S-All':>7s} {'S-Col':>7s} {'S-Shp':>7s} "
        f"{'D-All':>7s} {'D-Col':>7s} {'D-Shp':>7s}"
    )
    lines = [
        "l1 minimality grid (mu / sigma per split; S = same answers, D = different answers)",
        f"convention: {report.l1_convention}",
        header,
    ]
    for split in sorted(report.l1_grid):
        for stat in ("mu", "sigma"):
            cells = report.l1_grid[split][stat]
            row = " ".join(_fmt(cells[c]) for c in GRID_COLUMNS)
            lines.append(f"{split:8s} {stat:5s} {row}")
    lines.append("")
    lines.append("full-scale VQAv1 reference (comparison only):")
    for split in ("train", "val"):
        for stat in ("mu", "sigma"):
            cells = report.reference["l1_grid"][split][stat]
            row = " ".join(_fmt(cells[c]) for c in GRID_COLUMNS)
            lines.append(f"{split:8s} {stat:5s} {row}")
    lines.append("")
    lines.append("flip rates (semantic change):")
    for scope, rates in report.flip_rates.items():
        pretty = ", ".join(f"{k}={v:.4f}" for k, v in rates.items())
        lines.append(f"  {scope}: {pretty}")
    ref = ", ".join(f"{k}={v:.4f}" for k, v in report.reference["flip_rates"].items())
    lines.append(f"  reference (full scale): {ref}")
    lines.append("")
    lines.append(
        "attention overlap: hit_rate={hit_rate:.4f} mass={mean_mass_fraction:.4f} "
        "mass@{threshold:.2f}={mean_mass_fraction_thresholded:.4f}".format(**report.attention_stats)
    )
    return "\n".join(lines)


def save_report(report: MetricsReport, out_dir: str | Path) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "metrics.json"
    text_path = out / "metrics.txt"
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    text_path.write_text(render_report_text(report) + "\n")
    return {"json": str(json_path), "text": str(text_path)}


# ---------------------------------------------------------------------------
# figure-style panel export


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_panel(record: CounterfactualRecord, margin: int = 2, opacity: float = 0.6) -> np.ndarray:
    """2x2 tile: original, attention overlay, counterfactual, its overlay."""
    tiles = [
        record.image,
        overlay_attention(record.image, record.attention, opacity),
        record.counterfactual,
        overlay_attention(record.counterfactual, record.attention_counterfactual, opacity),
    ]
    h, w = record.image.shape[:2]
    canvas = np.ones((2 * h + 3 * margin, 2 * w + 3 * margin, 3), dtype=np.float32)
    for k, tile in enumerate(tiles):
        row, col = divmod(k, 2)
        y = margin + row * (h + margin)
        x = margin + col * (w + margin)
        canvas[y : y + h, x : x + w] = tile
    return canvas


def export_panels(
    records: list[CounterfactualRecord], out_dir: str | Path,
    margin: int = 2, opacity: float = 0.6,
) -> list[dict]:
    """One 4-panel PNG plus a JSON caption sidecar per record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for record in records:
        panel_path = out / f"{record.sample_id}_panel.png"
        sidecar_path = out / f"{record.sample_id}_caption.json"
        Image.fromarray(_to_uint8(render_panel(record, margin, opacity)), mode="RGB").save(panel_path)
        sidecar = {
            "sample_id": record.sample_id,
            "question": record.question_text,
            "answer_original": record.answer_text,
            "answer_counterfactual": record.answer_counterfactual_text,
            "flipped": record.flipped,
            "l1": record.l1,
        }
        with open(sidecar_path, "w") as fh:
            json.dump(sidecar, fh, indent=2)
        manifest.append(
            {"sample_id": record.sample_id, "panel": str(panel_path), "sidecar": str(sidecar_path)}
        )
    return manifest


# ---------------------------------------------------------------------------
# human-study bundle export


def export_study_bundle(
    records: list[CounterfactualRecord], n: int, seed: int, out_dir: str | Path
) -> Path:
    """Sample n records and write the rater task bundle.

    Each task stores both images under randomized a/b labels; which label is
    the original is recorded only in the task's `hidden` block, which the
    study server must never send to raters before submission.
    """
    if n > len(records):
        raise ValueError(f"requested {n} tasks but only {len(records)} records exist")
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(records), size=n, replace=False)

    tasks = []
    for rank, idx in enumerate(chosen):
        record = records[int(idx)]
        task_id = f"task_{rank:04d}"
        original_is = "a" if rng.integers(0, 2) == 0 else "b"
        pair = {
            "a": (record.image, record.answer_text),
            "b": (record.counterfactual, record.answer_counterfactual_text),
        }
        if original_is == "b":
            pair = {"a": pair["b"], "b": pair["a"]}
        paths = {}
        for label, (image, _) in pair.items():
            path = img_dir / f"{task_id}_{label}.png"
            Image.fromarray(_to_uint8(image), mode="RGB").save(path)
            paths[label] = str(path.relative_to(out))
        tasks.append(
            {
                "task_id": task_id,
                "image_a_path": paths["a"],
                "image_b_path": paths["b"],
                "question_text": record.question_text,
                "answer_a": pair["a"][1],
                "answer_b": pair["b"][1],
                "hidden": {"original_is": original_is},
            }
        )

    bundle = {"bundle_id": f"study_{seed}_{n}", "tasks": tasks}
    bundle_path = out / "bundle.json"
    with open(bundle_path, "w") as fh:
        json.dump(bundle, fh, indent=2)
    return bundle_path
