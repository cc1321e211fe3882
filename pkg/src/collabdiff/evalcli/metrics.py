"""Condition-consistency metrics computed with the toy-face oracles."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ArgumentError
from ..toyface import extract_attributes, is_valid_layout, parse_mask


def _check_pair(samples: np.ndarray, targets: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim == 3:
        samples = samples[None]
    if len(samples) != len(targets):
        raise ArgumentError(f"{len(samples)} samples but {len(targets)} conditions")
    return samples


def metric_mask_accuracy(samples: np.ndarray, masks: np.ndarray) -> float:
    """Mean per-pixel agreement between ``parse_mask(sample)`` and the conditioned mask."""
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    samples = _check_pair(samples, masks)
    return float((parse_mask(samples) == masks).mean())


@dataclass
class AttributeScore:
    consistency: float | None
    per_attribute: dict = field(default_factory=dict)
    n_measured: int = 0
    n_unmeasurable: int = 0

    @property
    def degenerate(self) -> bool:
        return self.consistency is None


def metric_attribute_consistency(samples: np.ndarray, attributes: np.ndarray) -> AttributeScore:
    """``1 - mean |extracted - conditioned|`` per attribute, averaged over both attributes.

    Samples whose attribute regions cannot be located are excluded and counted.
    """
    attributes = np.atleast_2d(np.asarray(attributes, dtype=np.float64))
    samples = _check_pair(samples, attributes)
    masks = parse_mask(samples)
    errors = {"age": [], "beard": []}
    unmeasurable = 0
    for img, mask, target in zip(samples, masks, attributes):
        got = extract_attributes(img, mask)
        if not got.measurable:
            unmeasurable += 1
        if got.age is not None:
            errors["age"].append(abs(got.age - target[0]))
        if got.beard is not None:
            errors["beard"].append(abs(got.beard - target[1]))
    per = {k: 1.0 - float(np.mean(v)) for k, v in errors.items() if v}
    value = float(np.mean(list(per.values()))) if len(per) == 2 else None
    return AttributeScore(value, per, len(samples) - unmeasurable, unmeasurable)


def metric_diversity(samples: np.ndarray, groups: np.ndarray) -> float:
    """Mean pairwise L2 distance between samples that share a condition group."""
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    groups = np.asarray(groups)
    dists = []
    for g in np.unique(groups):
        members = samples[groups == g]
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                dists.append(np.linalg.norm(members[i] - members[j]))
    return float(np.mean(dists)) if dists else 0.0


def validity_rate(samples: np.ndarray) -> float:
    """Fraction of samples whose parsed mask is a plausible face layout."""
    masks = parse_mask(np.asarray(samples, dtype=np.float32))
    return float(np.mean([is_valid_layout(m) for m in masks]))


def derangement_shift(groups: np.ndarray) -> np.ndarray:
    """Index map pairing every sample with one from a different condition group."""
    groups = np.asarray(groups)
    order = np.argsort(groups, kind="stable")
    per_group = np.bincount(groups).max()
    return np.roll(order, per_group)[np.argsort(order)]


ROW_ORDER = ("mask_only", "attr_only", "uniform", "full", "no_spatial", "no_temporal")
ROW_FIELDS = ("mask_accuracy", "mask_accuracy_permuted", "attribute_consistency", "diversity", "validity",
              "n_samples", "n_unmeasurable")


@dataclass
class MetricsReport:
    """Per-row metrics plus run metadata; serializes to sorted ``key=value`` text."""

    rows: dict = field(default_factory=dict)    # row name -> {field: value}
    meta: dict = field(default_factory=dict)    # seeds, config hash, counts
    extras: dict = field(default_factory=dict)  # ablation deltas, trend, edit statistics

    def add_row(self, name: str, samples: np.ndarray, masks: np.ndarray, attributes: np.ndarray,
                groups: np.ndarray) -> dict:
        attr = metric_attribute_consistency(samples, attributes)
        row = {
            "mask_accuracy": metric_mask_accuracy(samples, masks),
            "mask_accuracy_permuted": metric_mask_accuracy(samples, masks[derangement_shift(groups)]),
            "attribute_consistency": attr.consistency,
            "diversity": metric_diversity(samples, groups),
            "validity": validity_rate(samples),
            "n_samples": len(samples),
            "n_unmeasurable": attr.n_unmeasurable,
        }
        self.rows[name] = row
        return row

    def combined(self, name: str) -> float | None:
        r = self.rows[name]
        if r["attribute_consistency"] is None:
            return None
        return 0.5 * (r["mask_accuracy"] + r["attribute_consistency"])

    def to_text(self) -> str:
        flat = {f"meta.{k}": v for k, v in self.meta.items()}
        flat.update({f"extra.{k}": v for k, v in self.extras.items()})
        for name, row in self.rows.items():
            flat.update({f"row.{name}.{k}": v for k, v in row.items()})
        return "".join(f"{k}={_fmt(flat[k])}\n" for k in sorted(flat))

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        report = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            value = _parse(raw)
            kind, _, rest = key.partition(".")
            if kind == "row":
                name, _, fld = rest.partition(".")
                report.rows.setdefault(name, {})[fld] = value
            elif kind == "meta":
                report.meta[rest] = value
            elif kind == "extra":
                report.extras[rest] = value
            else:
                raise ArgumentError(f"unexpected report key {key!r}")
        return report

    def table(self) -> str:
        """Aligned comparison table, one line per row."""
        headers = ("row",) + ROW_FIELDS[:5]
        names = [n for n in ROW_ORDER if n in self.rows] + sorted(set(self.rows) - set(ROW_ORDER))
        body = [[n] + [_fmt(self.rows[n].get(f)) for f in headers[1:]] for n in names]
        widths = [max(len(str(x)) for x in col) for col in zip(headers, *body)]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(headers, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in body]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def _parse(raw: str):
    if raw == "none":
        return None
    if raw in ("true", "false"):
        return raw == "true"
    for kind in (int, float):
        try:
            return kind(raw)
        except ValueError:
            pass
    return raw
