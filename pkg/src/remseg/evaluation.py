"""Dataset-level evaluation: per-frame -> per-expression -> per-sample -> dataset averages."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .data import DatasetManifest, MaskSequence, ReferralSample, VideoClip, load_sample
from .errors import ParameterError
from .metrics import sequence_scores

log = logging.getLogger(__name__)

Predictor = Callable[[VideoClip, str], MaskSequence]


def mean(values) -> float:
    """Exactly rounded mean, so the result does not depend on enumeration order."""
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


def auto_expression(class_name: str) -> str:
    """Referral expression "the <class>" for category-only datasets."""
    words = str(class_name).lower().split()
    if words[:1] == ["the"]:
        words = words[1:]
    name = " ".join(words)
    if not name:
        raise ParameterError("class name must be non-empty")
    return "the " + name


@dataclass
class ExpressionRecord:
    expression: str
    J: float
    F: float
    J_frames: list[float] = field(default_factory=list)
    F_frames: list[float] = field(default_factory=list)


@dataclass
class SampleRecord:
    clip_id: str
    concept: Optional[str]
    J: float
    F: float
    expressions: list[ExpressionRecord] = field(default_factory=list)

    @property
    def JF(self) -> float:
        return (self.J + self.F) / 2.0

    @classmethod
    def from_expressions(cls, clip_id, concept, records: list[ExpressionRecord]) -> "SampleRecord":
        if not records:
            raise ParameterError(f"{clip_id}: no expression records")
        return cls(clip_id, concept, mean(r.J for r in records), mean(r.F for r in records), list(records))


def evaluate_sample(predict: Predictor, sample: ReferralSample, tol=None) -> SampleRecord:
    """Segment once per expression; the sample score is the mean over expressions."""
    records = []
    for expr in sample.expressions:
        pred = predict(sample.clip, expr)
        j, f = sequence_scores(pred.masks, sample.gt.masks, tol)
        records.append(ExpressionRecord(expr, mean(j), mean(f), j.tolist(), f.tolist()))
    return SampleRecord.from_expressions(sample.clip_id, sample.concept, records)


@dataclass
class EvalReport:
    dataset: str
    J: float
    F: float
    JF: float
    n_samples: int
    n_failed: int
    per_concept: list[dict]
    per_sample: list[SampleRecord]
    failures: list[dict] = field(default_factory=list)
    decoder: str = "vae"

    @classmethod
    def aggregate(cls, records: list[SampleRecord], dataset: str = "", failures=(), decoder: str = "vae") -> "EvalReport":
        records = sorted(records, key=lambda r: r.clip_id)
        j = mean(r.J for r in records)
        f = mean(r.F for r in records)
        concepts: dict[str, list[SampleRecord]] = {}
        for r in records:
            if r.concept is not None:
                concepts.setdefault(r.concept, []).append(r)
        per_concept = [
            {"concept": c, "J": mean(r.J for r in rs), "n": len(rs)} for c, rs in sorted(concepts.items())
        ]
        return cls(dataset, j, f, (j + f) / 2.0, len(records), len(failures), per_concept, records,
                   sorted(failures, key=lambda d: d["clip_id"]), decoder)

    def to_json(self) -> dict:
        d = asdict(self)
        for s, rec in zip(d["per_sample"], self.per_sample):
            s["JF"] = rec.JF
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        samples = [
            SampleRecord(s["clip_id"], s["concept"], s["J"], s["F"], [ExpressionRecord(**e) for e in s["expressions"]])
            for s in d["per_sample"]
        ]
        return cls(d["dataset"], d["J"], d["F"], d["JF"], d["n_samples"], d["n_failed"], d["per_concept"],
                   samples, d.get("failures", []), d.get("decoder", "vae"))

    def save(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
        jpath.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["clip_id", "concept", "J", "F", "JF", "n_expressions"])
            for r in self.per_sample:
                w.writerow([r.clip_id, r.concept or "", f"{r.J:.4f}", f"{r.F:.4f}", f"{r.JF:.4f}", len(r.expressions)])
        return jpath, cpath

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text()))

    def summary(self) -> str:
        return f"{self.dataset}: J={self.J:.4f} F={self.F:.4f} J&F={self.JF:.4f} (n={self.n_samples}, failed={self.n_failed})"


def evaluate_dataset(predict: Predictor, manifest: DatasetManifest, dataset: str = "", tol=None,
                     out_dir=None, decoder: Optional[str] = None) -> EvalReport:
    """Evaluate every sample of ``manifest``; failing samples are counted, not fatal."""
    records, failures = [], []
    for cid in manifest.ids():
        try:
            records.append(evaluate_sample(predict, load_sample(manifest, cid), tol))
        except Exception as exc:  # recorded per sample by contract
            log.warning("sample %s failed: %s", cid, exc)
            failures.append({"clip_id": cid, "error": f"{type(exc).__name__}: {exc}"})
    if decoder is None:
        decoder = getattr(predict, "decoder", "vae")
    report = EvalReport.aggregate(records, dataset, failures, decoder)
    if out_dir is not None:
        report.save(out_dir)
    return report
