"""
Dataset curation rules

Records are filtered on human-box count, largest-box area ratio, aesthetic
score and resolution, in that order; the first failed rule names the
rejection. Records whose canvas was outpainted carry their boxes and
annotations in outpainted coordinates and are cropped back to the original
canvas before filtering.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, Iterator, List, Optional, TextIO, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from structdiff.config import CurationConfig
from structdiff.utils.errors import SchemaError

logger = logging.getLogger(__name__)

REJECT_REASONS = ("bbox_count", "area_ratio", "aesthetics", "resolution")
SCHEMA_REASON = "schema"
CHUNK_SIZE = 256


class BBox(BaseModel):
    model_config = ConfigDict(extra="ignore")

    x: float
    y: float
    w: float = Field(ge=0.0)
    h: float = Field(ge=0.0)
    confidence: float = Field(default=1.0, ge=0.0, le=1.0)

    @property
    def area(self) -> float:
        return self.w * self.h


class Annotation(BaseModel):
    model_config = ConfigDict(extra="allow")

    label: str
    x: float
    y: float
    w: float = Field(ge=0.0)
    h: float = Field(ge=0.0)


class CurationRecord(BaseModel):
    """One metadata row; width/height are the original canvas size."""

    model_config = ConfigDict(extra="ignore")

    image_id: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    human_bboxes: List[BBox]
    aesthetic_score: float = Field(ge=0.0)
    annotations: List[Annotation] = Field(default_factory=list)
    outpaint_margin: int = Field(default=0, ge=0, description="Outpainted pixels per side")


class FilterDecision(BaseModel):
    keep: bool
    reason: Optional[str] = None


def parse_record(data: Dict) -> CurationRecord:
    try:
        return CurationRecord.model_validate(data)
    except ValidationError as e:
        fields = sorted({".".join(str(p) for p in err["loc"]) for err in e.errors()})
        raise SchemaError(f"invalid curation record: {', '.join(fields)}", {"fields": fields}) from e


def filter_record(r: CurationRecord, rules: Optional[CurationConfig] = None) -> FilterDecision:
    rules = rules or CurationConfig()
    if not (rules.min_bboxes <= len(r.human_bboxes) <= rules.max_bboxes):
        return FilterDecision(keep=False, reason="bbox_count")
    largest = max(b.area for b in r.human_bboxes) if r.human_bboxes else 0.0
    if largest / float(r.width * r.height) <= rules.min_area_ratio:
        return FilterDecision(keep=False, reason="area_ratio")
    if r.aesthetic_score < rules.min_aesthetic:
        return FilterDecision(keep=False, reason="aesthetics")
    if min(r.width, r.height) < rules.min_side:
        return FilterDecision(keep=False, reason="resolution")
    return FilterDecision(keep=True)


def _clip_region(x: float, y: float, w: float, h: float, margin: int, width: int, height: int) -> Optional[Tuple[float, float, float, float]]:
    x0, y0 = max(x - margin, 0.0), max(y - margin, 0.0)
    x1, y1 = min(x - margin + w, float(width)), min(y - margin + h, float(height))
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def crop_annotations_to_original(r: CurationRecord) -> CurationRecord:
    """Keep only labels inside the original canvas; margin is reset to 0."""
    m = r.outpaint_margin
    if m == 0:
        return r
    bboxes = []
    for b in r.human_bboxes:
        clipped = _clip_region(b.x, b.y, b.w, b.h, m, r.width, r.height)
        if clipped is not None:
            x, y, w, h = clipped
            bboxes.append(b.model_copy(update={"x": x, "y": y, "w": w, "h": h}))
    annotations = []
    for a in r.annotations:
        clipped = _clip_region(a.x, a.y, a.w, a.h, m, r.width, r.height)
        if clipped is not None:
            x, y, w, h = clipped
            annotations.append(a.model_copy(update={"x": x, "y": y, "w": w, "h": h}))
    return r.model_copy(update={"human_bboxes": bboxes, "annotations": annotations, "outpaint_margin": 0})


def rules_header(rules: CurationConfig) -> Dict:
    return {
        "order": list(REJECT_REASONS),
        "bbox_count": f"{rules.min_bboxes} <= number of human boxes <= {rules.max_bboxes}",
        "area_ratio": f"largest box area / canvas area > {rules.min_area_ratio} (largest single box, not the union)",
        "aesthetics": f"aesthetic_score >= {rules.min_aesthetic}",
        "resolution": f"min(width, height) >= {rules.min_side}",
        "cropping": "boxes and annotations translated by -outpaint_margin and clipped to the original canvas",
    }


def process_line(line: str, rules: CurationConfig) -> Tuple[Optional[Dict], str]:
    """
    Returns (output row or None, outcome) where outcome is "keep" or a reason.

    Lines read with errors="surrogateescape" carry undecodable bytes as lone
    surrogates; such lines fail as schema errors.
    """
    try:
        line.encode("utf-8")
        data = json.loads(line)
        if not isinstance(data, dict):
            raise SchemaError("record is not a JSON object")
        record = crop_annotations_to_original(parse_record(data))
    except (UnicodeEncodeError, json.JSONDecodeError, SchemaError) as e:
        logger.warning(f"Skipping record with schema error: {e}")
        return None, SCHEMA_REASON
    decision = filter_record(record, rules)
    if not decision.keep:
        return None, decision.reason
    row = dict(data)
    row.update(record.model_dump(mode="json"))
    return row, "keep"


def _chunks(lines: Iterable[str]) -> Iterator[List[str]]:
    chunk = []
    for line in lines:
        if not line.strip():
            continue
        chunk.append(line)
        if len(chunk) >= CHUNK_SIZE:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def run_pipeline(in_stream: Iterable[str], out_stream: TextIO, rules: Optional[CurationConfig] = None, workers: int = 0) -> Dict:
    """
    Filter a JSONL stream into out_stream, preserving input order.

    Schema errors are counted under "schema" and never stop the stream.
    """
    rules = rules or CurationConfig()
    stats = {
        "header": rules_header(rules),
        "total": 0,
        "kept": 0,
        "rejected": {reason: 0 for reason in REJECT_REASONS + (SCHEMA_REASON,)},
    }
    pool = ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None
    try:
        for chunk in _chunks(in_stream):
            if pool is not None:
                results = list(pool.map(lambda line: process_line(line, rules), chunk))
            else:
                results = [process_line(line, rules) for line in chunk]
            for row, outcome in results:
                stats["total"] += 1
                if outcome == "keep":
                    stats["kept"] += 1
                    out_stream.write(json.dumps(row, sort_keys=True) + "\n")
                else:
                    stats["rejected"][outcome] += 1
    finally:
        if pool is not None:
            pool.shutdown()
    logger.info(f"Curation kept {stats['kept']} of {stats['total']} records")
    return stats
