"""Pathology-report surrogates and their standardization into six fields.

A report is standardized by asking six fixed diagnostic questions; the
answer is one semicolon-joined line with one segment per question,
``Unknown`` standing in for anything the report does not state. Parsing
classifies each segment with ordered keyword rules (longest/most specific
match first) and keeps the free-text remainder as a rationale.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol

from .errors import MalformedAnswerError, UnsupportedReportError, ValidationError
from .rng import rng_for

UNKNOWN = "Unknown"


class Differentiation(str, Enum):
    WELL = "Well"
    MODERATE = "Moderate"
    POOR = "Poor"
    MODERATE_TO_POOR = "ModerateToPoor"
    MIXED = "Mixed"
    UNKNOWN = UNKNOWN


class Presence(str, Enum):
    PRESENT = "Present"
    ABSENT = "Absent"
    UNKNOWN = UNKNOWN


class Margins(str, Enum):
    CLEAR = "Clear"
    INVOLVED = "Involved"
    UNKNOWN = UNKNOWN


FIELD_NAMES = (
    "differentiation",
    "air_space_spread",
    "vascular_invasion",
    "pleural_invasion",
    "adjacent_invasion",
    "margins",
)

FIELD_ENUMS = (Differentiation, Presence, Presence, Presence, Presence, Margins)
N_FIELDS = 6


class ReportStyle(str, Enum):
    CHECKLIST = "checklist"
    NARRATIVE = "narrative"
    TISSUE_DESCRIPTION = "tissue_description"


@dataclass(frozen=True)
class FieldAnswer:
    """One diagnostic verdict plus an optional free-text rationale."""

    verdict: str
    rationale: str | None = None

    def __post_init__(self):
        if self.verdict == UNKNOWN and self.rationale is not None:
            raise ValidationError("Unknown verdicts carry no rationale")
        if self.rationale is not None and ";" in self.rationale:
            raise ValidationError("rationale must not contain semicolons")


@dataclass(frozen=True)
class FineGrainedDescription:
    """The six standardized fields, in fixed canonical order."""

    fields: tuple[FieldAnswer, ...]
    warnings: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.fields) != N_FIELDS:
            raise ValidationError(f"expected {N_FIELDS} fields, got {len(self.fields)}")
        for i, (answer, enum_cls) in enumerate(zip(self.fields, FIELD_ENUMS)):
            allowed = {v.value for v in enum_cls}
            if answer.verdict not in allowed:
                raise ValidationError(
                    f"field {FIELD_NAMES[i]}: verdict {answer.verdict!r} not in {sorted(allowed)}"
                )

    def verdicts(self) -> tuple[str, ...]:
        return tuple(a.verdict for a in self.fields)

    def to_record(self, report_id: str) -> dict:
        return {
            "report_id": report_id,
            "fields": [
                {"verdict": a.verdict, "rationale": a.rationale} for a in self.fields
            ],
        }

    @staticmethod
    def from_record(record: dict) -> "FineGrainedDescription":
        return FineGrainedDescription(
            fields=tuple(
                FieldAnswer(f["verdict"], f.get("rationale")) for f in record["fields"]
            )
        )


def description_from_verdicts(
    verdicts, rationales=None
) -> FineGrainedDescription:
    rationales = rationales or [None] * N_FIELDS
    return FineGrainedDescription(
        fields=tuple(FieldAnswer(v, r) for v, r in zip(verdicts, rationales))
    )


@dataclass(frozen=True)
class RawReport:
    report_id: str
    body: str
    style: ReportStyle

    def __post_init__(self):
        if not self.body:
            raise ValidationError("report body must be non-empty")


@dataclass(frozen=True)
class PromptTemplate:
    """Preamble, the six diagnostic questions, and optional worked examples."""

    preamble: str
    questions: tuple[str, ...]
    examples: tuple[tuple[str, str], ...] = ()
    version: str = "1"

    def __post_init__(self):
        if len(self.questions) != N_FIELDS:
            raise ValidationError(f"template must carry {N_FIELDS} questions")


# The frozen canonical question set; guidance pairing and prompt encoding
# depend on this exact text, so treat any edit as a new template version.
CANONICAL_QUESTIONS = (
    "What is the differentiation of the lesion?",
    "Is there any indication of spread through air spaces around the lesion?",
    "Is there any indication of vascular invasion by the lesion?",
    "Is there any indication of pleural invasion by the lesion?",
    "Is there any evidence of the lesion invading adjacent tissues or organs?",
    "Are the margins of the excised tissue clear of disease?",
)

_DEFAULT_PREAMBLE = (
    "You are reviewing one surgical pathology report. Answer the six numbered "
    "questions below, in order, as short clinical phrases. Join the six answers "
    "into a single line separated by semicolons. Use only the microscopic "
    "findings and ignore lymph node status. If a question cannot be answered "
    "from the report, answer exactly Unknown. For question 6, R0 indicates "
    "negative margins, R1 or R2 indicate positive margins, and Rx indicates "
    "Unknown."
)

_DEFAULT_EXAMPLES = (
    (
        "SPECIMEN CHECKLIST. Specimen type: Lobectomy. Histologic grade: "
        "moderately differentiated. Vascular invasion: Not specified. Pleural "
        "invasion: Present. Margins: R0.",
        "Lesion differentiation is moderately differentiated; Unknown; Unknown; "
        "Pleural invasion by the lesion is present; Unknown; Margins of the "
        "excised tissue are clear of disease (R0).",
    ),
    (
        "MICROSCOPIC FINDINGS: Sections show a carcinoma that is poorly "
        "differentiated. There is no vascular invasion. The margins are "
        "negative for tumor.",
        "Lesion differentiation is poorly differentiated; Unknown; No "
        "indication of vascular invasion by the lesion; Unknown; Unknown; "
        "Margins of the excised tissue are clear of disease.",
    ),
)


def default_template() -> PromptTemplate:
    return PromptTemplate(
        preamble=_DEFAULT_PREAMBLE,
        questions=CANONICAL_QUESTIONS,
        examples=_DEFAULT_EXAMPLES,
    )


def build_query(report: RawReport, template: PromptTemplate) -> str:
    """Render the full standardization query for one report, byte-stable."""
    lines = [template.preamble, ""]
    for i, question in enumerate(template.questions, start=1):
        lines.append(f"{i}. {question}")
    if template.examples:
        lines.append("")
        for report_text, answer_text in template.examples:
            lines.append(f"Report example: {report_text}")
            lines.append(f"Answer example: {answer_text}")
    lines.append("")
    lines.append(f"Diagnose report: {report.body}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# answer parsing
# ---------------------------------------------------------------------------

# Ordered (substring, verdict) rules per field; the first match wins, so
# negated and more specific phrases must precede their positive substrings.
_DIFF_RULES = (
    ("unknown", Differentiation.UNKNOWN),
    ("moderately to poorly differentiated", Differentiation.MODERATE_TO_POOR),
    ("moderate to poor", Differentiation.MODERATE_TO_POOR),
    ("well-differentiated", Differentiation.WELL),
    ("well differentiated", Differentiation.WELL),
    ("moderately differentiated", Differentiation.MODERATE),
    ("poorly differentiated", Differentiation.POOR),
    ("mixed differentiation", Differentiation.MIXED),
    ("mixed", Differentiation.MIXED),
)

_PRESENCE_RULES = (
    ("unknown", Presence.UNKNOWN),
    ("no indication", Presence.ABSENT),
    ("no evidence", Presence.ABSENT),
    ("not present", Presence.ABSENT),
    ("is not seen", Presence.ABSENT),
    ("not identified", Presence.ABSENT),
    ("absent", Presence.ABSENT),
    ("is present", Presence.PRESENT),
    ("present", Presence.PRESENT),
    ("indication of", Presence.PRESENT),
    ("indicated", Presence.PRESENT),
    ("is seen", Presence.PRESENT),
    ("identified", Presence.PRESENT),
    ("invades", Presence.PRESENT),
    ("noted", Presence.PRESENT),
)

_MARGIN_RULES = (
    ("unknown", Margins.UNKNOWN),
    ("not clear", Margins.INVOLVED),
    ("uninvolved", Margins.CLEAR),
    ("involved", Margins.INVOLVED),
    ("r0", Margins.CLEAR),
    ("r1", Margins.INVOLVED),
    ("r2", Margins.INVOLVED),
    ("negative", Margins.CLEAR),
    ("positive", Margins.INVOLVED),
    ("clear", Margins.CLEAR),
    ("free", Margins.CLEAR),
)

_FIELD_RULES = (
    _DIFF_RULES,
    _PRESENCE_RULES,
    _PRESENCE_RULES,
    _PRESENCE_RULES,
    _PRESENCE_RULES,
    _MARGIN_RULES,
)

# Canonical phrase per (field, verdict); rendering joins these with "; " and
# parsing maps each one back to its verdict (round-trip identity on enums).
CANONICAL_PHRASES: tuple[dict[str, str], ...] = (
    {
        Differentiation.WELL.value: "Lesion differentiation is well-differentiated",
        Differentiation.MODERATE.value: "Lesion differentiation is moderately differentiated",
        Differentiation.POOR.value: "Lesion differentiation is poorly differentiated",
        Differentiation.MODERATE_TO_POOR.value: (
            "Lesion differentiation is moderately to poorly differentiated"
        ),
        Differentiation.MIXED.value: "Lesion differentiation is mixed differentiation",
    },
    {
        Presence.PRESENT.value: "Spread through air spaces around the lesion is present",
        Presence.ABSENT.value: "No indication of spread through air spaces around the lesion",
    },
    {
        Presence.PRESENT.value: "Vascular invasion by the lesion is present",
        Presence.ABSENT.value: "No indication of vascular invasion by the lesion",
    },
    {
        Presence.PRESENT.value: "Pleural invasion by the lesion is present",
        Presence.ABSENT.value: "No indication of pleural invasion by the lesion",
    },
    {
        Presence.PRESENT.value: "The lesion invades adjacent tissues or organs",
        Presence.ABSENT.value: "No evidence of the lesion invading adjacent tissues or organs",
    },
    {
        Margins.CLEAR.value: "Margins of the excised tissue are clear of disease",
        Margins.INVOLVED.value: "Margins of the excised tissue are not clear of disease",
    },
)


def _classify_segment(index: int, segment: str) -> str | None:
    lowered = segment.casefold()
    for pattern, verdict in _FIELD_RULES[index]:
        if pattern in lowered:
            return verdict.value
    return None


def _split_rationale(index: int, verdict: str, segment: str) -> str | None:
    canonical = CANONICAL_PHRASES[index].get(verdict)
    if canonical is not None and segment.casefold().startswith(canonical.casefold()):
        remainder = segment[len(canonical):]
        if not remainder:
            return None
        if remainder.casefold().startswith(", as "):
            return remainder[5:]
    return segment


def parse_answer(text: str) -> FineGrainedDescription:
    """Parse a semicolon-joined six-segment answer into a description.

    An unclassifiable segment degrades to Unknown and is recorded in the
    result's ``warnings``; a wrong segment count is a hard error.
    """
    stripped = text.strip()
    if stripped.endswith("."):
        stripped = stripped[:-1]
    segments = [s.strip() for s in stripped.split(";")]
    if len(segments) != N_FIELDS:
        raise MalformedAnswerError(
            f"expected {N_FIELDS} semicolon-separated segments, got {len(segments)}",
            text,
        )
    answers = []
    warnings = []
    for i, segment in enumerate(segments):
        verdict = _classify_segment(i, segment)
        if verdict is None:
            answers.append(FieldAnswer(UNKNOWN))
            warnings.append(i)
        elif verdict == UNKNOWN:
            answers.append(FieldAnswer(UNKNOWN))
        else:
            answers.append(FieldAnswer(verdict, _split_rationale(i, verdict, segment)))
    return FineGrainedDescription(fields=tuple(answers), warnings=tuple(warnings))


def render_field(index: int, answer: FieldAnswer) -> str:
    """Canonical sentence for one field; Unknown renders as the bare literal."""
    if answer.verdict == UNKNOWN:
        return UNKNOWN
    phrase = CANONICAL_PHRASES[index][answer.verdict]
    if answer.rationale:
        return f"{phrase}, as {answer.rationale}"
    return phrase


def render_description(d: FineGrainedDescription) -> str:
    return "; ".join(render_field(i, a) for i, a in enumerate(d.fields)) + "."


# ---------------------------------------------------------------------------
# standardizer backends
# ---------------------------------------------------------------------------


class StandardizerBackend(Protocol):
    def standardize(self, report: RawReport, template: PromptTemplate) -> str: ...


# Ground-truth markers embedded by the synthetic report styles. Ordered, first
# match wins; ``None`` marks an explicit not-specified marker (keeps Unknown).
_MARKER_RULES: tuple[tuple[tuple[str, str | None], ...], ...] = (
    (
        ("histologic grade: not specified", None),
        ("moderately to poorly differentiated", Differentiation.MODERATE_TO_POOR.value),
        ("well differentiated", Differentiation.WELL.value),
        ("moderately differentiated", Differentiation.MODERATE.value),
        ("poorly differentiated", Differentiation.POOR.value),
        ("mixed differentiation", Differentiation.MIXED.value),
    ),
    (
        ("air space spread: not specified", None),
        ("no spread through air spaces", Presence.ABSENT.value),
        ("air space spread: absent", Presence.ABSENT.value),
        ("air space spread: present", Presence.PRESENT.value),
        ("spread through air spaces", Presence.PRESENT.value),
    ),
    (
        ("vascular invasion: not specified", None),
        ("no vascular invasion", Presence.ABSENT.value),
        ("vascular invasion: absent", Presence.ABSENT.value),
        ("vascular invasion: present", Presence.PRESENT.value),
        ("vascular invasion is noted", Presence.PRESENT.value),
    ),
    (
        ("pleural invasion: not specified", None),
        ("no pleural invasion", Presence.ABSENT.value),
        ("pleural invasion: absent", Presence.ABSENT.value),
        ("pleural invasion: present", Presence.PRESENT.value),
        ("extends into the pleura", Presence.PRESENT.value),
    ),
    (
        ("adjacent invasion: not specified", None),
        ("no invasion of adjacent structures", Presence.ABSENT.value),
        ("adjacent invasion: absent", Presence.ABSENT.value),
        ("adjacent invasion: present", Presence.PRESENT.value),
        ("invades adjacent structures", Presence.PRESENT.value),
    ),
    (
        ("margins: not specified", None),
        ("margins: rx", None),
        ("margins: r0", Margins.CLEAR.value),
        ("margins: r1", Margins.INVOLVED.value),
        ("margins: r2", Margins.INVOLVED.value),
        ("margins are negative for tumor", Margins.CLEAR.value),
        ("margins are positive for tumor", Margins.INVOLVED.value),
    ),
)

_STYLE_BANNERS = {
    ReportStyle.CHECKLIST: "specimen checklist",
    ReportStyle.NARRATIVE: "microscopic findings:",
    ReportStyle.TISSUE_DESCRIPTION: "tissue description:",
}


def recover_ground_truth(report: RawReport) -> tuple[str, ...]:
    """Read the embedded attribute markers back out of a synthetic body."""
    lowered = report.body.casefold()
    if not any(banner in lowered for banner in _STYLE_BANNERS.values()):
        raise UnsupportedReportError(
            f"report {report.report_id!r} carries no synthetic style banner"
        )
    verdicts = []
    for rules in _MARKER_RULES:
        found = UNKNOWN
        for pattern, verdict in rules:
            if pattern in lowered:
                found = verdict if verdict is not None else UNKNOWN
                break
        verdicts.append(found)
    return tuple(verdicts)


# Answer phrasing variants per (field, verdict); every variant classifies back
# to its own verdict under the parse rules above.
_ANSWER_VARIANTS: tuple[dict[str, tuple[str, ...]], ...] = (
    {
        Differentiation.WELL.value: (
            "Lesion differentiation is well-differentiated",
            "Differentiation of the lesion is well differentiated",
        ),
        Differentiation.MODERATE.value: (
            "Lesion differentiation is moderately differentiated",
            "Differentiation of the lesion is moderately differentiated",
        ),
        Differentiation.POOR.value: (
            "Lesion differentiation is poorly differentiated",
            "Differentiation of the lesion is poorly differentiated",
        ),
        Differentiation.MODERATE_TO_POOR.value: (
            "Lesion differentiation is moderately to poorly differentiated",
        ),
        Differentiation.MIXED.value: (
            "Lesion differentiation is mixed differentiation",
        ),
    },
    {
        Presence.PRESENT.value: (
            "Spread through air spaces around the lesion is present",
            "There is indication of spread through air spaces around the lesion",
        ),
        Presence.ABSENT.value: (
            "No indication of spread through air spaces around the lesion",
        ),
    },
    {
        Presence.PRESENT.value: (
            "Vascular invasion by the lesion is present",
            "There is indication of vascular invasion by the lesion",
        ),
        Presence.ABSENT.value: (
            "No indication of vascular invasion by the lesion",
        ),
    },
    {
        Presence.PRESENT.value: (
            "Pleural invasion by the lesion is present",
            "There is indication of pleural invasion by the lesion",
        ),
        Presence.ABSENT.value: (
            "No indication of pleural invasion by the lesion",
        ),
    },
    {
        Presence.PRESENT.value: (
            "The lesion invades adjacent tissues or organs",
            "There is evidence of the lesion invading adjacent tissues or organs",
        ),
        Presence.ABSENT.value: (
            "No evidence of the lesion invading adjacent tissues or organs",
        ),
    },
    {
        Margins.CLEAR.value: (
            "Margins of the excised tissue are clear of disease",
            "Margins of the excised tissue are clear of disease (R0)",
        ),
        Margins.INVOLVED.value: (
            "Margins of the excised tissue are not clear of disease",
            "Margins of the excised tissue are not clear of disease (R1)",
        ),
    },
)

# Optional rationale snippets; none may contain a semicolon or "Unknown", and
# none may contain a keyword that would flip its verdict's classification.
_RATIONALE_VARIANTS: tuple[dict[str, tuple[str, ...]], ...] = (
    {},
    {
        Presence.PRESENT.value: ("tumor cell clusters occupy nearby air spaces",),
        Presence.ABSENT.value: ("the surrounding air spaces are free of tumor",),
    },
    {
        Presence.PRESENT.value: ("tumor emboli are within small vessels",),
        Presence.ABSENT.value: ("angiolymphatic spaces are free of tumor",),
    },
    {
        Presence.PRESENT.value: ("the carcinoma extends into the visceral pleura",),
        Presence.ABSENT.value: ("the visceral pleura is free of tumor",),
    },
    {
        Presence.PRESENT.value: ("the tumor extends into the chest wall",),
        Presence.ABSENT.value: ("the tumor is confined to the organ of origin",),
    },
    {
        Margins.CLEAR.value: ("all margins are free of tumor",),
        Margins.INVOLVED.value: ("tumor is within the resection margin",),
    },
)


class MockStandardizer:
    """Deterministic rule-based stand-in for the external standardizer.

    Recovers ground truth from the synthetic report markers and emits a
    six-segment answer with seeded per-report phrasing variation.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    def standardize(self, report: RawReport, template: PromptTemplate) -> str:
        verdicts = recover_ground_truth(report)
        rng = rng_for(self.seed, "mock-standardize", report.report_id)
        segments = []
        for i, verdict in enumerate(verdicts):
            if verdict == UNKNOWN:
                segments.append(UNKNOWN)
                continue
            variants = _ANSWER_VARIANTS[i][verdict]
            phrase = variants[int(rng.integers(len(variants)))]
            rationales = _RATIONALE_VARIANTS[i].get(verdict, ())
            if rationales and rng.random() < 0.5:
                phrase = f"{phrase}, as {rationales[int(rng.integers(len(rationales)))]}"
            segments.append(phrase)
        return "; ".join(segments) + "."


def _query_hash(query: str) -> str:
    return hashlib.blake2s(query.encode("utf-8")).digest()[:8].hex()


class CachingHttpStandardizer:
    """Feature-switched live backend; answers cached on disk by query hash.

    Never used in tests or the default pipeline -- the mock is the supported
    path. ``client`` accepts any object with ``post(url, json=...)`` so a
    stub transport can stand in for the network.
    """

    def __init__(self, url: str, cache_dir: str | os.PathLike, client=None):
        self.url = url
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        if client is None:
            import httpx

            client = httpx.Client()
        self.client = client

    def standardize(self, report: RawReport, template: PromptTemplate) -> str:
        query = build_query(report, template)
        cache_file = self.cache_dir / f"{_query_hash(query)}.txt"
        if cache_file.exists():
            return cache_file.read_text(encoding="utf-8")
        response = self.client.post(self.url, json={"query": query})
        response.raise_for_status()
        answer = response.text
        tmp = cache_file.with_suffix(".tmp")
        tmp.write_text(answer, encoding="utf-8")
        os.replace(tmp, cache_file)
        return answer


# ---------------------------------------------------------------------------
# corpus and description files
# ---------------------------------------------------------------------------


def write_corpus(path: str | os.PathLike, reports: list[RawReport]) -> None:
    seen = set()
    for r in reports:
        if r.report_id in seen:
            raise ValidationError(f"duplicate report_id {r.report_id!r}")
        seen.add(r.report_id)
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(
                json.dumps(
                    {"report_id": r.report_id, "style": r.style.value, "body": r.body},
                    sort_keys=True,
                )
                + "\n"
            )


def read_corpus(path: str | os.PathLike) -> list[RawReport]:
    reports = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["report_id"] in seen:
                raise ValidationError(f"duplicate report_id {rec['report_id']!r}")
            seen.add(rec["report_id"])
            reports.append(
                RawReport(rec["report_id"], rec["body"], ReportStyle(rec["style"]))
            )
    return reports


def write_descriptions(
    path: str | os.PathLike, items: list[tuple[str, FineGrainedDescription]]
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for report_id, desc in items:
            fh.write(json.dumps(desc.to_record(report_id), sort_keys=True) + "\n")


def read_descriptions(path: str | os.PathLike) -> dict[str, FineGrainedDescription]:
    out: dict[str, FineGrainedDescription] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out[rec["report_id"]] = FineGrainedDescription.from_record(rec)
    return out
