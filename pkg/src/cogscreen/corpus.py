"""Patient data model, JSONL persistence, structured flags, splitting, and
a synthetic corpus generator for desk-scale experiments.

Structured flagging mirrors the cognitive-concern medication list
(galantamine, donepezil, rivastigmine, memantine) and the ICD families
290.X / 294.X / 331.X / 780.93 (ICD-9) and G30 / G31 (ICD-10).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Optional

import numpy as np

FLAGGED_MEDICATIONS = ("galantamine", "donepezil", "rivastigmine", "memantine")
ICD9_PREFIXES = ("290.", "294.", "331.")
ICD9_EXACT = ("780.93",)
ICD10_PREFIXES = ("G30", "G31")

SEXES = ("F", "M", "other")


class CorpusFormatError(ValueError):
    """A corpus file line failed validation."""


@dataclass(frozen=True)
class Note:
    note_id: str
    date: date
    text: str

    def __post_init__(self):
        if not self.note_id:
            raise ValueError("note_id must be nonempty")
        if not self.text:
            raise ValueError(f"note {self.note_id}: text must be nonempty")


@dataclass(frozen=True)
class MedicationRecord:
    name: str
    date: date

    def __post_init__(self):
        if not self.name:
            raise ValueError("medication name must be nonempty")


@dataclass(frozen=True)
class DiagnosisRecord:
    code: str
    system: str  # "ICD9" | "ICD10"
    date: date

    _ICD9_RE = re.compile(r"^\d{3}(\.\d{1,2})?$")
    _ICD10_RE = re.compile(r"^[A-Z]\d{2}(\.\d{1,4})?$")

    def __post_init__(self):
        code = self.code.strip().upper()
        object.__setattr__(self, "code", code)
        if self.system == "ICD9":
            if not self._ICD9_RE.match(code):
                raise ValueError(f"code {code!r} is not valid ICD9 syntax")
        elif self.system == "ICD10":
            if not self._ICD10_RE.match(code):
                raise ValueError(f"code {code!r} is not valid ICD10 syntax")
        else:
            raise ValueError(f"unknown coding system {self.system!r}")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age: int
    sex: str
    notes: tuple[Note, ...] = ()
    medications: tuple[MedicationRecord, ...] = ()
    diagnoses: tuple[DiagnosisRecord, ...] = ()
    gold_label: Optional[bool] = None

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be nonempty")
        if self.age < 0:
            raise ValueError(f"patient {self.patient_id}: age must be >= 0")
        if self.sex not in SEXES:
            raise ValueError(f"patient {self.patient_id}: sex must be one of {SEXES}")
        ids = [n.note_id for n in self.notes]
        if len(ids) != len(set(ids)):
            raise ValueError(f"patient {self.patient_id}: duplicate note_id")
        object.__setattr__(self, "notes", tuple(self.notes))
        object.__setattr__(self, "medications", tuple(self.medications))
        object.__setattr__(self, "diagnoses", tuple(self.diagnoses))


@dataclass(frozen=True)
class StructuredFeatures:
    med_count: int
    icd_count: int


@dataclass(frozen=True)
class Corpus:
    patients: tuple[PatientRecord, ...]

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate patient_id in corpus")
        object.__setattr__(self, "patients", tuple(self.patients))

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def get(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)


def flag_structured(patient: PatientRecord) -> StructuredFeatures:
    """Count medication and diagnosis records matching the flag lists.

    Medication match is case-insensitive substring (EHR med strings carry
    dosage suffixes, e.g. "Donepezil 10mg tab"). ICD-9 matches the 290/294/331
    dotted families by prefix and 780.93 exactly; ICD-10 matches prefixes
    G30/G31. Duplicate records count separately.
    """
    med_count = 0
    for med in patient.medications:
        name = med.name.lower()
        if any(flag in name for flag in FLAGGED_MEDICATIONS):
            med_count += 1
    icd_count = 0
    for dx in patient.diagnoses:
        code = dx.code.strip().upper()
        if dx.system == "ICD9":
            if code.startswith(ICD9_PREFIXES) or code in ICD9_EXACT:
                icd_count += 1
        elif dx.system == "ICD10":
            if code.startswith(ICD10_PREFIXES):
                icd_count += 1
    return StructuredFeatures(med_count=med_count, icd_count=icd_count)


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

def _patient_to_obj(p: PatientRecord) -> dict:
    obj = {
        "patient_id": p.patient_id,
        "age": p.age,
        "sex": p.sex,
        "notes": [
            {"note_id": n.note_id, "date": n.date.isoformat(), "text": n.text}
            for n in p.notes
        ],
        "medications": [
            {"name": m.name, "date": m.date.isoformat()} for m in p.medications
        ],
        "diagnoses": [
            {"code": d.code, "system": d.system, "date": d.date.isoformat()}
            for d in p.diagnoses
        ],
    }
    if p.gold_label is not None:
        obj["gold_label"] = p.gold_label
    return obj


def _require(obj: dict, field_name: str, lineno: int):
    if field_name not in obj:
        raise CorpusFormatError(f"line {lineno}: missing field {field_name!r}")
    return obj[field_name]


def _parse_date(value, lineno: int, field_name: str) -> date:
    try:
        return date.fromisoformat(value)
    except (TypeError, ValueError):
        raise CorpusFormatError(
            f"line {lineno}: field {field_name!r} is not an ISO-8601 date: {value!r}"
        ) from None


def _patient_from_obj(obj: dict, lineno: int) -> PatientRecord:
    try:
        notes = tuple(
            Note(
                note_id=_require(n, "note_id", lineno),
                date=_parse_date(_require(n, "date", lineno), lineno, "notes.date"),
                text=_require(n, "text", lineno),
            )
            for n in _require(obj, "notes", lineno)
        )
        meds = tuple(
            MedicationRecord(
                name=_require(m, "name", lineno),
                date=_parse_date(_require(m, "date", lineno), lineno, "medications.date"),
            )
            for m in _require(obj, "medications", lineno)
        )
        dxs = tuple(
            DiagnosisRecord(
                code=_require(d, "code", lineno),
                system=_require(d, "system", lineno),
                date=_parse_date(_require(d, "date", lineno), lineno, "diagnoses.date"),
            )
            for d in _require(obj, "diagnoses", lineno)
        )
        return PatientRecord(
            patient_id=_require(obj, "patient_id", lineno),
            age=_require(obj, "age", lineno),
            sex=_require(obj, "sex", lineno),
            notes=notes,
            medications=meds,
            diagnoses=dxs,
            gold_label=obj.get("gold_label"),
        )
    except CorpusFormatError:
        raise
    except (ValueError, TypeError) as exc:
        raise CorpusFormatError(f"line {lineno}: {exc}") from None


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write one patient object per line (UTF-8 JSON Lines, ISO dates)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for p in corpus.patients:
            fh.write(json.dumps(_patient_to_obj(p), sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def load_corpus(path: str | Path) -> Corpus:
    """Load a JSONL corpus; malformed records raise CorpusFormatError with
    the line number and offending field."""
    path = Path(path)
    patients = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusFormatError(f"line {lineno}: expected a JSON object")
            patients.append(_patient_from_obj(obj, lineno))
    return Corpus(patients=tuple(patients))


# ---------------------------------------------------------------------------
# Train/test split
# ---------------------------------------------------------------------------

def split_train_test(
    corpus: Corpus, test_fraction: float = 0.10, seed: int = 0
) -> tuple[Corpus, Corpus]:
    """Random disjoint partition with |test| = round(test_fraction * N).

    Deterministic given the seed. All patients must carry gold labels and
    the corpus must hold at least 10 of them.
    """
    unlabeled = [p.patient_id for p in corpus.patients if p.gold_label is None]
    if unlabeled:
        raise ValueError(
            f"cannot split: {len(unlabeled)} unlabeled patients present "
            f"(first: {unlabeled[0]})"
        )
    n = len(corpus.patients)
    if n < 10:
        raise ValueError(f"corpus has {n} labeled patients; need at least 10")
    n_test = int(round(test_fraction * n))
    rng = np.random.default_rng([seed, 0x5B117])  # stream disjoint from the generator's
    order = rng.permutation(n)
    test_idx = set(order[:n_test].tolist())
    train = tuple(p for i, p in enumerate(corpus.patients) if i not in test_idx)
    test = tuple(p for i, p in enumerate(corpus.patients) if i in test_idx)
    return Corpus(patients=train), Corpus(patients=test)


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

# Terms with the highest label correlation in reference runs; positives
# draw from this pool at an elevated rate.
CONCEPT_TERM_POOL = (
    "dementia", "memory", "daughter", "cognitive", "alzheimer", "accompanied",
    "behavioral", "unable", "confused", "donepezil", "mental", "aricept",
    "care", "impairment", "nursing", "assistance", "nurse", "living", "rn",
    "dnr", "memantine", "disoriented", "forgetful", "wandering", "caregiver",
    "mmse", "moca", "agitation", "aphasia", "placement",
)

NEUTRAL_SENTENCES = (
    "patient seen in clinic for routine follow up visit today",
    "blood pressure well controlled on current regimen",
    "denies chest pain shortness of breath or palpitations",
    "continues home exercise program and tolerates it well",
    "reviewed diet and encouraged regular physical activity",
    "knee pain improved with physical therapy sessions",
    "no acute distress on examination heart regular rate and rhythm",
    "lungs clear to auscultation bilaterally no wheezes",
    "will continue current medications and recheck labs",
    "discussed vaccination schedule and preventive screening",
    "reports good appetite and stable weight this year",
    "sleep quality adequate most nights without medication",
    "ambulates independently without assistive device",
    "mood euthymic with congruent affect on interview",
    "bowel and bladder function reported as normal",
    "skin warm and dry without rashes or lesions",
    "hearing aids functioning well per patient report",
    "annual eye examination scheduled with optometry",
    "influenza vaccine administered in left deltoid",
    "chronic back pain managed conservatively with stretching",
    "no lower extremity edema noted on examination",
    "renewed prescriptions sent to the preferred pharmacy",
    "encouraged smoking cessation resources declined today",
    "follow up visit arranged in three months or sooner as needed",
    "symptoms have remained stable over the past year",
    "patient appears well nourished and in no acute distress",
    "family present during the examination today",
    "the plan was discussed and all questions were answered",
    "blood sugars have improved since the last visit",
    "reviewed the home medication list during the visit",
    "notable improvement in gait since starting therapy",
    "no new concerns raised at this visit",
)

POSITIVE_SENTENCE_TEMPLATES = (
    "daughter reports worsening {term} over the past year",
    "patient appears {term} during the interview today",
    "notable {term} concerns raised by family at visit",
    "started on {term} for progressive cognitive decline",
    "discussed {term} and safety planning with caregiver",
    "exam shows {term} deficits on bedside testing",
    "continues to have {term} episodes at home",
    "referred to neurology for {term} evaluation",
)

BOILERPLATE_SECTIONS = (
    ("MEDICATIONS:", (
        "Lisinopril 10 mg daily by mouth",
        "Atorvastatin 40 mg nightly by mouth",
        "Metformin 500 mg twice daily with meals",
        "Aspirin 81 mg daily by mouth",
        "Omeprazole 20 mg daily before breakfast",
        "Vitamin D3 1000 units daily",
    )),
    ("ALLERGIES:", (
        "Penicillin - rash and itching",
        "Sulfa drugs - hives documented 2009",
        "No other known drug allergies on file",
    )),
    ("LAB RESULTS:", (
        "WBC 7.2 HGB 13.1 PLT 250 drawn this visit",
        "Sodium 139 Potassium 4.2 Creatinine 0.9",
        "HbA1c 6.8 LDL 98 TSH 2.1 within range",
        "Glucose 105 BUN 18 eGFR 72 stable",
        "Urinalysis negative for infection",
    )),
    ("FAMILY HISTORY:", (
        "Mother deceased age 88 natural causes",
        "Father deceased age 79 coronary artery disease",
        "Sibling with hypertension and diabetes",
        "No known family history of malignancy",
    )),
    ("BILLING:", (
        "CPT 99214 established patient visit level 4",
        "ICD codes submitted with claim attached",
        "Insurance authorization 44-2210 on file",
    )),
)

SURNAMES = (
    "Smith", "Jones", "Garcia", "Chen", "Patel", "Muller", "Rossi", "Kim",
    "Novak", "Silva", "Okafor", "Haddad", "Larsen", "Dubois", "Tanaka",
)

BACKGROUND_MEDICATIONS = (
    "Lisinopril 10mg", "Atorvastatin 40mg", "Metformin 500mg",
    "Amlodipine 5mg", "Levothyroxine 50mcg", "Omeprazole 20mg",
)

BACKGROUND_ICD9 = ("401.9", "250.00", "272.4", "530.81", "715.90")
BACKGROUND_ICD10 = ("I10", "E11.9", "E78.5", "K21.9", "M17.9")

FLAGGED_ICD9 = ("290.0", "294.10", "331.0", "780.93")
FLAGGED_ICD10 = ("G30.9", "G31.84", "G30.1")
FLAGGED_MED_STRINGS = (
    "Donepezil 10mg tab", "Memantine 5mg", "Rivastigmine patch", "Galantamine 8mg",
)


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the synthetic corpus generator.

    structured_sensitivity is the fraction of positive patients who also
    receive flagged codes/meds; lowering it mimics the under-coding that
    motivates note-based detection.
    """

    n_patients: int = 770
    prevalence: float = 0.446
    structured_sensitivity: float = 0.5
    notes_per_patient_min: int = 2
    notes_per_patient_max: int = 3
    sentences_per_note: int = 7
    pos_concept_rate: float = 2.5   # Poisson mean of concept sentences per positive note
    neg_concept_rate: float = 0.15  # Poisson mean per negative note
    neg_structured_rate: float = 0.03  # negatives with spurious flagged records
    year: int = 2018

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if not 0.0 <= self.prevalence <= 1.0:
            raise ValueError("prevalence must be in [0, 1]")
        if not 0.0 <= self.structured_sensitivity <= 1.0:
            raise ValueError("structured_sensitivity must be in [0, 1]")
        if self.notes_per_patient_min < 1 or self.notes_per_patient_max < self.notes_per_patient_min:
            raise ValueError("invalid notes_per_patient range")
        if self.sentences_per_note < 1:
            raise ValueError("sentences_per_note must be >= 1")
        if self.pos_concept_rate < 0 or self.neg_concept_rate < 0:
            raise ValueError("concept rates must be >= 0")
        if not 0.0 <= self.neg_structured_rate <= 1.0:
            raise ValueError("neg_structured_rate must be in [0, 1]")

    @classmethod
    def from_json(cls, path: str | Path) -> "GenConfig":
        with Path(path).open("r", encoding="utf-8") as fh:
            obj = json.load(fh)
        cfg = cls(**obj)
        cfg.validate()
        return cfg


def _random_date(rng: np.random.Generator, year: int) -> date:
    start = date(year, 1, 1)
    return start + timedelta(days=int(rng.integers(0, 365)))


def _fmt_date(d: date) -> str:
    return f"{d.month:02d}/{d.day:02d}/{d.year}"


BODY_TITLES = ("ASSESSMENT AND PLAN:", "IMPRESSION:", "PLAN:",
               "INTERVAL HISTORY:", "SUBJECTIVE:")

# Head-heavy sampling weights so the leading concept terms dominate the
# planted signal the way the reference correlation table suggests.
_TERM_WEIGHTS = 1.0 / np.power(np.arange(len(CONCEPT_TERM_POOL)) + 1.0, 0.8)
_TERM_WEIGHTS /= _TERM_WEIGHTS.sum()


def _make_note_text(rng: np.random.Generator, cfg: GenConfig, positive: bool,
                    note_date: date) -> str:
    """One synthetic progress note: fixed header, boilerplate sections the
    preprocessor should drop, and a narrative body carrying the signal."""
    surname = SURNAMES[int(rng.integers(len(SURNAMES)))]
    mrn = int(rng.integers(1_000_000, 9_999_999))
    header = [
        "GENERAL HOSPITAL PROGRESS NOTE",
        f"MRN: {mrn}  DOB: {_fmt_date(_random_date(rng, cfg.year - 80))}",
        f"Encounter Date: {_fmt_date(note_date)}",
    ]

    # Narrative body: neutral filler plus planted concept sentences.
    n_concept = int(rng.poisson(cfg.pos_concept_rate if positive else cfg.neg_concept_rate))
    body: list[str] = []
    for _ in range(cfg.sentences_per_note):
        s = NEUTRAL_SENTENCES[int(rng.integers(len(NEUTRAL_SENTENCES)))]
        body.append(s.capitalize() + ".")
    for _ in range(n_concept):
        tmpl = POSITIVE_SENTENCE_TEMPLATES[int(rng.integers(len(POSITIVE_SENTENCE_TEMPLATES)))]
        term = CONCEPT_TERM_POOL[int(rng.choice(len(CONCEPT_TERM_POOL), p=_TERM_WEIGHTS))]
        body.append(tmpl.format(term=term).capitalize() + ".")
    rng.shuffle(body)
    if rng.random() < 0.8:
        body.insert(0, f"Seen by Dr. {surname} on {_fmt_date(note_date)} at "
                       f"{int(rng.integers(8, 17)):02d}:{int(rng.integers(0, 60)):02d}.")
    if rng.random() < 0.6:
        body.append(f"Vitals reviewed: BP {int(rng.integers(100, 160))}/"
                    f"{int(rng.integers(60, 95))} HR {int(rng.integers(55, 95))} "
                    f"weight {int(rng.integers(50, 95))} kg.")

    sections = []
    n_sections = int(rng.integers(2, 5))
    chosen = rng.choice(len(BOILERPLATE_SECTIONS), size=n_sections, replace=False)
    for si in sorted(chosen.tolist()):
        title, lines = BOILERPLATE_SECTIONS[si]
        k = int(rng.integers(2, len(lines) + 1))
        sections.append(title + "\n" + "\n".join(lines[:k]))

    title = BODY_TITLES[int(rng.integers(len(BODY_TITLES)))]
    parts = ["\n".join(header), ""]
    parts.extend(sections)
    parts.append(title + "\n" + " ".join(body))
    return "\n\n".join(parts)


def generate_synthetic_corpus(cfg: GenConfig, seed: int = 0) -> Corpus:
    """Deterministic synthetic corpus: exactly round(n * prevalence) positive
    patients; positives carry concept-laden notes, and a structured_sensitivity
    fraction of them also carry flagged codes/meds."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0x6E6])
    n = cfg.n_patients
    n_pos = int(round(cfg.prevalence * n))
    labels = np.zeros(n, dtype=bool)
    labels[rng.permutation(n)[:n_pos]] = True

    patients = []
    for i in range(n):
        positive = bool(labels[i])
        pid = f"P{i:05d}"
        age = int(np.clip(round(rng.normal(81.0, 7.2)), 55, 100))
        sex = "F" if rng.random() < 0.58 else "M"

        n_notes = int(rng.integers(cfg.notes_per_patient_min, cfg.notes_per_patient_max + 1))
        notes = []
        for j in range(n_notes):
            nd = _random_date(rng, cfg.year)
            notes.append(Note(note_id=f"{pid}-N{j}", date=nd,
                              text=_make_note_text(rng, cfg, positive, nd)))

        meds = []
        dxs = []
        for _ in range(int(rng.integers(0, 4))):
            meds.append(MedicationRecord(
                name=BACKGROUND_MEDICATIONS[int(rng.integers(len(BACKGROUND_MEDICATIONS)))],
                date=_random_date(rng, cfg.year)))
        for _ in range(int(rng.integers(0, 4))):
            if rng.random() < 0.5:
                dxs.append(DiagnosisRecord(
                    code=BACKGROUND_ICD9[int(rng.integers(len(BACKGROUND_ICD9)))],
                    system="ICD9", date=_random_date(rng, cfg.year)))
            else:
                dxs.append(DiagnosisRecord(
                    code=BACKGROUND_ICD10[int(rng.integers(len(BACKGROUND_ICD10)))],
                    system="ICD10", date=_random_date(rng, cfg.year)))

        flagged = (positive and rng.random() < cfg.structured_sensitivity) or \
                  (not positive and rng.random() < cfg.neg_structured_rate)
        if flagged:
            # n_flag >= 1, so a flagged patient always carries a flagged record
            n_flag = int(rng.integers(1, 4))
            for _ in range(n_flag):
                if rng.random() < 0.5:
                    meds.append(MedicationRecord(
                        name=FLAGGED_MED_STRINGS[int(rng.integers(len(FLAGGED_MED_STRINGS)))],
                        date=_random_date(rng, cfg.year)))
                elif rng.random() < 0.5:
                    dxs.append(DiagnosisRecord(
                        code=FLAGGED_ICD9[int(rng.integers(len(FLAGGED_ICD9)))],
                        system="ICD9", date=_random_date(rng, cfg.year)))
                else:
                    dxs.append(DiagnosisRecord(
                        code=FLAGGED_ICD10[int(rng.integers(len(FLAGGED_ICD10)))],
                        system="ICD10", date=_random_date(rng, cfg.year)))

        patients.append(PatientRecord(
            patient_id=pid, age=age, sex=sex, notes=tuple(notes),
            medications=tuple(meds), diagnoses=tuple(dxs), gold_label=positive))

    return Corpus(patients=tuple(patients))


def strip_labels(corpus: Corpus, keep_fraction: float, seed: int = 0) -> Corpus:
    """Return a copy with gold labels removed from a random (1 - keep_fraction)
    of patients; used to stage active-learning experiments."""
    rng = np.random.default_rng([seed, 0x57219])
    n = len(corpus.patients)
    keep = set(rng.permutation(n)[: int(math.floor(keep_fraction * n))].tolist())
    patients = tuple(
        p if i in keep else replace(p, gold_label=None)
        for i, p in enumerate(corpus.patients)
    )
    return Corpus(patients=patients)
