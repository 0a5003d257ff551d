"""Phone inventories and broad-phonetic-class (BPC) schemes.

Three ways to group phones into coarse classes:

* ``manner_scheme``  -- how airflow is obstructed (9 classes over the core
  IPA chart; 5 classes for the English subset: vowel, stop, fricative,
  nasal, silence),
* ``place_scheme``   -- where airflow is obstructed (10 classes over the
  core chart, 9 for English),
* ``cluster_confusion`` -- data-driven grouping by agglomerative merging of
  a phone confusion matrix.

The phone table ships as ``data/ipa_table.tsv`` so inventories stay
auditable and extensible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

MANNER_CLASSES = (
    "vowel",
    "plosive",
    "nasal",
    "trill",
    "tap_flap",
    "fricative",
    "lateral_fricative",
    "approximant",
    "lateral_approximant",
)
PLACE_CLASSES = (
    "vowel",
    "bilabial",
    "labiodental",
    "dental_alveolar_postalveolar",
    "retroflex",
    "palatal",
    "velar",
    "uvular",
    "pharyngeal",
    "glottal",
)
ENGLISH_MANNER_CLASSES = ("vowel", "stop", "fricative", "nasal", "silence")
ENGLISH_PLACE_CLASSES = (
    "vowel",
    "bilabial",
    "labiodental",
    "dental",
    "alveolar",
    "postalveolar",
    "velar",
    "glottal",
    "silence",
)

SCHEME_SCHEMA = "bpcse-scheme-1"


@dataclass(frozen=True)
class PhoneInventory:
    phones: tuple
    language: str = "ipa"

    def __post_init__(self):
        if not self.phones:
            raise ValueError("inventory must be nonempty")
        if len(set(self.phones)) != len(self.phones):
            raise ValueError("inventory contains duplicate phones")


@dataclass
class BpcScheme:
    """A total mapping from an inventory's phones to class labels."""

    name: str
    classes: tuple
    mapping: dict

    def __post_init__(self):
        used = set(self.mapping.values())
        if used != set(self.classes):
            raise ValueError(
                f"classes {sorted(self.classes)} do not match mapped labels {sorted(used)}"
            )

    def label_of(self, phone: str) -> str:
        try:
            return self.mapping[phone]
        except KeyError:
            raise ValueError(f"phone {phone!r} not in scheme {self.name!r}") from None

    def to_json(self) -> str:
        doc = {
            "schema": SCHEME_SCHEMA,
            "name": self.name,
            "classes": list(self.classes),
            "mapping": self.mapping,
        }
        return json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "BpcScheme":
        doc = json.loads(text)
        if doc.get("schema") != SCHEME_SCHEMA:
            raise ValueError(f"unrecognized scheme schema {doc.get('schema')!r}")
        return cls(doc["name"], tuple(doc["classes"]), dict(doc["mapping"]))


@dataclass
class ConfusionMatrix:
    """counts[i, j] = times phone i was recognized as phone j."""

    phones: tuple
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        n = len(self.phones)
        if self.counts.shape != (n, n):
            raise ValueError(
                f"confusion matrix must be {n}x{n}, got {self.counts.shape}"
            )
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")


_TABLE = None


def _load_table():
    global _TABLE
    if _TABLE is None:
        text = resources.files("bpcse").joinpath("data/ipa_table.tsv").read_text("utf-8")
        rows = []
        header = None
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            cells = line.split("\t")
            if header is None:
                header = cells
                continue
            rows.append(dict(zip(header, cells)))
        _TABLE = {r["phone"]: r for r in rows}
    return _TABLE


def full_ipa_inventory() -> PhoneInventory:
    """The 87 core-chart phones (pulmonic consonants + vowels)."""
    table = _load_table()
    phones = tuple(p for p, r in table.items() if r["ipa_core"] == "1")
    return PhoneInventory(phones, language="ipa")


def english_inventory() -> PhoneInventory:
    """English/TIMIT-style subset, including ``w`` and the ``sil`` symbol."""
    table = _load_table()
    phones = tuple(p for p, r in table.items() if r["english"] == "1")
    return PhoneInventory(phones, language="en")


def _knowledge_scheme(inv: PhoneInventory, column: str, order, name: str) -> BpcScheme:
    table = _load_table()
    mapping = {}
    for p in inv.phones:
        row = table.get(p)
        if row is None:
            raise ValueError(f"phone {p!r} not in the shipped IPA table")
        label = row[column]
        if label == "-":
            raise ValueError(f"phone {p!r} has no {name} class for language {inv.language!r}")
        mapping[p] = label
    classes = tuple(c for c in order if c in set(mapping.values()))
    return BpcScheme(name, classes, mapping)


def manner_scheme(inv: PhoneInventory) -> BpcScheme:
    """Manner-of-articulation grouping (9-way core chart, 5-way English)."""
    if inv.language == "en":
        return _knowledge_scheme(inv, "english_manner", ENGLISH_MANNER_CLASSES, "manner")
    return _knowledge_scheme(inv, "manner", MANNER_CLASSES, "manner")


def place_scheme(inv: PhoneInventory) -> BpcScheme:
    """Place-of-articulation grouping (10-way core chart, 9-way English)."""
    if inv.language == "en":
        return _knowledge_scheme(inv, "english_place", ENGLISH_PLACE_CLASSES, "place")
    return _knowledge_scheme(inv, "place", PLACE_CLASSES, "place")


def cluster_confusion(m: ConfusionMatrix, k: int = 9) -> BpcScheme:
    """Agglomerative data-driven grouping of a phone confusion matrix.

    Similarity s(i, j) = counts[i, j] / row_i + counts[j, i] / row_j
    (each row normalized to a distribution, zero rows stay zero). Clusters
    start as singletons; the pair with maximal average inter-cluster
    similarity merges, ties broken by the lexicographically smallest
    (min-phone, min-phone) pair, until exactly ``k`` clusters remain.
    Arithmetic is exact (fractions), so the result is deterministic and
    invariant to permuting the matrix's phone order.
    """
    n = len(m.phones)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")

    row_sums = [int(m.counts[i].sum()) for i in range(n)]
    sim = [[Fraction(0)] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            s = Fraction(0)
            if row_sums[i]:
                s += Fraction(int(m.counts[i, j]), row_sums[i])
            if row_sums[j]:
                s += Fraction(int(m.counts[j, i]), row_sums[j])
            sim[i][j] = s

    clusters = [frozenset([i]) for i in range(n)]
    while len(clusters) > k:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                total = sum(sim[i][j] for i in clusters[a] for j in clusters[b])
                avg = Fraction(total, len(clusters[a]) * len(clusters[b]))
                key_pair = tuple(
                    sorted(
                        (
                            min(m.phones[i] for i in clusters[a]),
                            min(m.phones[i] for i in clusters[b]),
                        )
                    )
                )
                if best is None or avg > best[0] or (avg == best[0] and key_pair < best[1]):
                    best = (avg, key_pair, a, b)
        _, _, a, b = best
        merged = clusters[a] | clusters[b]
        clusters = [c for idx, c in enumerate(clusters) if idx not in (a, b)] + [merged]

    clusters.sort(key=lambda c: min(m.phones[i] for i in c))
    mapping = {}
    classes = []
    for c in clusters:
        label = "grp_" + min(m.phones[i] for i in c)
        classes.append(label)
        for i in c:
            mapping[m.phones[i]] = label
    return BpcScheme("data", tuple(classes), mapping)


def transcript_to_bpc(phones, scheme: BpcScheme):
    """Map a phone transcript to BPC labels, collapsing consecutive repeats."""
    out = []
    for p in phones:
        label = scheme.label_of(p)
        if not out or out[-1] != label:
            out.append(label)
    return out


def read_confusion_tsv(path) -> ConfusionMatrix:
    """TSV confusion matrix: header row of phones, one integer row per phone."""
    lines = [
        ln for ln in Path(path).read_text("utf-8").splitlines() if ln.strip() and not ln.startswith("#")
    ]
    header = lines[0].split("\t")
    phones = tuple(header[1:])
    n = len(phones)
    counts = np.zeros((n, n), dtype=np.int64)
    if len(lines) - 1 != n:
        raise ValueError(f"expected {n} data rows, got {len(lines) - 1}")
    for r, ln in enumerate(lines[1:]):
        cells = ln.split("\t")
        if cells[0] != phones[r]:
            raise ValueError(f"row {r} is {cells[0]!r}, expected {phones[r]!r}")
        counts[r] = [int(c) for c in cells[1:]]
    return ConfusionMatrix(phones, counts)


def write_confusion_tsv(path, m: ConfusionMatrix) -> None:
    lines = ["\t".join(["phone", *m.phones])]
    for i, p in enumerate(m.phones):
        lines.append("\t".join([p, *[str(int(c)) for c in m.counts[i]]]))
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")
