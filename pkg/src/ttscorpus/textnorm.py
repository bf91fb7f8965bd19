"""Arabic-aware text helpers shared by the service gate and the metrics."""

from __future__ import annotations

import unicodedata

# Combining diacritic marks: fathatan..sukun plus superscript alef.
DIACRITIC_CODEPOINTS = frozenset(range(0x064B, 0x0653)) | {0x0670}

_ALEF_FORMS = {
    "آ": "ا",  # madda
    "أ": "ا",  # hamza above
    "إ": "ا",  # hamza below
    "ٱ": "ا",  # wasla
}


def strip_diacritics(text: str) -> str:
    return "".join(c for c in text if ord(c) not in DIACRITIC_CODEPOINTS)


def collapse_whitespace(text: str) -> str:
    return " ".join(text.split())


def unify_alef(text: str) -> str:
    return "".join(_ALEF_FORMS.get(c, c) for c in text)


def remove_punctuation(text: str) -> str:
    return "".join(" " if unicodedata.category(c).startswith("P") else c for c in text)


def remove_digits(text: str) -> str:
    return "".join(c for c in text if not unicodedata.category(c) == "Nd")
