"""Minimal rule-based text normalization for the phonemizer front end."""

from typing import List

import ftfy
import regex

ONES = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
    "seventeen", "eighteen", "nineteen",
)
TENS = ("", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety")

MAX_SPELLED_NUMBER = 9999

# "1,000" and "12,345,678" are one number
_GROUPED_NUMBER = regex.compile(r"(?<![\p{L}\p{N},])\d{1,3}(?:,\d{3})+(?![\p{L}\p{N}]|,\d)")
_DECIMAL = regex.compile(r"(?<![\p{L}\p{N}.])(\p{Nd}+)\.(\p{Nd}+)(?![\p{L}\p{N}]|\.\p{Nd})")
_NUMBER = regex.compile(r"(?<![\p{L}\p{N}])\p{Nd}+(?![\p{L}\p{N}])")
# apostrophes between letters survive ("don't"), every other punctuation or symbol splits words
_INTRA_WORD_APOSTROPHE = regex.compile(r"(?<=\p{L})['’](?=\p{L})")
_PUNCT_OR_SYMBOL = regex.compile(r"[\p{P}\p{S}]")
_UNMAPPABLE = regex.compile(r"[^\p{L}\p{M}\p{N}'\s]")


def number_to_words(value: int) -> List[str]:
    """Spell out 0-9999 ("1999" -> one thousand nine hundred ninety nine).

    Larger values are read digit by digit.
    """
    if value < 0:
        raise ValueError(f"negative numbers are not supported: {value}")
    if value > MAX_SPELLED_NUMBER:
        return [ONES[int(d)] for d in str(value)]
    if value < 20:
        return [ONES[value]]

    words = []
    thousands, rest = divmod(value, 1000)
    hundreds, rest = divmod(rest, 100)
    if thousands:
        words += [ONES[thousands], "thousand"]
    if hundreds:
        words += [ONES[hundreds], "hundred"]
    if rest >= 20:
        tens, ones = divmod(rest, 10)
        words.append(TENS[tens])
        if ones:
            words.append(ONES[ones])
    elif rest:
        words.append(ONES[rest])
    return words


def _expand_number(match) -> str:
    digits = match.group()
    # non-ASCII decimal digits (e.g. Arabic-Indic) map through int()
    return " " + " ".join(number_to_words(int(digits))) + " "


def _expand_decimal(match) -> str:
    whole, fraction = match.groups()
    words = number_to_words(int(whole)) + ["point"] + [ONES[int(d)] for d in fraction]
    return " " + " ".join(words) + " "


def normalize(text: str) -> List[str]:
    """Case-fold, expand standalone numbers, strip punctuation, split on whitespace.

    >>> normalize("The cat, 2 cats.")
    ['the', 'cat', 'two', 'cats']
    >>> normalize("1,000 cats weigh 3.5 tons")
    ['one', 'thousand', 'cats', 'weigh', 'three', 'point', 'five', 'tons']
    """
    if not text:
        return []
    text = ftfy.fix_text(text).casefold()
    text = _GROUPED_NUMBER.sub(lambda m: m.group().replace(",", ""), text)
    text = _DECIMAL.sub(_expand_decimal, text)
    text = _NUMBER.sub(_expand_number, text)
    text = _INTRA_WORD_APOSTROPHE.sub("'", text)
    text = regex.sub(r"(?<!\p{L})'|'(?!\p{L})", " ", text)
    text = _PUNCT_OR_SYMBOL.sub(lambda m: m.group() if m.group() == "'" else " ", text)
    text = _UNMAPPABLE.sub("", text)
    return text.split()
