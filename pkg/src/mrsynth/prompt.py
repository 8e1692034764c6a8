"""Metadata prompts and the byte-level BPE tokenizer.

Prompts follow one fixed template with two brace groups, the target
voxel size and the target ``{TR, TE, TI, FA}``::

    A 63-year-old male subject; target T1w; voxel {1.00, 1.00, 1.00} mm;
    parameters {2400.0, 2.2, 1000.0, 8}; scanner Siemens Prisma at 3.0 T.

The wording outside the braces is our own stand-in and is frozen here
because retrieval and conditioning rely on it being deterministic.

Tokenization uses the published CLIP byte-pair merge table shipped in
``data/bpe_simple_vocab_16e6.txt.gz`` (49,408 ids including the two
specials). Sequences are padded with id 0 to :data:`CONTEXT_LENGTH`.
"""
from __future__ import annotations

import gzip
import hashlib
import html
import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import regex

from .phantom import MODALITIES, SequenceParams

CONTEXT_LENGTH = 90
VOCAB_FILE = "bpe_simple_vocab_16e6.txt.gz"
VOCAB_SHA256 = "924691ac288e54409236115652ad4aa250f48203de50a9e4722a6ecd48d6804a"
N_MERGES = 49152 - 256 - 2
START_TOKEN = "<|startoftext|>"
END_TOKEN = "<|endoftext|>"
PAD_ID = 0

_PATTERN = regex.compile(
    r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
    regex.IGNORECASE,
)


class TokenOverflowError(ValueError):
    def __init__(self, length: int, limit: int):
        super().__init__(f"prompt encodes to {length} tokens, limit is {limit}")
        self.length = length
        self.limit = limit


@dataclass(frozen=True)
class ScanMetadata:
    age_years: float
    sex: str
    field_strength_T: float
    scanner: str
    voxel_mm: tuple[float, float, float]
    tr_ms: float
    te_ms: float
    ti_ms: float | None
    fa_deg: float
    modality: str

    def __post_init__(self):
        object.__setattr__(self, "voxel_mm", tuple(float(v) for v in self.voxel_mm))
        nums = [self.age_years, self.field_strength_T, *self.voxel_mm, self.tr_ms,
                self.te_ms, self.fa_deg] + ([] if self.ti_ms is None else [self.ti_ms])
        if not all(math.isfinite(float(v)) for v in nums):
            raise ValueError("metadata numerics must be finite")
        if not 0 <= self.age_years <= 120:
            raise ValueError(f"age_years must lie in [0, 120], got {self.age_years}")
        if self.sex not in ("M", "F"):
            raise ValueError(f"sex must be 'M' or 'F', got {self.sex!r}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if len(self.voxel_mm) != 3:
            raise ValueError("voxel_mm must have 3 entries")
        if "{" in self.scanner or "}" in self.scanner:
            raise ValueError("scanner name may not contain braces")

    @classmethod
    def from_sequence(cls, params: SequenceParams, age_years: float, sex: str) -> "ScanMetadata":
        return cls(age_years, sex, params.field_strength_T, params.scanner, params.voxel_mm,
                   params.tr_ms, params.te_ms, params.ti_ms, params.fa_deg, params.modality)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["voxel_mm"] = list(self.voxel_mm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScanMetadata":
        fields = {k: d[k] for k in cls.__dataclass_fields__}
        return cls(**fields)


def write_sidecar(path, meta: ScanMetadata) -> None:
    Path(path).write_text(json.dumps(meta.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_sidecar(path) -> ScanMetadata:
    return ScanMetadata.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _fmt_age(age: float) -> str:
    return f"{age:.1f}".rstrip("0").rstrip(".")


def build_prompt(meta: ScanMetadata) -> str:
    voxel = ", ".join(f"{v:.2f}" for v in meta.voxel_mm)
    ti = "None" if meta.ti_ms is None else f"{meta.ti_ms:.1f}"
    params = f"{meta.tr_ms:.1f}, {meta.te_ms:.1f}, {ti}, {meta.fa_deg:.0f}"
    sex = "male" if meta.sex == "M" else "female"
    return (
        f"A {_fmt_age(meta.age_years)}-year-old {sex} subject; target {meta.modality}; "
        f"voxel {{{voxel}}} mm; parameters {{{params}}}; "
        f"scanner {meta.scanner} at {meta.field_strength_T:.1f} T."
    )


def modality_prompt(modality: str) -> str:
    """Short prompt naming only the modality, used for modality retrieval."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    return f"target {modality}."


def _bytes_to_unicode() -> dict[int, str]:
    bs = (list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1))
          + list(range(ord("®"), ord("ÿ") + 1)))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def _pairs(word: tuple[str, ...]) -> set[tuple[str, str]]:
    return set(zip(word[:-1], word[1:]))


def canonical_form(text: str) -> str:
    """Lower-cased text with all whitespace removed; tokenization is exact modulo this."""
    return "".join(text.lower().split())


class BPETokenizer:
    """Byte-level BPE over the CLIP merge table.

    Loaded once and read-only afterwards, so a single instance can be
    shared between threads.
    """

    def __init__(self, path=None, context_length: int = CONTEXT_LENGTH):
        if path is None:
            raw = resources.files("mrsynth").joinpath("data").joinpath(VOCAB_FILE).read_bytes()
            digest = hashlib.sha256(raw).hexdigest()
            if digest != VOCAB_SHA256:
                raise RuntimeError(f"vocabulary checksum mismatch: {digest}")
        else:
            raw = Path(path).read_bytes()
        merges = gzip.decompress(raw).decode("utf-8").split("\n")[1 : N_MERGES + 1]
        merges = [tuple(m.split()) for m in merges]
        self.byte_encoder = _bytes_to_unicode()
        self.byte_decoder = {v: k for k, v in self.byte_encoder.items()}
        vocab = list(self.byte_encoder.values())
        vocab += [v + "</w>" for v in vocab]
        vocab += ["".join(m) for m in merges]
        vocab += [START_TOKEN, END_TOKEN]
        self.encoder = {tok: i for i, tok in enumerate(vocab)}
        self.decoder = vocab
        self.bpe_ranks = {m: i for i, m in enumerate(merges)}
        self.start_id = self.encoder[START_TOKEN]
        self.end_id = self.encoder[END_TOKEN]
        self.context_length = context_length
        self._cache = {START_TOKEN: START_TOKEN, END_TOKEN: END_TOKEN}

    @property
    def vocab_size(self) -> int:
        return len(self.decoder)

    def _bpe(self, token: str) -> str:
        if token in self._cache:
            return self._cache[token]
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = _pairs(word)
        while pairs:
            bigram = min(pairs, key=lambda p: self.bpe_ranks.get(p, math.inf))
            if bigram not in self.bpe_ranks:
                break
            first, second = bigram
            merged, i = [], 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = tuple(merged)
            if len(word) == 1:
                break
            pairs = _pairs(word)
        out = " ".join(word)
        self._cache[token] = out
        return out

    def encode(self, text: str) -> list[int]:
        """Token ids of ``text`` without start/end markers."""
        text = " ".join(html.unescape(text).split()).lower()
        ids = []
        for piece in regex.findall(_PATTERN, text):
            piece = "".join(self.byte_encoder[b] for b in piece.encode("utf-8"))
            ids.extend(self.encoder[t] for t in self._bpe(piece).split(" "))
        return ids

    def decode(self, ids) -> str:
        for i in ids:
            if not 0 <= int(i) < self.vocab_size:
                raise ValueError(f"token id {int(i)} outside [0, {self.vocab_size})")
        text = "".join(self.decoder[int(i)] for i in ids)
        data = bytearray(self.byte_decoder[c] for c in text)
        return data.decode("utf-8", errors="replace").replace("</w>", " ").strip()

    def tokenize(self, prompt: str) -> np.ndarray:
        body = self.encode(prompt)
        length = len(body) + 2
        if length > self.context_length:
            raise TokenOverflowError(length, self.context_length)
        ids = np.full(self.context_length, PAD_ID, dtype=np.int64)
        ids[:length] = [self.start_id, *body, self.end_id]
        return ids

    def detokenize(self, ids) -> str:
        ids = [int(i) for i in np.asarray(ids).ravel()]
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise ValueError(f"token id {i} outside [0, {self.vocab_size})")
        if not ids or ids[0] != self.start_id:
            raise ValueError("token sequence must begin with the start token")
        try:
            end = ids.index(self.end_id)
        except ValueError:
            raise ValueError("token sequence has no end token") from None
        return self.decode(ids[1:end])


@lru_cache(maxsize=None)
def default_tokenizer() -> BPETokenizer:
    return BPETokenizer()


def tokenize(prompt: str) -> np.ndarray:
    return default_tokenizer().tokenize(prompt)


def detokenize(ids) -> str:
    return default_tokenizer().detokenize(ids)


def end_positions(tokens: np.ndarray) -> np.ndarray:
    """Index of the end token in each row of a ``(B, L)`` id array."""
    tokens = np.atleast_2d(tokens)
    hit = tokens == default_tokenizer().end_id
    if not hit.any(axis=1).all():
        raise ValueError("every token row needs an end token")
    return hit.argmax(axis=1)
