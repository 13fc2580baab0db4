"""Fixed caption grammar for colored-shape prompts.

Captions follow the template ``<BOS> COLOR SHAPE [AND COLOR SHAPE] <EOS>``
padded to :data:`SEQ_LEN` tokens, over a 12-token vocabulary. Encoding is
deterministic and round-trips exactly, which keeps the autoregressive
caption loss trivially verifiable.
"""

from __future__ import annotations

from .errors import VocabError

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle")

PAD, BOS, EOS, AND, UNK = 0, 1, 2, 3, 4
_COLOR_BASE = 5          # tokens 5..8
_SHAPE_BASE = 9          # tokens 9..11
VOCAB_SIZE = 12
SEQ_LEN = 7

TOKEN_NAMES = (
    "<pad>", "<bos>", "<eos>", "and", "<unk>",
    *COLORS, *SHAPES,
)

Attribute = tuple[int, int]  # (color_id, shape_id)


def color_token(color_id: int) -> int:
    if not 0 <= color_id < len(COLORS):
        raise VocabError(f"unknown color id {color_id}")
    return _COLOR_BASE + color_id


def shape_token(shape_id: int) -> int:
    if not 0 <= shape_id < len(SHAPES):
        raise VocabError(f"unknown shape id {shape_id}")
    return _SHAPE_BASE + shape_id


def caption_tokens(attributes: list[Attribute] | tuple[Attribute, ...]) -> tuple[int, ...]:
    """Encode 1 or 2 (color, shape) pairs into the fixed 7-token caption."""
    attrs = list(attributes)
    if len(attrs) not in (1, 2):
        raise VocabError(f"expected 1 or 2 attribute pairs, got {len(attrs)}")
    seq = [BOS]
    for i, (c, s) in enumerate(attrs):
        if i == 1:
            seq.append(AND)
        seq.append(color_token(c))
        seq.append(shape_token(s))
    seq.append(EOS)
    seq.extend([PAD] * (SEQ_LEN - len(seq)))
    return tuple(seq)


def decode_tokens(tokens) -> list[Attribute]:
    """Strict inverse of :func:`caption_tokens`; raises on malformed input."""
    toks = [int(t) for t in tokens]
    if len(toks) != SEQ_LEN or toks[0] != BOS:
        raise VocabError(f"malformed caption {toks}")
    attrs: list[Attribute] = []
    i = 1
    while i < SEQ_LEN:
        t = toks[i]
        if t == EOS:
            if any(x != PAD for x in toks[i + 1:]):
                raise VocabError(f"tokens after <eos> in {toks}")
            if len(attrs) not in (1, 2):
                raise VocabError(f"expected 1 or 2 pairs in {toks}")
            return attrs
        if attrs:
            if t != AND:
                raise VocabError(f"expected 'and' at position {i} in {toks}")
            i += 1
            t = toks[i]
        if not (_COLOR_BASE <= t < _SHAPE_BASE and i + 1 < SEQ_LEN
                and _SHAPE_BASE <= toks[i + 1] < VOCAB_SIZE):
            raise VocabError(f"expected COLOR SHAPE at position {i} in {toks}")
        attrs.append((t - _COLOR_BASE, toks[i + 1] - _SHAPE_BASE))
        i += 2
    raise VocabError(f"missing <eos> in {toks}")


def attributes_text(attributes: list[Attribute] | tuple[Attribute, ...]) -> str:
    """Canonical prompt text, e.g. ``a red square and a blue circle``."""
    parts = [f"a {COLORS[c]} {SHAPES[s]}" for c, s in attributes]
    return " and ".join(parts)


def parse_prompt_text(text: str) -> list[Attribute]:
    """Extract ordered (color, shape) pairs from free-form prompt text.

    Scans words left to right; each color word must be followed (not
    necessarily adjacently) by a shape word before the next color word.
    """
    words = [w.strip(".,;!?").lower() for w in text.split()]
    attrs: list[Attribute] = []
    pending_color: int | None = None
    for w in words:
        if w in COLORS:
            if pending_color is not None:
                raise VocabError(f"color {COLORS[pending_color]!r} has no shape in {text!r}")
            pending_color = COLORS.index(w)
        elif w in SHAPES:
            if pending_color is None:
                raise VocabError(f"shape {w!r} has no color in {text!r}")
            attrs.append((pending_color, SHAPES.index(w)))
            pending_color = None
    if pending_color is not None:
        raise VocabError(f"color {COLORS[pending_color]!r} has no shape in {text!r}")
    if len(attrs) not in (1, 2):
        raise VocabError(f"could not parse 1 or 2 (color, shape) pairs from {text!r}")
    return attrs
