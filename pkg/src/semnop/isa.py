"""x86 subset decoder, semantic NOP seed catalog, and NOP composition.

The decoder is a linear sweep over a small 32-bit subset: nop, mov r32,r32,
jcc rel8, push/pop r32, pushf/popf, not/neg r32, the 0x83 imm8 ALU group,
inc/dec via the 0xFF group, mov r32,imm32, and ret. Anything else is a
decode error; real-world binaries go through boundary sidecars instead.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DecodeError, FormatError, InvalidArgumentError

MAX_INSN_LEN = 15

# 0x83 group /reg dispatch.
ALU_OPS = ("add", "or", "adc", "sbb", "and", "sub", "xor", "cmp")


@dataclass(frozen=True)
class Instruction:
    offset: int
    length: int
    opcode_class: str


@dataclass(frozen=True)
class InstructionStream:
    instructions: tuple
    section_len: int

    def lengths(self):
        return [insn.length for insn in self.instructions]


def decode_one(code: bytes, offset: int) -> Instruction:
    """Decode the single instruction starting at `offset`."""
    if offset >= len(code):
        raise DecodeError("offset beyond end of code", offset)
    b = code[offset]
    remaining = len(code) - offset

    def need(n):
        if remaining < n:
            raise DecodeError("truncated instruction", offset)

    if b == 0x90:
        return Instruction(offset, 1, "nop")
    if b == 0x89:  # mov r/m32, r32 -- register form only
        need(2)
        modrm = code[offset + 1]
        if modrm >> 6 != 0b11:
            raise DecodeError("mov with memory operand unsupported", offset)
        return Instruction(offset, 2, "mov_rr")
    if 0x70 <= b <= 0x7F:
        need(2)
        return Instruction(offset, 2, "jcc")
    if 0x50 <= b <= 0x57:
        return Instruction(offset, 1, "push")
    if 0x58 <= b <= 0x5F:
        return Instruction(offset, 1, "pop")
    if b == 0x9C:
        return Instruction(offset, 1, "pushf")
    if b == 0x9D:
        return Instruction(offset, 1, "popf")
    if b == 0xF7:  # not/neg r32
        need(2)
        modrm = code[offset + 1]
        reg = (modrm >> 3) & 7
        if modrm >> 6 != 0b11 or reg not in (2, 3):
            raise DecodeError("unsupported 0xF7 form", offset)
        return Instruction(offset, 2, "not" if reg == 2 else "neg")
    if b == 0x83:  # ALU r32, imm8
        need(3)
        modrm = code[offset + 1]
        if modrm >> 6 != 0b11:
            raise DecodeError("ALU imm8 with memory operand unsupported", offset)
        return Instruction(offset, 3, ALU_OPS[(modrm >> 3) & 7])
    if b == 0xFF:  # inc/dec r32
        need(2)
        modrm = code[offset + 1]
        reg = (modrm >> 3) & 7
        if modrm >> 6 != 0b11 or reg not in (0, 1):
            raise DecodeError("unsupported 0xFF form", offset)
        return Instruction(offset, 2, "inc" if reg == 0 else "dec")
    if 0xB8 <= b <= 0xBF:  # mov r32, imm32
        need(5)
        return Instruction(offset, 5, "mov_imm32")
    if b == 0xC3:
        return Instruction(offset, 1, "ret")
    raise DecodeError(f"unsupported opcode 0x{b:02x}", offset)


def decode(code: bytes) -> InstructionStream:
    """Linear sweep from offset 0; instructions must tile the whole section."""
    if len(code) == 0:
        raise InvalidArgumentError("code must be nonempty")
    code = bytes(code)
    out = []
    offset = 0
    while offset < len(code):
        insn = decode_one(code, offset)
        out.append(insn)
        offset += insn.length
    return InstructionStream(tuple(out), len(code))


def save_boundaries(stream: InstructionStream, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for insn in stream.instructions:
            fh.write(f"{insn.offset},{insn.length}\n")


def load_boundaries(path) -> InstructionStream:
    """Parse an "offset,length" sidecar; offsets must tile from 0."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                off_s, len_s = line.split(",")
                offset, length = int(off_s), int(len_s)
            except ValueError as exc:
                raise FormatError(f"line {lineno}: malformed entry {line!r}") from exc
            if not 1 <= length <= MAX_INSN_LEN:
                raise FormatError(f"line {lineno}: length {length} out of range")
            expected = entries[-1].offset + entries[-1].length if entries else 0
            if offset < expected:
                raise FormatError(f"line {lineno}: overlap at offset {offset}")
            if offset > expected:
                raise FormatError(f"line {lineno}: gap before offset {offset}")
            entries.append(Instruction(offset, length, "sidecar"))
    if not entries:
        raise FormatError("empty boundary sidecar")
    return InstructionStream(tuple(entries), entries[-1].offset + entries[-1].length)


# --------------------------------------------------------------------------
# Semantic NOP seeds and composition


@dataclass(frozen=True)
class SemanticNopSeed:
    bytes: bytes
    category: str

    @property
    def byte_len(self):
        return len(self.bytes)


@dataclass(frozen=True)
class NopSequence:
    bytes: bytes
    parts: tuple  # SemanticNopSeed references, in concatenation order

    @property
    def byte_len(self):
        return len(self.bytes)


# The default catalog: twelve short state-neutral sequences, 1..8 bytes.
_DEFAULT_CATALOG = (
    ("90", "misc"),  # nop
    ("89c0", "movement"),  # mov eax, eax
    ("7700", "movement"),  # ja +0: both outcomes fall through
    ("5058", "misc"),  # push eax; pop eax
    ("f7d0f7d0", "logical"),  # not eax; not eax
    ("9c83c0009d", "arithmetic"),  # pushf; add eax, 0; popf
    ("9c83e0ff9d", "logical"),  # pushf; and eax, -1; popf
    ("9c83c8009d", "logical"),  # pushf; or eax, 0; popf
    ("9c83f0009d", "logical"),  # pushf; xor eax, 0; popf
    ("9cf7d8f7d89d", "arithmetic"),  # pushf; neg eax; neg eax; popf
    ("9cffc0ffc89d", "arithmetic"),  # pushf; inc eax; dec eax; popf
    ("9c83c00183e8019d", "arithmetic"),  # pushf; add eax,1; sub eax,1; popf
)

SEED_CATEGORIES = frozenset({"arithmetic", "movement", "logical", "misc"})

_catalog_cache = {}


def _admit(seeds, trials):
    """Verify neutrality of every seed before handing the catalog out."""
    from . import emu  # deferred: emu depends on the decoder above

    for seed in seeds:
        if not 1 <= seed.byte_len <= 8:
            raise InvalidArgumentError(
                f"seed {seed.bytes.hex()} has length {seed.byte_len}, need 1..8"
            )
        if seed.category not in SEED_CATEGORIES:
            raise InvalidArgumentError(f"unknown seed category {seed.category!r}")
        ok, counterexample = emu.check_neutral(seed.bytes, trials=trials)
        if not ok:
            raise InvalidArgumentError(
                f"seed {seed.bytes.hex()} is not a semantic NOP: {counterexample}"
            )
    return tuple(seeds)


def seed_catalog(trials: int = 100) -> tuple:
    """The default seed catalog, emulator-verified on first use."""
    key = ("default", trials)
    if key not in _catalog_cache:
        seeds = [SemanticNopSeed(bytes.fromhex(h), cat) for h, cat in _DEFAULT_CATALOG]
        _catalog_cache[key] = _admit(seeds, trials)
    return _catalog_cache[key]


def load_catalog(path, trials: int = 100) -> tuple:
    """Catalog file: one "hexbytes<TAB>category" entry per line."""
    seeds = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                hexbytes, category = line.split("\t")
                seeds.append(SemanticNopSeed(bytes.fromhex(hexbytes), category))
            except ValueError as exc:
                raise FormatError(f"line {lineno}: malformed entry {line!r}") from exc
    if not seeds:
        raise FormatError("empty seed catalog")
    return _admit(seeds, trials)


DEFAULT_NOP_LIMIT = 256


def generate_nops(target_len: int, limit: int | None = DEFAULT_NOP_LIMIT,
                  catalog: tuple | None = None) -> list:
    """All distinct seed compositions of exactly target_len bytes.

    Depth-first over seeds sorted by their bytes, which yields the
    sequences in lexicographic byte order for prefix-free catalogs like
    the default one. Returns at most `limit` sequences; an impossible
    length yields an empty list.
    """
    if target_len < 1:
        raise InvalidArgumentError("target_len must be >= 1")
    if catalog is None:
        catalog = seed_catalog()
    seeds = sorted(catalog, key=lambda s: s.bytes)

    # feasible[n] == True iff some composition sums to exactly n bytes
    feasible = [False] * (target_len + 1)
    feasible[0] = True
    for n in range(1, target_len + 1):
        feasible[n] = any(
            s.byte_len <= n and feasible[n - s.byte_len] for s in seeds
        )

    out = []
    seen = set()

    def extend(prefix_bytes, prefix_parts, remaining):
        if limit is not None and len(out) >= limit:
            return
        if remaining == 0:
            if prefix_bytes not in seen:
                seen.add(prefix_bytes)
                out.append(NopSequence(prefix_bytes, tuple(prefix_parts)))
            return
        for seed in seeds:
            if seed.byte_len <= remaining and feasible[remaining - seed.byte_len]:
                prefix_parts.append(seed)
                extend(prefix_bytes + seed.bytes, prefix_parts, remaining - seed.byte_len)
                prefix_parts.pop()

    extend(b"", [], target_len)
    return out
